"""Model variants and their assembly.

Seven variants share one parameter convention: logistic regression ("lr"),
factorization machines ("fm"), field-aware factorization machines ("ffm"),
the deep field-aware model ("deepffm"), its field-attentive version
("fat-deepffm"), and the two post-interaction attention versions
("mlp-deepffm" with softmax weights, "ce-deepffm" with un-normalised ReLU
weights). Deep variants come in inner-product and Hadamard interaction
flavours. Forward and backward passes are assembled by hand from the layers
module; the gradient checker in diffcore is the correctness authority.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import layers
from .diffcore import TRAIN_DTYPE, rng_stream, sigmoid
from .errors import CheckpointError, ConfigError

VARIANTS = ("lr", "fm", "ffm", "deepffm", "fat-deepffm", "mlp-deepffm", "ce-deepffm")
DEEP_VARIANTS = ("deepffm", "fat-deepffm", "mlp-deepffm", "ce-deepffm")
INTERACTIONS = ("inner", "hadamard")
COMPOSERS = ("conv", "maxpool")

_DISPLAY = {
    "lr": "LR",
    "fm": "FM",
    "ffm": "FFM",
    "deepffm": "DeepFFM",
    "fat-deepffm": "FAT-DeepFFM",
    "mlp-deepffm": "MLP-DeepFFM",
    "ce-deepffm": "CE-DeepFFM",
}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture selector plus the hyperparameters defining one variant."""

    variant: str
    n_fields: int
    vocab_sizes: tuple
    embed_dim: int = 10
    interaction: str = "inner"
    hidden: tuple = (64, 64, 64)
    dropout: float = 0.5
    composer: str = "conv"
    shared_composer: bool = False
    reduction: int = 1
    attention_width: int = 16
    bypass_attention: bool = False  # test hook: pins every attention value to 1

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(s) for s in self.vocab_sizes))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    # -- derived dimensions ------------------------------------------------

    @property
    def num_features(self) -> int:
        return sum(self.vocab_sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.vocab_sizes)[:-1]]).astype(np.int64)

    @property
    def sizes_array(self) -> np.ndarray:
        return np.asarray(self.vocab_sizes, dtype=np.int64)

    @property
    def n_pairs(self) -> int:
        return self.n_fields * (self.n_fields - 1) // 2

    @property
    def pair_dim(self) -> int:
        return 1 if self.interaction == "inner" else self.embed_dim

    @property
    def interaction_dim(self) -> int:
        return self.n_pairs * self.pair_dim

    @property
    def is_deep(self) -> bool:
        return self.variant in DEEP_VARIANTS

    @property
    def display_name(self) -> str:
        base = _DISPLAY.get(self.variant, self.variant)
        if self.is_deep:
            return base + ("-I" if self.interaction == "inner" else "-H")
        return base

    # -- validation ---------------------------------------------------------

    def problems(self) -> list:
        errs = []
        if self.variant not in VARIANTS:
            errs.append(f"variant: unknown {self.variant!r}, expected one of {VARIANTS}")
        if self.n_fields < 1:
            errs.append(f"n_fields: must be >= 1, got {self.n_fields}")
        if self.variant != "lr" and self.n_fields < 2:
            errs.append(f"n_fields: {self.variant} needs >= 2 fields, got {self.n_fields}")
        if len(self.vocab_sizes) != self.n_fields:
            errs.append(
                f"vocab_sizes: expected {self.n_fields} entries, got {len(self.vocab_sizes)}"
            )
        if any(s < 1 for s in self.vocab_sizes):
            errs.append("vocab_sizes: every field needs at least 1 feature")
        if self.embed_dim < 1:
            errs.append(f"embed_dim: must be >= 1, got {self.embed_dim}")
        if self.interaction not in INTERACTIONS:
            errs.append(f"interaction: unknown {self.interaction!r}")
        if not 0.0 <= self.dropout < 1.0:
            errs.append(f"dropout: must be in [0, 1), got {self.dropout}")
        if self.is_deep and (not self.hidden or any(h < 1 for h in self.hidden)):
            errs.append(f"hidden: deep variants need positive layer widths, got {self.hidden}")
        if self.variant == "fat-deepffm":
            if self.composer not in COMPOSERS:
                errs.append(f"composer: unknown {self.composer!r}")
            n2 = self.n_fields * self.n_fields
            if self.reduction < 1 or n2 % self.reduction != 0:
                errs.append(
                    f"reduction: must divide n_fields^2 = {n2}, got {self.reduction}"
                )
        if self.variant == "ce-deepffm":
            if self.n_pairs < 1:
                errs.append("ce-deepffm: needs at least one field pair")
            elif self.reduction < 1 or self.n_pairs % self.reduction != 0:
                errs.append(
                    f"reduction: must divide the pair count {self.n_pairs}, got {self.reduction}"
                )
        if self.variant == "mlp-deepffm" and self.attention_width < 1:
            errs.append(f"attention_width: must be >= 1, got {self.attention_width}")
        if self.bypass_attention and self.variant not in ("fat-deepffm", "ce-deepffm"):
            errs.append(f"bypass_attention: not supported for {self.variant}")
        return errs

    def validated(self) -> "ModelSpec":
        errs = self.problems()
        if errs:
            raise ConfigError("invalid model spec:\n  " + "\n  ".join(errs))
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["vocab_sizes"] = list(self.vocab_sizes)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model fields: {sorted(extra)}")
        return cls(**d).validated()


def _xavier(g, fan_in, fan_out, shape, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return g.uniform(-limit, limit, size=shape).astype(dtype)


def expected_param_shapes(spec: ModelSpec) -> dict:
    """Parameter block name -> shape, in canonical (checkpoint) order."""
    m, n, k = spec.num_features, spec.n_fields, spec.embed_dim
    shapes = {"linear_w": (m,), "linear_b": (1,)}
    if spec.variant == "lr":
        return shapes
    shapes["embed"] = (m, 1, k) if spec.variant == "fm" else (m, n, k)
    if spec.variant in ("fm", "ffm"):
        return shapes
    if spec.variant == "fat-deepffm":
        if spec.composer == "conv":
            if spec.shared_composer:
                shapes["comp_u"] = (n, k)
                shapes["comp_b"] = (n,)
            else:
                shapes["comp_u"] = (n, n, k)
                shapes["comp_b"] = (n, n)
        n2 = n * n
        shapes["exc_w1"] = (n2 // spec.reduction, n2)
        shapes["exc_w2"] = (n2, n2 // spec.reduction)
    if spec.variant == "mlp-deepffm":
        shapes["att_w"] = (spec.attention_width, spec.pair_dim)
        shapes["att_b"] = (spec.attention_width,)
        shapes["att_h"] = (spec.attention_width,)
    if spec.variant == "ce-deepffm":
        p = spec.n_pairs
        if spec.interaction == "hadamard":
            shapes["xcomp_u"] = (p, k)
            shapes["xcomp_b"] = (p,)
        shapes["xexc_w1"] = (p // spec.reduction, p)
        shapes["xexc_w2"] = (p, p // spec.reduction)
    width = spec.interaction_dim
    for i, h in enumerate(spec.hidden):
        shapes[f"mlp_w{i}"] = (h, width)
        shapes[f"mlp_b{i}"] = (h,)
        width = h
    shapes["out_w"] = (width,)
    shapes["out_b"] = (1,)
    return shapes


def init_params(spec: ModelSpec, seed: int, dtype=TRAIN_DTYPE) -> dict:
    """Seed-determined initial parameters: embeddings ~ N(0, 0.01), affine
    weights Xavier-uniform, biases zero."""
    g = rng_stream(seed, "init:" + spec.variant)
    m, n, k = spec.num_features, spec.n_fields, spec.embed_dim
    params = {}
    for name, shape in expected_param_shapes(spec).items():
        if name == "embed":
            params[name] = g.normal(0.0, 0.01, size=shape).astype(dtype)
        elif name == "linear_w":
            params[name] = _xavier(g, m, 1, shape, dtype)
        elif name in ("comp_u", "xcomp_u"):
            params[name] = _xavier(g, k, 1, shape, dtype)
        elif name in ("exc_w1", "exc_w2", "xexc_w1", "xexc_w2", "att_w"):
            params[name] = _xavier(g, shape[1], shape[0], shape, dtype)
        elif name == "att_h":
            params[name] = _xavier(g, shape[0], 1, shape, dtype)
        elif name.startswith("mlp_w"):
            params[name] = _xavier(g, shape[1], shape[0], shape, dtype)
        elif name == "out_w":
            params[name] = _xavier(g, shape[0], 1, shape, dtype)
        else:  # biases
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def probe_params(spec: ModelSpec, seed: int, dtype=np.float64) -> dict:
    """Generic-position parameters for gradient verification.

    The training init puts attention-scaled interactions near 1e-8, which
    parks every downstream ReLU at its kink; probing there tells us nothing.
    These draws keep all pre-activations at O(1), away from kinks relative to
    the finite-difference step.
    """
    g = rng_stream(seed, "probe:" + spec.variant)
    params = {}
    for name, shape in expected_param_shapes(spec).items():
        if name == "embed":
            params[name] = g.normal(0.0, 0.35, size=shape).astype(dtype)
        elif name.endswith("_b") or name in ("att_b", "att_h"):
            params[name] = g.normal(0.0, 0.2, size=shape).astype(dtype)
        else:
            params[name] = _xavier(g, shape[-1], shape[0], shape, dtype)
    return params


class Model:
    """One variant bound to its parameters; forward/backward over batches."""

    def __init__(self, spec: ModelSpec, params: dict):
        spec.validated()
        expected = expected_param_shapes(spec)
        problems = []
        for name, shape in expected.items():
            if name not in params:
                problems.append(f"missing parameter block {name!r} (shape {shape})")
            elif tuple(params[name].shape) != shape:
                problems.append(
                    f"block {name!r}: shape {tuple(params[name].shape)} != expected {shape}"
                )
        for name in params:
            if name not in expected:
                problems.append(f"unexpected parameter block {name!r}")
        if problems:
            raise ConfigError("params do not match spec:\n  " + "\n  ".join(problems))
        self.spec = spec
        self.params = {name: params[name] for name in expected}

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int, dtype=TRAIN_DTYPE) -> "Model":
        return cls(spec, init_params(spec, seed, dtype))

    @property
    def dtype(self):
        return self.params["linear_w"].dtype

    def astype(self, dtype) -> "Model":
        return Model(self.spec, {k: v.astype(dtype) for k, v in self.params.items()})

    # -- forward -------------------------------------------------------------

    def forward(self, idx, val, training=False, rng=None):
        """Predicted click probabilities for a batch; returns (probs, cache)."""
        spec, p = self.spec, self.params
        offsets, sizes = spec.offsets, spec.sizes_array
        val = np.asarray(val)

        lin, lin_rows = layers.linear_score(p["linear_w"], p["linear_b"], idx, val, offsets, sizes)
        cache = {"lin_rows": lin_rows, "val": val, "batch": idx.shape[0]}

        if spec.variant == "lr":
            score = lin
        else:
            em, cache["gather"] = layers.gather(p["embed"], idx, val, offsets, sizes)
            if spec.variant == "fat-deepffm":
                if spec.bypass_attention:
                    s = np.ones((idx.shape[0], spec.n_fields**2), dtype=em.dtype)
                    cache["compose"] = cache["excite"] = None
                else:
                    if spec.composer == "maxpool":
                        d, cache["compose"] = layers.compose_maxpool(em)
                    else:
                        d, cache["compose"] = layers.compose_conv(
                            em, p["comp_u"], p["comp_b"], spec.shared_composer
                        )
                    s, cache["excite"] = layers.excite(d, p["exc_w1"], p["exc_w2"])
                em, cache["rescale"] = layers.rescale(em, s)

            if spec.variant in ("fm", "ffm"):
                a, cache["interact"] = layers.interact_inner(em)
                score = lin + a.sum(axis=1)
            else:
                if spec.interaction == "inner":
                    a, cache["interact"] = layers.interact_inner(em)
                else:
                    a, cache["interact"] = layers.interact_hadamard(em)
                if spec.variant == "mlp-deepffm":
                    a, cache["cross_att"] = layers.cross_attention_mlp(
                        a, spec.pair_dim, p["att_w"], p["att_b"], p["att_h"]
                    )
                elif spec.variant == "ce-deepffm":
                    a, cache["cross_att"] = layers.cross_attention_cenet(
                        a,
                        spec.pair_dim,
                        p.get("xcomp_u"),
                        p.get("xcomp_b"),
                        p["xexc_w1"],
                        p["xexc_w2"],
                        force_ones=spec.bypass_attention,
                    )
                weights = [p[f"mlp_w{i}"] for i in range(len(spec.hidden))]
                biases = [p[f"mlp_b{i}"] for i in range(len(spec.hidden))]
                x, cache["mlp"] = layers.mlp_forward(a, weights, biases, spec.dropout, training, rng)
                cache["x_top"] = x
                score = lin + x @ p["out_w"] + p["out_b"][0]
        probs = sigmoid(score)
        return probs, cache

    # -- backward ------------------------------------------------------------

    def backward(self, cache, dscore) -> dict:
        """Gradients for every parameter block, given dLoss/dscore."""
        spec, p = self.spec, self.params
        dtype = self.dtype
        grads = {}

        if spec.is_deep:
            x = cache["x_top"]
            grads["out_w"] = dscore @ x
            grads["out_b"] = np.array([dscore.sum()], dtype=dtype)
            dx = dscore[:, None] * p["out_w"][None]
            da, dws, dbs = layers.mlp_backward(dx, cache["mlp"])
            for i, (dw, db) in enumerate(zip(dws, dbs)):
                grads[f"mlp_w{i}"] = dw
                grads[f"mlp_b{i}"] = db
            if spec.variant == "mlp-deepffm":
                da, dw, db, dh = layers.cross_attention_mlp_backward(da, cache["cross_att"])
                grads["att_w"], grads["att_b"], grads["att_h"] = dw, db, dh
            elif spec.variant == "ce-deepffm":
                da, du, dub, dw1, dw2 = layers.cross_attention_cenet_backward(
                    da, cache["cross_att"]
                )
                if spec.interaction == "hadamard":
                    grads["xcomp_u"] = du if du is not None else np.zeros_like(p["xcomp_u"])
                    grads["xcomp_b"] = dub if dub is not None else np.zeros_like(p["xcomp_b"])
                grads["xexc_w1"] = dw1 if dw1 is not None else np.zeros_like(p["xexc_w1"])
                grads["xexc_w2"] = dw2 if dw2 is not None else np.zeros_like(p["xexc_w2"])
            if spec.interaction == "inner":
                dem = layers.interact_inner_backward(da, cache["interact"])
            else:
                dem = layers.interact_hadamard_backward(da, cache["interact"])
        elif spec.variant in ("fm", "ffm"):
            n_pairs = self.spec.n_pairs
            da = np.broadcast_to(dscore[:, None], (cache["batch"], n_pairs))
            dem = layers.interact_inner_backward(da, cache["interact"])
        else:
            dem = None

        if spec.variant == "fat-deepffm":
            dem, ds = layers.rescale_backward(dem, cache["rescale"])
            if not spec.bypass_attention:
                dd, dw1, dw2 = layers.excite_backward(ds, cache["excite"])
                grads["exc_w1"], grads["exc_w2"] = dw1, dw2
                if spec.composer == "maxpool":
                    dem_c = layers.compose_maxpool_backward(dd, cache["compose"])
                else:
                    dem_c, du, db = layers.compose_conv_backward(dd, cache["compose"])
                    grads["comp_u"], grads["comp_b"] = du, db
                dem = dem + dem_c
            else:
                grads["exc_w1"] = np.zeros_like(p["exc_w1"])
                grads["exc_w2"] = np.zeros_like(p["exc_w2"])
                if spec.composer == "conv":
                    grads["comp_u"] = np.zeros_like(p["comp_u"])
                    grads["comp_b"] = np.zeros_like(p["comp_b"])

        if dem is not None:
            grads["embed"] = layers.gather_backward(dem, cache["gather"])

        grads["linear_w"], grads["linear_b"] = layers.linear_backward(
            dscore, cache["lin_rows"], cache["val"], spec.num_features, dtype
        )
        return grads

    # -- inference -----------------------------------------------------------

    def predict_proba(self, dataset, batch_size=8192) -> np.ndarray:
        out = np.empty(dataset.n_rows, dtype=np.float64)
        for start in range(0, dataset.n_rows, batch_size):
            stop = min(start + batch_size, dataset.n_rows)
            probs, _ = self.forward(dataset.idx[start:stop], dataset.val[start:stop])
            out[start:stop] = probs
        return out


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"FFMCKPT1"


def save_checkpoint(path, model: Model) -> None:
    """Header (version + spec) followed by named float32 LE blocks."""
    header = json.dumps(
        {"version": 1, "spec": model.spec.to_dict()}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(model.params)))
        for name, arr in model.params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path, dtype=TRAIN_DTYPE) -> Model:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable header: {exc}") from None
        if header.get("version") != 1:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
        spec = ModelSpec.from_dict(header["spec"])
        (n_blocks,) = struct.unpack("<I", _read_exact(fh, 4, "block count"))
        params = {}
        for b in range(n_blocks):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, f"block {b} name length"))
            name = _read_exact(fh, name_len, f"block {b} name").decode("utf-8", "replace")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, f"block {name!r} ndim"))
            shape = struct.unpack(
                f"<{ndim}I", _read_exact(fh, 4 * ndim, f"block {name!r} shape")
            )
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(fh, 4 * count, f"block {name!r} data")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after the last block")
    return Model(spec, params)
