"""Mini-batch Adam training, binary-classification metrics, and the ablation
matrix runner that trains several variants under identical seed and data."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .diffcore import AdamState, adam_step, rng_stream
from .errors import ConfigError, MetricError
from .model import Model, ModelSpec

log = logging.getLogger("fatffm")

PRED_CLIP = 1e-7


def logloss(preds, labels) -> float:
    """Mean binary cross entropy with predictions clipped to [1e-7, 1-1e-7]."""
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0:
        raise MetricError("logloss of an empty prediction list is undefined")
    if p.shape != y.shape:
        raise MetricError(f"logloss: {p.size} predictions vs {y.size} labels")
    p = np.clip(p, PRED_CLIP, 1.0 - PRED_CLIP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def auc(preds, labels) -> float:
    """Mann-Whitney AUC via average ranks; ties count half."""
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.size == 0 or p.shape != y.shape:
        raise MetricError("auc needs matching, non-empty predictions and labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = p.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auc is undefined without both classes")
    order = np.argsort(p, kind="mergesort")
    sp = p[order]
    new_group = np.empty(p.size, dtype=bool)
    new_group[0] = True
    new_group[1:] = sp[1:] != sp[:-1]
    group = np.cumsum(new_group) - 1
    starts = np.flatnonzero(new_group)
    counts = np.diff(np.append(starts, p.size))
    avg_rank = starts + (counts - 1) / 2.0 + 1.0
    ranks = np.empty(p.size, dtype=np.float64)
    ranks[order] = avg_rank[group]
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalReport:
    model: str
    split: str
    auc: float
    logloss: float
    count: int


def evaluate(model: Model, dataset, split: str, batch_size=8192) -> EvalReport:
    if dataset.n_rows == 0:
        raise MetricError(f"cannot evaluate on empty split {split!r}")
    preds = model.predict_proba(dataset, batch_size=batch_size)
    if not np.all(np.isfinite(preds)):
        raise MetricError(f"non-finite predictions on split {split!r}")
    return EvalReport(
        model=model.spec.display_name,
        split=split,
        auc=auc(preds, dataset.y),
        logloss=logloss(preds, dataset.y),
        count=dataset.n_rows,
    )


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 1000
    learning_rate: float = 1e-4
    seed: int = 0
    eval_every: int = 1
    patience: int | None = None

    def problems(self) -> list:
        errs = []
        if self.epochs < 1:
            errs.append(f"epochs: must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            errs.append(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            errs.append(f"learning_rate: must be >= 0, got {self.learning_rate}")
        if self.eval_every < 1:
            errs.append(f"eval_every: must be >= 1, got {self.eval_every}")
        if self.patience is not None and self.patience < 1:
            errs.append(f"patience: must be >= 1 when set, got {self.patience}")
        if self.seed < 0:
            errs.append(f"seed: must be >= 0, got {self.seed}")
        return errs

    def validated(self) -> "TrainConfig":
        errs = self.problems()
        if errs:
            raise ConfigError("invalid train config:\n  " + "\n  ".join(errs))
        return self


@dataclass
class TrainResult:
    model: Model
    records: list = field(default_factory=list)
    best_epoch: int = -1
    diverged: bool = False


def _record(epoch, report: EvalReport) -> dict:
    return {
        "epoch": epoch,
        "split": report.split,
        "auc": report.auc,
        "logloss": report.logloss,
        "count": report.count,
    }


def train(spec: ModelSpec, cfg: TrainConfig, train_data, valid_data) -> TrainResult:
    """Epoch-shuffled mini-batch Adam on the logloss objective.

    Per-epoch train/valid metrics are recorded in evaluation mode; the
    returned model carries the parameters of the best validation-logloss
    epoch. A non-finite loss or gradient aborts training and keeps the last
    good snapshot.
    """
    spec.validated()
    cfg.validated()
    if train_data.n_rows == 0 or valid_data.n_rows == 0:
        raise ConfigError("training needs non-empty train and validation splits")

    model = Model.initialize(spec, cfg.seed)
    states = {
        name: AdamState.for_param(p, lr=cfg.learning_rate)
        for name, p in model.params.items()
    }
    shuffle_rng = rng_stream(cfg.seed, "shuffle")
    drop_rng = rng_stream(cfg.seed, "dropout")

    # last-good fallback if training never completes a healthy evaluation
    best_loss, best_params, best_epoch = np.inf, copy.deepcopy(model.params), -1
    records = []
    diverged = False
    stale = 0

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(train_data.n_rows)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for start in range(0, train_data.n_rows, cfg.batch_size):
                sel = order[start : start + cfg.batch_size]
                probs, cache = model.forward(
                    train_data.idx[sel], train_data.val[sel], training=True, rng=drop_rng
                )
                if not np.all(np.isfinite(probs)):
                    diverged = True
                    break
                dscore = (probs - train_data.y[sel]).astype(model.dtype)
                dscore /= model.dtype.type(len(sel))
                grads = model.backward(cache, dscore)
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    diverged = True
                    break
                for name in model.params:
                    model.params[name] = adam_step(model.params[name], grads[name], states[name])
        if diverged:
            log.warning("non-finite loss or gradient at epoch %d; aborting", epoch)
            break

        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            train_report = evaluate(model, train_data, "train")
            valid_report = evaluate(model, valid_data, "valid")
            records.append(_record(epoch, train_report))
            records.append(_record(epoch, valid_report))
            log.info(
                "epoch %d: train logloss %.6f auc %.6f | valid logloss %.6f auc %.6f",
                epoch, train_report.logloss, train_report.auc,
                valid_report.logloss, valid_report.auc,
            )
            if valid_report.logloss < best_loss:
                best_loss = valid_report.logloss
                best_params = copy.deepcopy(model.params)
                best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if cfg.patience is not None and stale >= cfg.patience:
                    log.info("no validation improvement for %d evals; stopping", stale)
                    break

    if best_params is not None:
        model.params = best_params
    final_train = evaluate(model, train_data, "train")
    final_valid = evaluate(model, valid_data, "valid")
    records.append(_record("final", final_train))
    records.append(_record("final", final_valid))
    return TrainResult(model=model, records=records, best_epoch=best_epoch, diverged=diverged)


@dataclass
class AblationRow:
    name: str
    interaction: str
    auc: float | None = None
    logloss: float | None = None
    count: int = 0
    error: str | None = None


def default_ablation_matrix(n_fields, vocab_sizes, interactions=("inner", "hadamard"), **spec_kwargs):
    """The eight-variant comparison grid: {DeepFFM, MLP-, CE-, FAT-} x {I, H}."""
    specs = []
    for interaction in interactions:
        for variant in ("deepffm", "mlp-deepffm", "ce-deepffm", "fat-deepffm"):
            specs.append(
                ModelSpec(
                    variant=variant,
                    n_fields=n_fields,
                    vocab_sizes=tuple(vocab_sizes),
                    interaction=interaction,
                    **spec_kwargs,
                )
            )
    return specs


def run_ablation(specs, cfg: TrainConfig, train_data, valid_data, eval_data=None):
    """Train every spec under identical seed/data; report rows grouped with
    the inner-product suffix first, then the Hadamard suffix. One failing
    model yields an error row instead of aborting the matrix."""
    if not specs:
        raise ConfigError("empty ablation matrix")
    dims = {(s.n_fields, s.embed_dim) for s in specs}
    if len(dims) > 1:
        raise ConfigError(f"ablation specs must share n_fields and embed_dim, got {sorted(dims)}")
    eval_data = valid_data if eval_data is None else eval_data

    ordered = [s for s in specs if s.interaction == "inner"] + [
        s for s in specs if s.interaction != "inner"
    ]
    rows, results = [], {}
    for spec in ordered:
        name = spec.display_name
        try:
            result = train(spec, cfg, train_data, valid_data)
            report = evaluate(result.model, eval_data, "eval")
            rows.append(
                AblationRow(
                    name=name,
                    interaction=spec.interaction,
                    auc=report.auc,
                    logloss=report.logloss,
                    count=report.count,
                )
            )
            results[name] = result
        except Exception as exc:  # noqa: BLE001 - keep the matrix running
            log.warning("ablation entry %s failed: %s", name, exc)
            rows.append(AblationRow(name=name, interaction=spec.interaction, error=str(exc)))
    return rows, results
