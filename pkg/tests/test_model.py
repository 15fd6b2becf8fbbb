import math

import numpy as np
import pytest

from fatffm.diffcore import VERIFY_DTYPE, grad_check, rng_stream, sigmoid
from fatffm.errors import CheckpointError, ConfigError
from fatffm.model import (
    Model,
    ModelSpec,
    expected_param_shapes,
    load_checkpoint,
    probe_params,
    save_checkpoint,
)

ALL_VARIANT_SPECS = [
    ("lr", "inner"),
    ("fm", "inner"),
    ("ffm", "inner"),
    ("deepffm", "inner"),
    ("deepffm", "hadamard"),
    ("fat-deepffm", "inner"),
    ("fat-deepffm", "hadamard"),
    ("mlp-deepffm", "inner"),
    ("mlp-deepffm", "hadamard"),
    ("ce-deepffm", "inner"),
    ("ce-deepffm", "hadamard"),
]


def small_spec(variant, interaction="inner", **kw):
    base = dict(
        variant=variant,
        n_fields=3,
        vocab_sizes=(4, 4, 4),
        embed_dim=2,
        interaction=interaction,
        hidden=(6, 4),
        dropout=0.0,
        reduction=1,
        attention_width=4,
    )
    base.update(kw)
    return ModelSpec(**base).validated()


def random_batch(spec, seed, batch=4, unit_values=False):
    g = rng_stream(seed, "batch")
    idx = np.stack([g.integers(0, s, size=batch) for s in spec.vocab_sizes], axis=1)
    if unit_values:
        val = np.ones((batch, spec.n_fields))
    else:
        val = g.uniform(0.5, 1.5, size=(batch, spec.n_fields))
    y = g.integers(0, 2, size=batch).astype(np.float64)
    return idx, val, y


class TestSpecValidation:
    def test_collects_every_problem(self):
        spec = ModelSpec(
            variant="nope",
            n_fields=2,
            vocab_sizes=(3,),
            embed_dim=0,
            interaction="outer",
            dropout=1.5,
        )
        errs = spec.problems()
        joined = "\n".join(errs)
        assert "variant" in joined
        assert "vocab_sizes" in joined
        assert "embed_dim" in joined
        assert "interaction" in joined
        assert "dropout" in joined
        assert len(errs) >= 5

    def test_reduction_must_divide(self):
        with pytest.raises(ConfigError, match="reduction"):
            small_spec("fat-deepffm", reduction=5)  # n^2 = 9

    def test_maxpool_has_no_composer_params(self):
        spec = small_spec("fat-deepffm", composer="maxpool")
        shapes = expected_param_shapes(spec)
        assert "comp_u" not in shapes and "comp_b" not in shapes
        assert "exc_w1" in shapes

    def test_display_names(self):
        assert small_spec("lr").display_name == "LR"
        assert small_spec("deepffm", "hadamard").display_name == "DeepFFM-H"
        assert small_spec("fat-deepffm", "inner").display_name == "FAT-DeepFFM-I"

    def test_params_must_match_spec(self):
        spec = small_spec("ffm")
        params = probe_params(spec, 0)
        del params["embed"]
        with pytest.raises(ConfigError, match="embed"):
            Model(spec, params)


class TestForwardOracles:
    def test_ffm_matches_hand_loop(self):
        # brute-force pairwise dots plus the first-order part, in pure Python
        spec = small_spec("ffm")
        model = Model(spec, probe_params(spec, 1, dtype=VERIFY_DTYPE))
        idx, val, _ = random_batch(spec, 2)
        probs, _ = model.forward(idx, val)
        emb = model.params["embed"]
        w = model.params["linear_w"]
        w0 = model.params["linear_b"][0]
        offsets = spec.offsets
        for b in range(idx.shape[0]):
            score = w0
            for i in range(3):
                score += val[b, i] * w[offsets[i] + idx[b, i]]
            for i in range(3):
                for j in range(i + 1, 3):
                    vi = emb[offsets[i] + idx[b, i], j] * val[b, i]
                    vj = emb[offsets[j] + idx[b, j], i] * val[b, j]
                    score += sum(vi[t] * vj[t] for t in range(2))
            assert probs[b] == pytest.approx(1.0 / (1.0 + math.exp(-score)), abs=1e-12)

    def test_fm_equals_ffm_with_target_independent_embeddings(self):
        fm_spec = small_spec("fm")
        ffm_spec = small_spec("ffm")
        fm = Model(fm_spec, probe_params(fm_spec, 3, dtype=VERIFY_DTYPE))
        ffm_params = probe_params(ffm_spec, 3, dtype=VERIFY_DTYPE)
        ffm_params["embed"] = np.repeat(fm.params["embed"], ffm_spec.n_fields, axis=1)
        ffm_params["linear_w"] = fm.params["linear_w"].copy()
        ffm_params["linear_b"] = fm.params["linear_b"].copy()
        ffm = Model(ffm_spec, ffm_params)
        idx, val, _ = random_batch(fm_spec, 4)
        p_fm, _ = fm.forward(idx, val)
        p_ffm, _ = ffm.forward(idx, val)
        assert np.allclose(p_fm, p_ffm, atol=1e-12)

    def test_lr_is_sigmoid_of_linear_part(self):
        spec = small_spec("lr")
        model = Model(spec, probe_params(spec, 5, dtype=VERIFY_DTYPE))
        idx, val, _ = random_batch(spec, 6)
        probs, _ = model.forward(idx, val)
        w, w0 = model.params["linear_w"], model.params["linear_b"][0]
        rows = idx + spec.offsets[None, :]
        assert np.allclose(probs, sigmoid(w0 + np.sum(w[rows] * val, axis=1)), atol=1e-12)

    @pytest.mark.parametrize("variant,interaction", ALL_VARIANT_SPECS)
    def test_outputs_strictly_inside_unit_interval(self, variant, interaction):
        spec = small_spec(variant, interaction)
        model = Model(spec, probe_params(spec, 7, dtype=VERIFY_DTYPE))
        idx, val, _ = random_batch(spec, 32, unit_values=True)
        probs, _ = model.forward(idx, val)
        assert np.all(probs > 0.0) and np.all(probs < 1.0)


class TestAttentionIdentity:
    @pytest.mark.parametrize("interaction", ["inner", "hadamard"])
    def test_fat_bypass_equals_deepffm_bitwise(self, interaction):
        fat_spec = small_spec("fat-deepffm", interaction, bypass_attention=True)
        deep_spec = small_spec("deepffm", interaction)
        fat = Model(fat_spec, probe_params(fat_spec, 8, dtype=VERIFY_DTYPE))
        shared = {
            name: fat.params[name]
            for name in expected_param_shapes(deep_spec)
        }
        deep = Model(deep_spec, shared)
        idx, val, _ = random_batch(fat_spec, 16)
        p_fat, _ = fat.forward(idx, val)
        p_deep, _ = deep.forward(idx, val)
        assert np.array_equal(p_fat, p_deep)

    def test_ce_bypass_equals_deepffm_bitwise(self):
        ce_spec = small_spec("ce-deepffm", "hadamard", bypass_attention=True)
        deep_spec = small_spec("deepffm", "hadamard")
        ce = Model(ce_spec, probe_params(ce_spec, 9, dtype=VERIFY_DTYPE))
        shared = {name: ce.params[name] for name in expected_param_shapes(deep_spec)}
        deep = Model(deep_spec, shared)
        idx, val, _ = random_batch(ce_spec, 16)
        assert np.array_equal(ce.forward(idx, val)[0], deep.forward(idx, val)[0])

    def test_attention_values_nonnegative(self):
        spec = small_spec("fat-deepffm", "hadamard")
        for seed in range(50):
            model = Model(spec, probe_params(spec, seed, dtype=VERIFY_DTYPE))
            idx, val, _ = random_batch(spec, seed, batch=8)
            _, cache = model.forward(idx, val)
            s = cache["excite"][0] @ model.params["exc_w1"].T  # descriptor side, sanity
            attention = cache["rescale"][1]
            assert np.all(attention >= 0.0)


class TestGradients:
    @pytest.mark.parametrize("variant,interaction", ALL_VARIANT_SPECS)
    def test_every_block_matches_finite_differences(self, variant, interaction):
        spec = small_spec(variant, interaction)
        model = Model(spec, probe_params(spec, 11, dtype=VERIFY_DTYPE))
        idx, val, y = random_batch(spec, 12, batch=1)
        y = float(y[0])

        def loss():
            probs, _ = model.forward(idx, val)
            p = float(probs[0])
            return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))

        probs, cache = model.forward(idx, val)
        grads = model.backward(cache, np.array([float(probs[0]) - y]))
        assert set(grads) == set(model.params)

        for block in model.params:
            base = model.params[block]
            assert np.all(np.isfinite(grads[block])), block

            def f(vec):
                model.params[block] = vec
                try:
                    return loss()
                finally:
                    model.params[block] = base

            report = grad_check(f, grads[block], base, tol=1e-4)
            assert report.passed, f"{variant}/{interaction}/{block}: {report}"

    def test_maxpool_composer_gradients(self):
        spec = small_spec("fat-deepffm", "hadamard", composer="maxpool")
        model = Model(spec, probe_params(spec, 13, dtype=VERIFY_DTYPE))
        idx, val, _ = random_batch(spec, 14, batch=1)

        def loss():
            probs, _ = model.forward(idx, val)
            return -math.log(float(probs[0]))

        probs, cache = model.forward(idx, val)
        grads = model.backward(cache, np.array([float(probs[0]) - 1.0]))
        base = model.params["embed"]

        def f(vec):
            model.params["embed"] = vec
            try:
                return loss()
            finally:
                model.params["embed"] = base

        assert grad_check(f, grads["embed"], base, tol=1e-4).passed


class TestValueScaling:
    def test_scaling_one_field_scales_its_block_only(self):
        spec = small_spec("ffm")
        model = Model(spec, probe_params(spec, 15, dtype=VERIFY_DTYPE))
        idx, val, _ = random_batch(spec, 16, batch=1)
        from fatffm.layers import gather

        em1, _ = gather(model.params["embed"], idx, val, spec.offsets, spec.sizes_array)
        val2 = val.copy()
        val2[0, 1] *= 3.0
        em2, _ = gather(model.params["embed"], idx, val2, spec.offsets, spec.sizes_array)
        assert np.allclose(em2[0, 1], 3.0 * em1[0, 1])
        assert np.array_equal(em2[0, 0], em1[0, 0])
        assert np.array_equal(em2[0, 2], em1[0, 2])


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path):
        spec = small_spec("fat-deepffm", "hadamard")
        model = Model.initialize(spec, 17)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.spec == spec
        for name in model.params:
            assert np.array_equal(loaded.params[name], model.params[name]), name
        # saving the loaded model reproduces the file byte for byte
        path2 = tmp_path / "again.ckpt"
        save_checkpoint(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_file_names_the_block(self, tmp_path):
        spec = small_spec("ffm")
        model = Model.initialize(spec, 18)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        blob = path.read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(blob[:-20])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "cut.ckpt")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        spec = small_spec("lr")
        model = Model.initialize(spec, 19)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        (tmp_path / "fat.ckpt").write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(tmp_path / "fat.ckpt")
