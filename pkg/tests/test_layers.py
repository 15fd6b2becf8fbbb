import math

import numpy as np
import pytest

from fatffm.diffcore import grad_check, rng_stream
from fatffm.errors import DataError
from fatffm.layers import (
    compose_conv,
    compose_conv_backward,
    compose_maxpool,
    cross_attention_cenet,
    cross_attention_cenet_backward,
    cross_attention_mlp,
    excite,
    excite_backward,
    gather,
    gather_backward,
    interact_hadamard,
    interact_inner,
    interact_inner_backward,
    linear_score,
    mlp_forward,
    pair_indices,
    rescale,
)


def random_em(seed, batch=2, n=4, k=3):
    return rng_stream(seed, "em").normal(size=(batch, n, n, k))


def layer_grad_ok(forward, backward_input_grad, x, seed=0, tol=1e-6):
    """Check d(sum(weights * forward(x)))/dx against finite differences."""
    out0 = forward(x)[0] if isinstance(forward(x), tuple) else forward(x)
    weights = rng_stream(seed, "probe-weights").normal(size=np.shape(out0))

    def f(v):
        out = forward(v)
        out = out[0] if isinstance(out, tuple) else out
        return float(np.sum(weights * out))

    analytic = backward_input_grad(x, weights)
    return grad_check(f, analytic, x, tol=tol)


class TestGather:
    OFF = np.array([0, 3, 6])
    SIZES = np.array([3, 3, 3])

    def _table(self, seed=0, t=3, k=2):
        return rng_stream(seed, "table").normal(size=(9, t, k))

    def test_value_one_returns_raw_rows(self):
        table = self._table()
        idx = np.array([[0, 1, 2]])
        em, _ = gather(table, idx, np.ones((1, 3)), self.OFF, self.SIZES)
        assert np.array_equal(em[0, 1], table[4])

    def test_value_zero_blanks_the_field(self):
        table = self._table()
        idx = np.array([[0, 1, 2]])
        val = np.array([[1.0, 0.0, 1.0]])
        em, _ = gather(table, idx, val, self.OFF, self.SIZES)
        assert np.all(em[0, 1] == 0.0)
        assert np.any(em[0, 0] != 0.0)

    def test_value_scaling_is_linear(self):
        table = self._table()
        idx = np.array([[2, 0, 1]])
        em1, _ = gather(table, idx, np.ones((1, 3)), self.OFF, self.SIZES)
        em2, _ = gather(table, idx, 2.0 * np.ones((1, 3)), self.OFF, self.SIZES)
        assert np.allclose(em2, 2.0 * em1)

    def test_out_of_range_index(self):
        with pytest.raises(DataError, match="field 1"):
            gather(self._table(), np.array([[0, 5, 0]]), np.ones((1, 3)), self.OFF, self.SIZES)

    def test_backward_accumulates_duplicate_rows(self):
        table = self._table()
        idx = np.array([[0, 1, 0], [0, 1, 0]])  # same rows twice in the batch
        val = np.ones((2, 3))
        em, cache = gather(table, idx, val, self.OFF, self.SIZES)
        dem = np.ones_like(em)
        dtable = gather_backward(dem, cache)
        # row 0 is hit by field 0 in both batch rows
        assert np.allclose(dtable[0], 2.0)

    def test_shared_table_broadcasts_over_targets(self):
        table = rng_stream(3, "fm-table").normal(size=(9, 1, 2))
        idx = np.array([[0, 1, 2]])
        em, _ = gather(table, idx, np.ones((1, 3)), self.OFF, self.SIZES)
        assert em.shape == (1, 3, 3, 2)
        assert np.array_equal(em[0, 0, 0], em[0, 0, 2])


class TestCompose:
    def test_conv_example(self):
        em = np.zeros((1, 2, 2, 2))
        em[0, 0, 0] = [1.0, 2.0]
        u = np.zeros((2, 2, 2))
        u[0, 0] = [0.5, 0.5]
        b = np.zeros((2, 2))
        d, _ = compose_conv(em, u, b)
        assert d[0, 0] == pytest.approx(1.5)

    def test_conv_negative_preactivation_clamps(self):
        em = np.ones((1, 2, 2, 2))
        u = -1.5 * np.ones((2, 2, 2))
        d, _ = compose_conv(em, u, np.zeros((2, 2)))
        assert np.all(d == 0.0)

    def test_maxpool_takes_strongest_coordinate(self):
        em = np.zeros((1, 2, 2, 2))
        em[0, 0, 1] = [3.0, -1.0]
        d, _ = compose_maxpool(em)
        assert d[0, 1] == 3.0

    def test_shared_kernel_mode(self):
        em = random_em(7, batch=1, n=3, k=2)
        u = rng_stream(8, "u").normal(size=(3, 2))
        b = rng_stream(9, "b").normal(size=3)
        d, _ = compose_conv(em, u, b, shared=True)
        # row i uses one kernel for every target field f
        expected = np.maximum(np.einsum("bijk,ik->bij", em, u) + b[:, None], 0)
        assert np.allclose(d, expected.reshape(1, 9))

    def test_conv_gradients(self):
        em = random_em(5, batch=1, n=3, k=2) + 0.3
        u = rng_stream(6, "u").normal(size=(3, 3, 2))
        b = rng_stream(6, "b").normal(size=(3, 3))

        def fwd(uv):
            return compose_conv(em, uv, b)[0]

        def back(uv, w):
            _, cache = compose_conv(em, uv, b)
            return compose_conv_backward(w, cache)[1]

        assert layer_grad_ok(fwd, back, u).passed


class TestExcite:
    def test_identity_weights_pass_nonnegative_descriptors(self):
        d = np.abs(rng_stream(1, "d").normal(size=(2, 4)))
        eye = np.eye(4)
        s, _ = excite(d, eye, eye)
        assert np.allclose(s, d)

    def test_negative_first_layer_kills_everything(self):
        d = np.abs(rng_stream(2, "d").normal(size=(2, 4)))
        s, _ = excite(d, -np.eye(4), np.eye(4))
        assert np.all(s == 0.0)

    def test_hand_evaluated_chain(self):
        # n=2, r=1: explicit 4-dim matrix/vector arithmetic as the oracle
        g = rng_stream(3, "chain")
        d = g.normal(size=(1, 4))
        w1 = g.normal(size=(4, 4)) * 0.5
        w2 = g.normal(size=(4, 4)) * 0.5
        s, _ = excite(d, w1, w2)
        hidden = [max(sum(w1[i][j] * d[0][j] for j in range(4)), 0.0) for i in range(4)]
        expected = [max(sum(w2[i][j] * hidden[j] for j in range(4)), 0.0) for i in range(4)]
        assert np.allclose(s[0], expected, atol=1e-12)

    def test_gradients(self):
        g = rng_stream(4, "exc")
        d = g.normal(size=(2, 4)) + 0.5
        w1 = g.normal(size=(2, 4))
        w2 = g.normal(size=(4, 2))

        def fwd(w1v):
            return excite(d, w1v, w2)[0]

        def back(w1v, w):
            _, cache = excite(d, w1v, w2)
            return excite_backward(w, cache)[1]

        assert layer_grad_ok(fwd, back, w1).passed


class TestRescale:
    def test_all_ones_is_exact_identity(self):
        em = random_em(10)
        s = np.ones((2, 16))
        out, _ = rescale(em, s)
        assert np.array_equal(out, em)

    def test_all_zeros(self):
        out, _ = rescale(random_em(11), np.zeros((2, 16)))
        assert np.all(out == 0.0)

    def test_single_entry_doubles_one_column(self):
        em = random_em(12)
        s = np.ones((2, 16))
        s[0, 1 * 4 + 2] = 2.0  # field 1, target 2 of batch row 0
        out, _ = rescale(em, s)
        assert np.allclose(out[0, 1, 2], 2.0 * em[0, 1, 2])
        out[0, 1, 2] = em[0, 1, 2]
        assert np.array_equal(out, em)


class TestInteract:
    def test_inner_length(self):
        a, _ = interact_inner(random_em(1, n=3))
        assert a.shape == (2, 3)

    def test_inner_zero_embeddings(self):
        a, _ = interact_inner(np.zeros((2, 4, 4, 3)))
        assert np.all(a == 0.0)

    def test_inner_matches_brute_force(self):
        em = random_em(2, batch=3, n=4, k=2)
        a, _ = interact_inner(em)
        for b in range(3):
            p = 0
            for i in range(4):
                for j in range(i + 1, 4):
                    expected = sum(em[b, i, j, t] * em[b, j, i, t] for t in range(2))
                    assert a[b, p] == pytest.approx(expected, abs=1e-12)
                    p += 1

    def test_hadamard_length(self):
        h, _ = interact_hadamard(random_em(3, n=3, k=4))
        assert h.shape == (2, 12)

    def test_hadamard_example(self):
        em = np.zeros((1, 2, 2, 2))
        em[0, 0, 1] = [1.0, 2.0]
        em[0, 1, 0] = [3.0, 4.0]
        h, _ = interact_hadamard(em)
        assert h[0].tolist() == [3.0, 8.0]

    def test_segment_sums_equal_inner(self):
        em = random_em(4, batch=5, n=5, k=3)
        inner, _ = interact_inner(em)
        had, _ = interact_hadamard(em)
        seg = had.reshape(5, -1, 3).sum(axis=2)
        assert np.allclose(seg, inner, atol=1e-12)

    def test_inner_backward_routes_to_partner_columns(self):
        em = random_em(5, batch=1, n=3, k=2)

        def fwd(v):
            return interact_inner(v)[0]

        def back(v, w):
            _, cache = interact_inner(v)
            return interact_inner_backward(w, cache)

        assert layer_grad_ok(fwd, back, em).passed

    def test_pair_order_is_lexicographic(self):
        ii, jj = pair_indices(4)
        assert list(zip(ii.tolist(), jj.tolist())) == [
            (0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3),
        ]


class TestMLP:
    def test_zero_weights_zero_output(self):
        a = rng_stream(1, "a").normal(size=(2, 4))
        x, _ = mlp_forward(a, [np.zeros((3, 4))], [np.zeros(3)], 0.0, False, None)
        assert np.all(x == 0.0)

    def test_identity_layer_on_nonnegative_input(self):
        a = np.abs(rng_stream(2, "a").normal(size=(2, 4)))
        x, _ = mlp_forward(a, [np.eye(4)], [np.zeros(4)], 0.0, False, None)
        assert np.array_equal(x, a)

    def test_two_layers_match_hand_chain(self):
        g = rng_stream(3, "mlp")
        a = g.normal(size=(1, 3))
        w0, b0 = g.normal(size=(4, 3)) * 0.3, g.normal(size=4) * 0.1
        w1, b1 = g.normal(size=(2, 4)) * 0.3, g.normal(size=2) * 0.1
        x, _ = mlp_forward(a, [w0, w1], [b0, b1], 0.0, False, None)
        h = np.maximum(a @ w0.T + b0, 0)
        expected = np.maximum(h @ w1.T + b1, 0)
        assert np.allclose(x, expected, atol=1e-12)

    def test_dropout_only_in_training(self):
        a = np.ones((4, 8))
        weights = [np.eye(8)]
        biases = [np.zeros(8)]
        x_eval, _ = mlp_forward(a, weights, biases, 0.5, False, None)
        assert np.array_equal(x_eval, a)
        x_train, _ = mlp_forward(a, weights, biases, 0.5, True, rng_stream(0, "drop"))
        assert set(np.unique(x_train)) <= {0.0, 2.0}


class TestLinear:
    OFF = np.array([0, 4])
    SIZES = np.array([4, 4])

    def test_zero_weights_gives_bias(self):
        score, _ = linear_score(
            np.zeros(8), np.array([0.7]), np.array([[1, 2]]), np.ones((1, 2)), self.OFF, self.SIZES
        )
        assert score[0] == pytest.approx(0.7)

    def test_single_active_feature(self):
        w = np.zeros(8)
        w[2] = 0.3
        score, _ = linear_score(
            w, np.array([0.1]), np.array([[2, 0]]), np.array([[1.0, 0.0]]), self.OFF, self.SIZES
        )
        assert score[0] == pytest.approx(0.4)

    def test_doubling_values_doubles_non_bias_part(self):
        g = rng_stream(5, "lin")
        w = g.normal(size=8)
        idx = np.array([[1, 3]])
        s1, _ = linear_score(w, np.zeros(1), idx, np.ones((1, 2)), self.OFF, self.SIZES)
        s2, _ = linear_score(w, np.zeros(1), idx, 2 * np.ones((1, 2)), self.OFF, self.SIZES)
        assert s2[0] == pytest.approx(2 * s1[0])


class TestCrossAttentionMLP:
    def test_equal_scores_give_uniform_weights(self):
        n_pairs = 6
        c = np.ones((1, n_pairs))  # identical cross features -> identical scores
        g = rng_stream(6, "att")
        w = g.normal(size=(4, 1))
        b = g.normal(size=4)
        h = g.normal(size=4)
        out, (_, _, _, _, _, att) = cross_attention_mlp(c, 1, w, b, h)
        assert np.allclose(att, 1.0 / n_pairs, atol=1e-12)
        assert np.allclose(out, c / n_pairs)

    def test_softmax_saturation(self):
        c = np.array([[100.0, 0.01, 0.01]])
        w = np.array([[1.0]])
        b = np.zeros(1)
        h = np.array([1.0])
        out, (_, _, _, _, _, att) = cross_attention_mlp(c, 1, w, b, h)
        assert att[0, 0] > 0.999
        assert out[0, 0] == pytest.approx(c[0, 0] * att[0, 0])

    def test_three_pair_hand_evaluation(self):
        # n=3 inner version: explicit softmax arithmetic as the oracle
        g = rng_stream(7, "att3")
        c = g.normal(size=(1, 3))
        w = g.normal(size=(2, 1))
        b = g.normal(size=2)
        h = g.normal(size=2)
        out, _ = cross_attention_mlp(c, 1, w, b, h)
        e = []
        for p in range(3):
            hidden = [max(w[t, 0] * c[0, p] + b[t], 0.0) for t in range(2)]
            e.append(h[0] * hidden[0] + h[1] * hidden[1])
        z = [math.exp(v - max(e)) for v in e]
        att = [v / sum(z) for v in z]
        expected = [att[p] * c[0, p] for p in range(3)]
        assert np.allclose(out[0], expected, atol=1e-12)


class TestCrossAttentionCENet:
    def test_forced_ones_is_identity(self):
        a = rng_stream(8, "ce").normal(size=(2, 6))
        out, _ = cross_attention_cenet(a, 1, None, None, np.eye(6), np.eye(6), force_ones=True)
        assert np.array_equal(out, a)

    def test_zero_input_zero_output(self):
        out, _ = cross_attention_cenet(
            np.zeros((2, 6)), 1, None, None, np.eye(6), np.eye(6)
        )
        assert np.all(out == 0.0)

    def test_hadamard_identity_excitation_hand_check(self):
        # n=3, k=2 Hadamard case: descriptors relu(u.c + b), identity excitation
        g = rng_stream(9, "ceh")
        a = g.normal(size=(1, 6))  # 3 pairs x k=2
        u = g.normal(size=(3, 2))
        ub = g.normal(size=3)
        eye = np.eye(3)
        out, _ = cross_attention_cenet(a, 2, u, ub, eye, eye)
        c = a.reshape(1, 3, 2)
        for p in range(3):
            desc = max(u[p, 0] * c[0, p, 0] + u[p, 1] * c[0, p, 1] + ub[p], 0.0)
            s = max(desc, 0.0)  # identity two-FC chain on non-negative input
            assert np.allclose(out[0, 2 * p : 2 * p + 2], s * c[0, p], atol=1e-12)

    def test_gradients_hadamard(self):
        g = rng_stream(10, "ceg")
        a = g.normal(size=(2, 6))
        u = g.normal(size=(3, 2))
        ub = g.normal(size=3)
        w1 = g.normal(size=(3, 3))
        w2 = g.normal(size=(3, 3))

        def fwd(av):
            return cross_attention_cenet(av, 2, u, ub, w1, w2)[0]

        def back(av, w):
            _, cache = cross_attention_cenet(av, 2, u, ub, w1, w2)
            return cross_attention_cenet_backward(w, cache)[0]

        assert layer_grad_ok(fwd, back, a).passed
