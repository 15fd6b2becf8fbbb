"""Dense numeric primitives shared by every layer: affine maps, activations,
inverted dropout, Adam, and the central-difference gradient checker that acts
as the correctness authority for all hand-written backward passes.

Training runs in float32; gradient verification switches the whole model to
float64, where finite differences are trustworthy.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError

TRAIN_DTYPE = np.float32
VERIFY_DTYPE = np.float64


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Independent counter-based stream for one purpose ("init", "shuffle", ...).

    Streams with different labels never overlap; the same (seed, label) pair
    always reproduces the same sequence.
    """
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, key])))


def ensure_finite(name: str, arr) -> None:
    """Raise NumericsError if `arr` contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {name}")


def affine(x, w, b=None):
    """w @ x for a single vector, or row-wise x @ w.T for a batch.

    `w` has shape (out, in); `b`, when given, has shape (out,).
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"affine: x {x.shape} does not conform with w {w.shape}")
    y = x @ w.T
    if b is not None:
        b = np.asarray(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(
                f"affine: bias {b.shape} does not match output width ({w.shape[0]},)"
            )
        y = y + b
    return y


def affine_backward(dy, x, w, with_bias=True):
    """Gradients of affine w.r.t. (x, w, b) given the upstream gradient dy."""
    dy = np.asarray(dy)
    dx = dy @ w
    if x.ndim == 1:
        dw = np.outer(dy, x)
        db = dy.copy() if with_bias else None
    else:
        dw = dy.T @ x
        db = dy.sum(axis=0) if with_bias else None
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid(x):
    """Overflow-safe logistic function; works on scalars and arrays."""
    scalar = np.isscalar(x) or getattr(x, "ndim", 0) == 0
    a = np.atleast_1d(np.asarray(x))
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ez = np.exp(a[~pos])
    out[~pos] = ez / (1.0 + ez)
    if scalar:
        return float(out[0])
    return out.reshape(np.shape(x))


def dropout_mask(rng: np.random.Generator, shape, rate: float, dtype):
    """Inverted-dropout mask: zeros with probability `rate`, survivors
    scaled by 1/(1-rate) so inference needs no rescaling."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return np.asarray(keep, dtype=dtype) / np.asarray(1.0 - rate, dtype=dtype)


def dropout(x, rate, training, rng=None):
    """Elementwise inverted dropout; bitwise identity when not training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode requires a generator")
    x = np.asarray(x)
    return x * dropout_mask(rng, x.shape, rate, x.dtype)


@dataclass
class AdamState:
    """Per-parameter Adam accumulators; `t` counts completed steps."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-4

    @classmethod
    def for_param(cls, param, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        zero = np.zeros_like(param)
        return cls(m=zero, v=zero.copy(), t=0, beta1=beta1, beta2=beta2, eps=eps, lr=lr)


def adam_step(param, grad, state: AdamState):
    """One bias-corrected Adam update. Mutates `state`, returns the new param."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(
            f"adam_step: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    return param - state.lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_index: int
    tol: float
    n_checked: int
    n_skipped: int

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (
            f"{status}: max_rel_err={self.max_rel_err:.3e} at index {self.worst_index} "
            f"(tol={self.tol:.1e}, checked={self.n_checked}, skipped={self.n_skipped})"
        )


def grad_check(f, analytic_grad, x, h=1e-5, tol=1e-4, guard=1e-4, kink_tol=1e-3):
    """Compare an analytic gradient with central differences of `f` at `x`.

    Four points (+-h, +-h/2) are evaluated per coordinate. A coordinate is
    skipped rather than compared when the stencil straddles a ReLU/max kink,
    detected two ways: the two central estimates disagree (kink near a
    stencil edge), or the one-sided segment slopes disagree grossly (kink
    near the centre, where both central estimates would agree on the useless
    average of the two one-sided slopes). Surviving estimates are Richardson
    extrapolated. Relative error uses a guarded denominator so that
    finite-difference noise on near-zero entries does not register as failure.

    `f` maps an array shaped like `x` to a scalar and must be evaluated in
    float64 for the comparison to be meaningful.
    """
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError(f"grad_check: gradient {analytic.shape} vs params {x.shape}")

    work = x.ravel().copy()
    shape = x.shape
    ag = analytic.ravel()
    max_err, worst = 0.0, -1
    checked = skipped = 0

    for i in range(work.size):
        orig = work[i]

        def f_at(offset):
            work[i] = orig + offset
            val = float(f(work.reshape(shape)))
            if not np.isfinite(val):
                work[i] = orig
                raise NumericsError(f"non-finite objective at coordinate {i}")
            return val

        fp, fm = f_at(h), f_at(-h)
        fp2, fm2 = f_at(0.5 * h), f_at(-0.5 * h)
        work[i] = orig

        n1 = (fp - fm) / (2.0 * h)
        n2 = (fp2 - fm2) / h
        fwd = (fp - fp2) / (0.5 * h)
        bwd = (fm2 - fm) / (0.5 * h)
        scale = max(abs(n1), abs(n2), abs(fwd), abs(bwd), guard)
        if abs(n1 - n2) / scale > kink_tol or abs(fwd - bwd) / scale > 0.05:
            skipped += 1
            continue
        numeric = (4.0 * n2 - n1) / 3.0
        err = abs(ag[i] - numeric) / max(abs(ag[i]), abs(numeric), guard)
        checked += 1
        if err > max_err:
            max_err, worst = err, i

    return GradCheckReport(
        passed=max_err <= tol,
        max_rel_err=max_err,
        worst_index=worst,
        tol=tol,
        n_checked=checked,
        n_skipped=skipped,
    )
