"""NumPy reference implementations of the hot numeric kernels.

``spacebond._fastcore`` provides compiled equivalents of every function in
this module; ``spacebond.kernels`` picks whichever backend is available.
These definitions are the semantic reference: reductions and
transcendentals run in float64 regardless of input dtype, and results are
cast back to the input dtype at the end.

All array arguments must be C-contiguous float32 or float64.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def softmax_rows(scores: np.ndarray, scale: float) -> np.ndarray:
    """Row-wise softmax of ``scores * scale``."""
    s = scores.astype(np.float64) * scale
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s.astype(scores.dtype, copy=False)


def softmax_xent_rows(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of square ``logits`` against diagonal targets.

    Returns ``(loss, grad)`` where ``grad`` is the derivative of the loss
    with respect to the logits, i.e. ``(softmax(logits) - I) / n`` row-wise.
    """
    n, m_cols = logits.shape
    if n != m_cols:
        raise ValueError(f"logits must be square, got {logits.shape}")
    ell = logits.astype(np.float64)
    m = ell.max(axis=1, keepdims=True)
    e = np.exp(ell - m)
    s = e.sum(axis=1, keepdims=True)
    idx = np.arange(n)
    loss = float(np.mean(np.log(s[:, 0]) + m[:, 0] - ell[idx, idx]))
    g = e / s
    g[idx, idx] -= 1.0
    g /= n
    return loss, g.astype(logits.dtype, copy=False)


def gelu(u: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    x = u.astype(np.float64)
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(u.dtype, copy=False)


def gelu_grad(u: np.ndarray) -> np.ndarray:
    """Derivative of exact GELU, evaluated elementwise."""
    x = u.astype(np.float64)
    g = 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return g.astype(u.dtype, copy=False)


def normalize_rows_fwd(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Divide each row by its L2 norm.

    Returns ``(y, norms)`` with ``norms`` in float64 for reuse in the
    backward pass.  Rows with zero norm produce non-finite output; callers
    guard against that where it matters.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", z, z, dtype=np.float64))
    y = z.astype(np.float64) / norms[:, None]
    return y.astype(z.dtype, copy=False), norms


def normalize_rows_bwd(y: np.ndarray, norms: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward pass of row normalization: map d/dy to d/dz given y = z/|z|."""
    y64 = y.astype(np.float64)
    dy64 = dy.astype(np.float64)
    dots = np.einsum("ij,ij->i", dy64, y64)
    dz = (dy64 - y64 * dots[:, None]) / norms[:, None]
    return dz.astype(y.dtype, copy=False)


def adam_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    bc1: float,
    bc2: float,
    eps: float,
) -> None:
    """One in-place Adam step on flat views ``p``, ``m``, ``v``.

    ``bc1`` and ``bc2`` are the precomputed bias corrections
    ``1 - beta1**t`` and ``1 - beta2**t``.
    """
    np.multiply(m, beta1, out=m)
    m += (1.0 - beta1) * g
    np.multiply(v, beta2, out=v)
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
