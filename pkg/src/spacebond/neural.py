"""Trainable machinery: projector MLPs, InfoNCE, hand-derived gradients, Adam.

Gradients are written out explicitly; the graph is tiny (a couple of
linear layers, GELU, row normalization, log-softmax) and a central
finite-difference checker is part of the module surface so the analytic
path can always be audited.

Numerics: parameters and all loss/gradient computation run in float64
(finite differences at eps=1e-3 are meaningless in float32); finished
projectors are rounded to float32, which is also their checkpoint format.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spacebond import kernels
from spacebond.store import ensure_unit_rows

CHECKPOINT_MAGIC = b"PRJ1"
ACTIVATIONS = ("identity", "gelu")

LOSS_KINDS = ("displacement", "combination")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Projector:
    """An MLP mapping one space's vectors into another's, unit-norm output.

    ``layers`` is a tuple of (weight, bias) pairs; the activation applies
    between layers, never after the last one.  Output rows are always
    L2-normalized.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    activation: str = "gelu"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("projector needs at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for w, b in self.layers:
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
                raise ValueError("layer shapes inconsistent")

    @property
    def d_in(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def d_out(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    def astype(self, dtype) -> "Projector":
        return Projector(
            layers=tuple(
                (np.ascontiguousarray(w, dtype=dtype), np.ascontiguousarray(b, dtype=dtype))
                for w, b in self.layers
            ),
            activation=self.activation,
        )


def init_projector(
    d_in: int,
    d_out: int,
    hidden: int | None,
    seed: int,
    activation: str = "gelu",
    dtype=np.float64,
) -> Projector:
    """Seeded uniform fan-in initialization; ``hidden=None`` gives one layer."""
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    dims = [d_in, d_out] if hidden is None else [d_in, hidden, d_out]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
        layers.append((np.ascontiguousarray(w), np.ascontiguousarray(b)))
    return Projector(layers=tuple(layers), activation=activation)


def identity_projector(d: int, dtype=np.float64) -> Projector:
    """Single-layer projector that passes unit inputs through unchanged."""
    return Projector(
        layers=((np.eye(d, dtype=dtype), np.zeros(d, dtype=dtype)),),
        activation="identity",
    )


def _forward_cached(p: Projector, x: np.ndarray):
    """Float64 forward pass keeping every intermediate for the backward pass."""
    acts = [np.ascontiguousarray(x, dtype=np.float64)]
    pre = []
    h = acts[0]
    last = len(p.layers) - 1
    for li, (w, b) in enumerate(p.layers):
        z = h @ np.asarray(w, dtype=np.float64) + np.asarray(b, dtype=np.float64)
        z = np.ascontiguousarray(z)
        pre.append(z)
        if li < last and p.activation == "gelu":
            h = kernels.gelu(z)
        else:
            h = z
        acts.append(h)
    y, norms = kernels.normalize_rows_fwd(acts[-1])
    return y, (acts, pre, norms, y)


def _backward(p: Projector, cache, dy: np.ndarray):
    """Parameter gradients given d(loss)/d(output); mirrors _forward_cached."""
    acts, pre, norms, y = cache
    dh = kernels.normalize_rows_bwd(y, norms, np.ascontiguousarray(dy))
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(p.layers)
    last = len(p.layers) - 1
    for li in range(last, -1, -1):
        w, _ = p.layers[li]
        if li < last and p.activation == "gelu":
            dh = dh * kernels.gelu_grad(pre[li])
        dw = acts[li].T @ dh
        db = dh.sum(axis=0)
        grads[li] = (dw, db)
        if li > 0:
            dh = np.ascontiguousarray(dh @ np.asarray(w, dtype=np.float64).T)
    return grads


def projector_forward(p: Projector, x: np.ndarray) -> np.ndarray:
    """Apply the projector; float64 math inside, float32 rows of unit norm out."""
    if x.shape[1] != p.d_in:
        raise ValueError(f"input has d={x.shape[1]}, projector expects {p.d_in}")
    y, _ = _forward_cached(p, x)
    return y.astype(np.float32)


def infonce(a: np.ndarray, b: np.ndarray, temperature: float) -> float:
    """Symmetric InfoNCE between row-aligned, row-normalized batches.

    Cross-entropy of the temperature-scaled similarity logits against the
    diagonal, averaged over both retrieval directions.  Computing each
    direction from its own matmul makes infonce(a, b) == infonce(b, a)
    exact, not just up to rounding.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a64 = np.ascontiguousarray(a, dtype=np.float64)
    b64 = np.ascontiguousarray(b, dtype=np.float64)
    l_ab, _ = kernels.softmax_xent_rows(np.ascontiguousarray(a64 @ b64.T / temperature))
    l_ba, _ = kernels.softmax_xent_rows(np.ascontiguousarray(b64 @ a64.T / temperature))
    return 0.5 * (l_ab + l_ba)


def _infonce_grad_wrt_b(a: np.ndarray, b: np.ndarray, temperature: float):
    """Loss plus d(loss)/db for the symmetric InfoNCE with ``a`` held fixed."""
    l1 = np.ascontiguousarray(a @ b.T / temperature)
    l2 = np.ascontiguousarray(b @ a.T / temperature)
    loss_ab, g1 = kernels.softmax_xent_rows(l1)
    loss_ba, g2 = kernels.softmax_xent_rows(l2)
    db = (0.5 / temperature) * (g1.T @ a + g2 @ a)
    return 0.5 * (loss_ab + loss_ba), db


def _unit64(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(
        ensure_unit_rows(np.ascontiguousarray(x, dtype=np.float64))
    )


def _batch_loss(anchors, proj_inputs, p: Projector, temperature: float):
    """Sum of InfoNCE terms pairing every anchor with every projected input.

    ``anchors`` stay fixed; each of ``proj_inputs`` goes through the
    projector once, collects output-gradients from all anchors, and is
    backpropagated once.  Returns (loss, per-layer parameter grads).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    total = 0.0
    grads = None
    for x in proj_inputs:
        y, cache = _forward_cached(p, x)
        dy = np.zeros_like(y)
        for anchor in anchors:
            term, db = _infonce_grad_wrt_b(anchor, y, temperature)
            total += term
            dy += db
        layer_grads = _backward(p, cache, dy)
        if grads is None:
            grads = layer_grads
        else:
            grads = [
                (gw + lw, gb + lb)
                for (gw, gb), (lw, lb) in zip(grads, layer_grads)
            ]
    return total, grads


def loss_displacement(batch, p: Projector, temperature: float):
    """Training loss mapping the unified space onto an image-text expert.

    The expert-side pseudo embeddings (text and image) are the fixed
    anchors; the projected unified text, image, and audio pseudo
    embeddings are each contrasted against both anchors, six InfoNCE
    terms in total.
    """
    mats = batch.matrices
    anchors = [
        _unit64(mats[("expert", "text")]),
        _unit64(mats[("expert", "image")]),
    ]
    inputs = [
        _unit64(mats[("unified", "text")]),
        _unit64(mats[("unified", "image")]),
        _unit64(mats[("unified", "audio")]),
    ]
    return _batch_loss(anchors, inputs, p, temperature)


def loss_combination(batch, p: Projector, temperature: float):
    """Training loss mapping an audio-text expert into the frozen unified space.

    Mirror image of :func:`loss_displacement`: the unified pseudo
    embeddings are the fixed anchors and the projected expert text and
    audio are contrasted against all three, six terms again.
    """
    mats = batch.matrices
    anchors = [
        _unit64(mats[("unified", "text")]),
        _unit64(mats[("unified", "image")]),
        _unit64(mats[("unified", "audio")]),
    ]
    inputs = [
        _unit64(mats[("expert", "text")]),
        _unit64(mats[("expert", "audio")]),
    ]
    return _batch_loss(anchors, inputs, p, temperature)


LOSS_FNS = {"displacement": loss_displacement, "combination": loss_combination}


def finite_difference_grads(loss_fn, p: Projector, eps: float = 1e-3):
    """Central finite differences of ``loss_fn(projector)`` per parameter.

    Intended for small instances; cost is two loss evaluations per scalar
    parameter.
    """
    grads = []
    for li, (w, b) in enumerate(p.layers):
        dw = np.zeros_like(w)
        db = np.zeros_like(b)
        for arr, darr in ((w, dw), (b, db)):
            flat = arr.reshape(-1)
            dflat = darr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = loss_fn(p)
                flat[i] = orig - eps
                lo = loss_fn(p)
                flat[i] = orig
                dflat[i] = (hi - lo) / (2.0 * eps)
        grads.append((dw, db))
    return grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def adam_init(params: list[np.ndarray]) -> AdamState:
    return AdamState(
        m=[np.zeros_like(x) for x in params],
        v=[np.zeros_like(x) for x in params],
    )


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"param/grad shape mismatch: {p.shape} vs {g.shape}")
        kernels.adam_update(
            p.reshape(-1),
            np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
            m.reshape(-1),
            v.reshape(-1),
            lr,
            beta1,
            beta2,
            bc1,
            bc2,
            eps,
        )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 256
    tau_infonce: float = 1.0 / 50.0
    hidden: int | None = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.tau_infonce <= 0:
            raise ValueError("lr, batch_size and tau_infonce must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


@dataclass(frozen=True)
class TrainResult:
    projector: Projector
    epoch_losses: tuple[float, ...]


class StaticStream:
    """Wrap a fixed list of batches as an epoch-indexed stream (tests, toys)."""

    def __init__(self, batches):
        self._batches = list(batches)

    def epoch_batches(self, epoch: int):
        return iter(self._batches)


def train_projector(stream, loss_kind: str, d_in: int, d_out: int, cfg: TrainConfig) -> TrainResult:
    """Train one projector on a batch stream; deterministic given the config.

    The returned projector is rounded to float32, the canonical artifact
    precision.  ``epoch_losses`` holds the mean batch loss per epoch.
    """
    if loss_kind not in LOSS_FNS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    loss_fn = LOSS_FNS[loss_kind]
    p = init_projector(d_in, d_out, cfg.hidden, cfg.seed, dtype=np.float64)
    state = adam_init(p.param_arrays())
    epoch_losses = []
    for epoch in range(cfg.epochs):
        losses = []
        for batch in stream.epoch_batches(epoch):
            loss, grads = loss_fn(batch, p, cfg.tau_infonce)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {len(losses)}"
                )
            flat_grads = [g for pair in grads for g in pair]
            adam_step(
                p.param_arrays(),
                flat_grads,
                state,
                cfg.lr,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
            )
            losses.append(loss)
        if not losses:
            raise ValueError("batch stream produced no batches")
        epoch_losses.append(float(np.mean(losses)))
    return TrainResult(projector=p.astype(np.float32), epoch_losses=tuple(epoch_losses))


def save_projector(p: Projector, path) -> None:
    """Checkpoint: PRJ1 magic, layer count, per-layer dims + f32 data, tag byte."""
    p32 = p.astype(np.float32)
    with open(Path(path), "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(p32.layers)))
        for w, b in p32.layers:
            f.write(struct.pack("<II", w.shape[0], w.shape[1]))
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
        f.write(struct.pack("B", ACTIVATIONS.index(p32.activation)))


def load_projector(path) -> Projector:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a projector checkpoint")
    (n_layers,) = struct.unpack("<I", raw[4:8])
    offset = 8
    layers = []
    for _ in range(n_layers):
        rows, cols = struct.unpack("<II", raw[offset : offset + 8])
        offset += 8
        w = np.frombuffer(raw[offset : offset + rows * cols * 4], dtype="<f4")
        w = w.reshape(rows, cols).copy()
        offset += rows * cols * 4
        b = np.frombuffer(raw[offset : offset + cols * 4], dtype="<f4").copy()
        offset += cols * 4
        layers.append((w, b))
    (act_idx,) = struct.unpack("B", raw[offset : offset + 1])
    if offset + 1 != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return Projector(layers=tuple(layers), activation=ACTIVATIONS[act_idx])
