"""Seeded synthetic embedding spaces with shared latent ground truth.

A :class:`LatentWorld` holds unit-norm concept vectors; each realized
space embeds those concepts through its own column-orthonormal frame plus
per-modality Gaussian noise, then renormalizes.  Two spaces realized from
the same world therefore describe the same items (matched by id) in
different geometries and with different alignment tightness, which is
exactly the situation the bond-training pipeline has to handle, and the
ground-truth pairing makes alignment gains measurable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from spacebond.store import MODALITIES, EmbeddingMatrix, SpaceBundle

# Stream tags for seed derivation; each (seed, tag, ...) tuple feeds one
# independent SeedSequence so streams never alias.
_LATENT_STREAM = 0
_FRAME_STREAM = 1
_NOISE_STREAM = 2
_SHIFT_STREAM = 3

# Blend weight between the world-shared frame and the space-private frame.
# 0 would make all equal-dim spaces identical up to noise; large values
# decorrelate them completely.  The default leaves raw cross-space cosine
# retrieval above chance while still requiring a learned map for tight
# alignment.
DEFAULT_FRAME_JITTER = 1.5


def _unit_rows_f32(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x, dtype=np.float64))
    if (norms == 0).any():
        raise ValueError("degenerate zero row while normalizing")
    return (x / norms[:, None]).astype(np.float32)


@dataclass(frozen=True)
class LatentWorld:
    """Ground-truth concept vectors shared by every space of one experiment."""

    latents: np.ndarray
    ids: tuple[str, ...]
    seed: int

    def __post_init__(self):
        if len(self.ids) != self.latents.shape[0]:
            raise ValueError("ids and latents disagree on item count")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in world")

    @property
    def n(self) -> int:
        return self.latents.shape[0]

    @property
    def k(self) -> int:
        return self.latents.shape[1]


@dataclass(frozen=True)
class SpaceSpec:
    """Recipe for realizing one space from a world.

    ``noise_sigma`` maps modality tag to the expected noise-to-signal norm
    ratio: the additive Gaussian perturbation has expected squared norm
    ``sigma**2`` against unit-norm clean embeddings, so sigma=0 reproduces
    the clean frame projection and larger values loosen that modality's
    alignment.

    ``shared_shift`` perturbs the latent vectors themselves (same
    perturbation for every modality of this space, same norm-ratio
    convention).  It models a domain-specialized space: internally the
    modalities stay tightly aligned, but the space as a whole describes a
    consistently skewed version of the shared semantics, so knowledge
    transferred out of it is worth less to other spaces.
    """

    name: str
    dim: int
    modalities: tuple[str, ...]
    noise_sigma: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    frame_jitter: float = DEFAULT_FRAME_JITTER
    shared_shift: float = 0.0

    def __post_init__(self):
        if not self.modalities:
            raise ValueError(f"space {self.name!r} lists no modalities")
        for tag in self.modalities:
            if tag not in MODALITIES:
                raise ValueError(f"unknown modality tag {tag!r}")
            if self.noise_sigma.get(tag, 0.0) < 0:
                raise ValueError(f"negative noise_sigma for {tag!r}")
        if self.frame_jitter < 0 or self.shared_shift < 0:
            raise ValueError("frame_jitter and shared_shift must be nonnegative")


def generate_world(n_items: int, k: int, seed: int) -> LatentWorld:
    """Deterministically draw ``n_items`` unit-norm latent vectors in R^k."""
    if n_items < 2 or k < 2:
        raise ValueError("need n_items >= 2 and k >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _LATENT_STREAM]))
    latents = _unit_rows_f32(rng.standard_normal((n_items, k)))
    ids = tuple(f"item-{i:06d}" for i in range(n_items))
    return LatentWorld(latents=latents, ids=ids, seed=seed)


def _space_frame(world: LatentWorld, spec: SpaceSpec) -> np.ndarray:
    """Column-orthonormal dim x k frame, shared across the space's modalities.

    The frame blends a world-level Gaussian draw (common to all spaces of
    this world, prefix-stable across dims) with a space-private draw
    scaled by ``frame_jitter``, then orthonormalizes via QR with a fixed
    sign convention.
    """
    k = world.k
    shared_rng = np.random.default_rng(np.random.SeedSequence([world.seed, _FRAME_STREAM]))
    shared = shared_rng.standard_normal((spec.dim, k))
    own_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _FRAME_STREAM]))
    own = own_rng.standard_normal((spec.dim, k))
    q, r = np.linalg.qr(shared + spec.frame_jitter * own)
    q *= np.sign(np.diag(r))
    return q


def realize_space(world: LatentWorld, spec: SpaceSpec) -> SpaceBundle:
    """Embed the world's items into one space, one matrix per modality.

    Each modality sees ``normalize(frame @ latent + noise)`` where the
    frame is shared within the space and the noise stream is derived from
    ``(spec.seed, modality)``, so realizing the same spec twice is bitwise
    identical and sigma=0 modalities coincide exactly.
    """
    if spec.dim < world.k:
        raise ValueError(
            f"space dim {spec.dim} smaller than world latent dim {world.k}"
        )
    frame = _space_frame(world, spec)
    latents = world.latents.astype(np.float64)
    if spec.shared_shift > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _SHIFT_STREAM]))
        shift = rng.standard_normal((world.n, world.k))
        latents = latents + shift * (spec.shared_shift / np.sqrt(world.k))
        latents /= np.sqrt(np.einsum("ij,ij->i", latents, latents))[:, None]
    clean = latents @ frame.T
    modalities = {}
    for tag in spec.modalities:
        sigma = float(spec.noise_sigma.get(tag, 0.0))
        noisy = clean
        if sigma > 0.0:
            rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, _NOISE_STREAM, MODALITIES.index(tag)])
            )
            noise = rng.standard_normal((world.n, spec.dim))
            noisy = clean + noise * (sigma / np.sqrt(spec.dim))
        modalities[tag] = EmbeddingMatrix(ids=world.ids, data=_unit_rows_f32(noisy))
    return SpaceBundle(name=spec.name, dim=spec.dim, modalities=modalities)
