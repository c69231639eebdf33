"""Train and compose space bonds.

A displacement bond remaps the unified space into an expert space's
geometry (the expert's own embeddings stay untouched); a combination bond
remaps an expert into the frozen unified space.  Each bond's product is a
mixture of seven projectors, one per pseudo-pair training subset, applied
by mean pooling.  The sequential and parallel composition first displaces
into an image-text expert, then combines any number of audio-text experts
against the frozen displaced space.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spacebond.neural import (
    Projector,
    TrainConfig,
    load_projector,
    projector_forward,
    save_projector,
    train_projector,
)
from spacebond.pairs import SUBSET_NAMES, PairSampler
from spacebond.store import EmbeddingMatrix, SpaceBundle, ensure_unit_rows

BOND_MANIFEST = "manifest.json"

# Seed stream tags: one sub-seed per training subset, derived from the
# bond seed so subset trainings are independent yet reproducible.
_SUBSET_STREAM = 0


class BondError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectorEnsemble:
    """Mixture of projectors applied by mean pooling, then renormalized."""

    tags: tuple[str, ...]
    projectors: tuple[Projector, ...]

    def __post_init__(self):
        if not self.projectors:
            raise BondError("empty ensemble")
        if len(self.tags) != len(self.projectors):
            raise BondError("one tag per projector required")
        dims = {(p.d_in, p.d_out) for p in self.projectors}
        if len(dims) != 1:
            raise BondError(f"ensemble members disagree on dims: {dims}")

    @property
    def d_in(self) -> int:
        return self.projectors[0].d_in

    @property
    def d_out(self) -> int:
        return self.projectors[0].d_out

    def member(self, tag: str) -> Projector:
        try:
            return self.projectors[self.tags.index(tag)]
        except ValueError:
            raise BondError(f"no projector for subset {tag!r}") from None

    def apply(self, x: np.ndarray) -> np.ndarray:
        return ensemble_apply(self, x)


def ensemble_apply(ensemble: ProjectorEnsemble, x: np.ndarray) -> np.ndarray:
    """Mean of the member outputs, brought back to unit row norm."""
    acc = np.zeros((x.shape[0], ensemble.d_out), dtype=np.float64)
    for p in ensemble.projectors:
        acc += projector_forward(p, x)
    acc /= len(ensemble.projectors)
    return ensure_unit_rows(acc.astype(np.float32))


@dataclass(frozen=True)
class BondArtifact:
    """A trained bond: its direction, the ensemble, and the loss history."""

    kind: str  # "displacement" | "combination"
    source_space: str
    target_space: str
    ensemble: ProjectorEnsemble
    epoch_losses: dict[str, tuple[float, ...]]

    @property
    def direction(self) -> str:
        return f"{self.source_space}->{self.target_space}"


def _check_shared_ids(unified: SpaceBundle, expert: SpaceBundle) -> None:
    if not set(expert.tags) <= set(unified.tags):
        raise BondError(
            f"expert modalities {expert.tags} not a subset of unified {unified.tags}"
        )
    for tag in expert.tags:
        shared = set(unified.matrix(tag).ids) & set(expert.matrix(tag).ids)
        if not shared:
            raise BondError(f"no shared ids between spaces for modality {tag!r}")


def _train_ensemble(
    sampler: PairSampler,
    loss_kind: str,
    d_in: int,
    d_out: int,
    cfg: TrainConfig,
    seed: int,
    subsets: tuple[str, ...],
) -> tuple[ProjectorEnsemble, dict[str, tuple[float, ...]]]:
    projectors = []
    losses = {}
    for si, name in enumerate(subsets):
        sub_seed = int(
            np.random.SeedSequence([seed, _SUBSET_STREAM, si]).generate_state(1)[0]
        )
        result = train_projector(
            sampler.subset_stream(name),
            loss_kind,
            d_in,
            d_out,
            TrainConfig(
                lr=cfg.lr,
                epochs=cfg.epochs,
                batch_size=cfg.batch_size,
                tau_infonce=cfg.tau_infonce,
                hidden=cfg.hidden,
                beta1=cfg.beta1,
                beta2=cfg.beta2,
                adam_eps=cfg.adam_eps,
                seed=sub_seed,
            ),
        )
        projectors.append(result.projector)
        losses[name] = result.epoch_losses
    return ProjectorEnsemble(tags=tuple(subsets), projectors=tuple(projectors)), losses


def train_displacement_bond(
    unified: SpaceBundle,
    expert: SpaceBundle,
    train_indices,
    cfg: TrainConfig,
    temperature: float = 0.01,
    seed: int = 0,
    pool_size: int | None = None,
    anchors: tuple[str, ...] | None = None,
    subsets: tuple[str, ...] = SUBSET_NAMES,
) -> BondArtifact:
    """Train the unified->expert projector mixture for an image-text expert."""
    _check_shared_ids(unified, expert)
    sampler = PairSampler(
        unified, expert, "image_text_bond", train_indices,
        batch_size=cfg.batch_size, temperature=temperature, seed=seed,
        pool_size=pool_size, anchors=anchors,
    )
    ensemble, losses = _train_ensemble(
        sampler, "displacement", unified.dim, expert.dim, cfg, seed, subsets
    )
    return BondArtifact(
        kind="displacement",
        source_space=unified.name,
        target_space=expert.name,
        ensemble=ensemble,
        epoch_losses=losses,
    )


def train_combination_bond(
    unified: SpaceBundle,
    expert: SpaceBundle,
    train_indices,
    cfg: TrainConfig,
    temperature: float = 0.01,
    seed: int = 0,
    pool_size: int | None = None,
    anchors: tuple[str, ...] | None = None,
    subsets: tuple[str, ...] = SUBSET_NAMES,
) -> BondArtifact:
    """Train the expert->unified projector mixture for an audio-text expert."""
    _check_shared_ids(unified, expert)
    sampler = PairSampler(
        unified, expert, "audio_text_bond", train_indices,
        batch_size=cfg.batch_size, temperature=temperature, seed=seed,
        pool_size=pool_size, anchors=anchors,
    )
    ensemble, losses = _train_ensemble(
        sampler, "combination", expert.dim, unified.dim, cfg, seed, subsets
    )
    return BondArtifact(
        kind="combination",
        source_space=expert.name,
        target_space=unified.name,
        ensemble=ensemble,
        epoch_losses=losses,
    )


def displaced_bundle(
    unified: SpaceBundle, expert: SpaceBundle, artifact: BondArtifact
) -> SpaceBundle:
    """The displacement product as a plain space, at full expert weight.

    Image and text channels are the raw expert matrices; audio is the
    unified audio projected through the bond's ensemble.  This is the
    frozen space that parallel combination bonds train against.
    """
    if artifact.kind != "displacement":
        raise BondError("displaced_bundle needs a displacement artifact")
    audio = unified.matrix("audio")
    projected = artifact.ensemble.apply(audio.data)
    return SpaceBundle(
        name=f"{unified.name}+d({expert.name})",
        dim=expert.dim,
        modalities={
            "audio": EmbeddingMatrix(ids=audio.ids, data=projected),
            "image": expert.matrix("image"),
            "text": expert.matrix("text"),
        },
    )


@dataclass(frozen=True)
class SequentialParallelProduct:
    """Stage-1 displacement plus parallel stage-2 combinations.

    ``displaced`` is the frozen stage-1 space every combination bond was
    trained against.  ``unrepaired_audio`` flags that the displaced audio
    channel is a remapped version of the unified one with no further
    encoder tuning to repair it.
    """

    displacement: BondArtifact
    displaced: SpaceBundle
    combinations: tuple[BondArtifact, ...]
    unrepaired_audio: bool = True


def compose_sequential_parallel(
    unified: SpaceBundle,
    vt_expert: SpaceBundle,
    at_experts,
    train_indices,
    displacement_cfg: TrainConfig,
    combination_cfg: TrainConfig,
    temperature: float = 0.01,
    seed: int = 0,
    pool_size: int | None = None,
) -> SequentialParallelProduct:
    """Two-stage composition: displace into the image-text expert, then
    combine each audio-text expert against the frozen displaced space."""
    displacement = train_displacement_bond(
        unified, vt_expert, train_indices, displacement_cfg,
        temperature=temperature, seed=seed, pool_size=pool_size,
    )
    frozen = displaced_bundle(unified, vt_expert, displacement)
    combinations = []
    for i, at_expert in enumerate(at_experts):
        combinations.append(
            train_combination_bond(
                frozen, at_expert, train_indices, combination_cfg,
                temperature=temperature, seed=seed + 1 + i, pool_size=pool_size,
            )
        )
    return SequentialParallelProduct(
        displacement=displacement,
        displaced=frozen,
        combinations=tuple(combinations),
    )


def save_bond_artifact(artifact: BondArtifact, path) -> None:
    """Artifact directory: manifest plus one checkpoint per subset projector."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {}
    for tag, projector in zip(artifact.ensemble.tags, artifact.ensemble.projectors):
        fname = f"psi_{tag}.prj"
        save_projector(projector, path / fname)
        files[tag] = fname
    manifest = {
        "kind": artifact.kind,
        "source_space": artifact.source_space,
        "target_space": artifact.target_space,
        "d_in": artifact.ensemble.d_in,
        "d_out": artifact.ensemble.d_out,
        "subsets": list(artifact.ensemble.tags),
        "projectors": files,
        "epoch_losses": {k: list(v) for k, v in artifact.epoch_losses.items()},
    }
    with open(path / BOND_MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_bond_artifact(path) -> BondArtifact:
    path = Path(path)
    try:
        with open(path / BOND_MANIFEST, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise BondError(f"{path}: missing bond artifact manifest") from None
    tags = tuple(manifest.get("subsets") or manifest["projectors"].keys())
    projectors = tuple(
        load_projector(path / manifest["projectors"][tag]) for tag in tags
    )
    return BondArtifact(
        kind=manifest["kind"],
        source_space=manifest["source_space"],
        target_space=manifest["target_space"],
        ensemble=ProjectorEnsemble(tags=tags, projectors=projectors),
        epoch_losses={
            k: tuple(v) for k, v in manifest["epoch_losses"].items()
        },
    )
