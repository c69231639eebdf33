"""Fused inference over a composite space.

After bonding, one modality can have several representations: the raw or
remapped unified channel, an image-text expert channel, and any number of
projected audio-text expert channels.  Encoding weights each normalized
channel by the combining factors, averages, and renormalizes.  The factor
algebra for a composite with n selected audio-text experts is

    audio:  (1 - sigma_a) * base  +  sigma_a / n * sum(expert_i)
    text:   (1 - sigma_t) * [(1 - lambda_t) * base + lambda_t * vt]
            + sigma_t / n * sum(expert_i)
    image:  (1 - lambda_v) * base + lambda_v * vt

with the lambda terms dropping out when no image-text expert channel is
present.  Since all rankings are cosine based, a modality with a single
active channel shortcuts to that channel's normalized output exactly, so
all-zero factors reproduce the base space bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

from spacebond.evaluation import DEFAULT_KS, retrieval_report
from spacebond.store import EmbeddingMatrix, SpaceBundle, ensure_unit_rows

MODALITY_ORDER = ("audio", "image", "text")

# Named factor settings: sigma pairs trading audio-text strength against
# the rest, and the default displacement weights.
PRESET_SIGMAS = {
    "versatile": (0.5, 0.1),
    "at-expertise": (0.8, 0.5),
}
DEFAULT_LAMBDAS = (0.9, 0.9)


class FuseError(ValueError):
    pass


@dataclass(frozen=True)
class CombiningFactors:
    """Mixing weights in [0, 1] plus an optional expert selection mask."""

    lambda_v: float = 0.0
    lambda_t: float = 0.0
    sigma_a: float = 0.0
    sigma_t: float = 0.0
    selection: tuple[bool, ...] | None = None

    def __post_init__(self):
        for name in ("lambda_v", "lambda_t", "sigma_a", "sigma_t"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise FuseError(f"{name}={value} outside [0, 1]")


def preset_factors(name: str, lambdas: tuple[float, float] = DEFAULT_LAMBDAS) -> CombiningFactors:
    if name not in PRESET_SIGMAS:
        raise FuseError(f"unknown preset {name!r}, have {sorted(PRESET_SIGMAS)}")
    sigma_a, sigma_t = PRESET_SIGMAS[name]
    return CombiningFactors(
        lambda_v=lambdas[0], lambda_t=lambdas[1], sigma_a=sigma_a, sigma_t=sigma_t
    )


class ChannelProducer(Protocol):
    def produce(self, inputs: dict[str, np.ndarray]) -> np.ndarray: ...


@dataclass(frozen=True)
class RawChannel:
    """Pass a source space's rows through unchanged."""

    source: str

    def produce(self, inputs: dict[str, np.ndarray]) -> np.ndarray:
        try:
            return inputs[self.source]
        except KeyError:
            raise FuseError(f"missing channel input for source {self.source!r}") from None


@dataclass(frozen=True)
class ProjectedChannel:
    """Map a source space's rows through a bond's projector ensemble."""

    source: str
    ensemble: object  # ProjectorEnsemble; duck-typed to keep modules decoupled

    def produce(self, inputs: dict[str, np.ndarray]) -> np.ndarray:
        try:
            x = inputs[self.source]
        except KeyError:
            raise FuseError(f"missing channel input for source {self.source!r}") from None
        return self.ensemble.apply(x)


@dataclass(frozen=True)
class Channel:
    role: str  # "base" | "vt" | "at"
    name: str
    producer: ChannelProducer


@dataclass(frozen=True)
class CompositeSpace:
    """Per-modality weighted channel lists over one or more source spaces."""

    name: str
    dim: int
    channels: dict[str, tuple[Channel, ...]]
    at_names: tuple[str, ...] = ()
    has_vt: bool = False
    unrepaired_audio: bool = False

    def __post_init__(self):
        for modality in MODALITY_ORDER:
            if modality not in self.channels:
                raise FuseError(f"composite is missing the {modality!r} modality")
            roles = [c.role for c in self.channels[modality]]
            if roles.count("base") != 1 or roles[0] != "base":
                raise FuseError(f"{modality}: exactly one leading base channel required")


def composite_from_bundle(bundle: SpaceBundle) -> CompositeSpace:
    """A composite with only the raw space; encoding it is the identity."""
    return CompositeSpace(
        name=bundle.name,
        dim=bundle.dim,
        channels={
            m: (Channel("base", bundle.name, RawChannel(bundle.name)),)
            for m in MODALITY_ORDER
        },
    )


def build_composite(
    unified_name: str,
    dim: int,
    displacement=None,
    vt_name: str | None = None,
    combinations: tuple[tuple[str, object], ...] = (),
    name: str | None = None,
) -> CompositeSpace:
    """Assemble the channel lists for any bond product.

    ``displacement`` is the unified->expert ensemble (or None for a
    combination-only product); ``combinations`` holds (expert name,
    expert->unified ensemble) pairs in selection order.
    """
    if (displacement is None) != (vt_name is None):
        raise FuseError("displacement ensemble and vt_name go together")
    if displacement is not None:
        base: ChannelProducer = ProjectedChannel(unified_name, displacement)
    else:
        base = RawChannel(unified_name)
    channels: dict[str, list[Channel]] = {
        m: [Channel("base", unified_name, base)] for m in MODALITY_ORDER
    }
    if vt_name is not None:
        channels["image"].append(Channel("vt", vt_name, RawChannel(vt_name)))
        channels["text"].append(Channel("vt", vt_name, RawChannel(vt_name)))
    at_names = []
    for at_name, ensemble in combinations:
        at_names.append(at_name)
        channels["audio"].append(Channel("at", at_name, ProjectedChannel(at_name, ensemble)))
        channels["text"].append(Channel("at", at_name, ProjectedChannel(at_name, ensemble)))
    label = name or unified_name
    return CompositeSpace(
        name=label,
        dim=dim,
        channels={m: tuple(chs) for m, chs in channels.items()},
        at_names=tuple(at_names),
        has_vt=vt_name is not None,
        unrepaired_audio=displacement is not None,
    )


def select_modules(space: CompositeSpace, mask) -> CompositeSpace:
    """Drop deselected audio-text experts; weights re-expand over the rest."""
    mask = tuple(bool(m) for m in mask)
    if len(mask) != len(space.at_names):
        raise FuseError(
            f"mask length {len(mask)} != expert count {len(space.at_names)}"
        )
    keep = {name for name, m in zip(space.at_names, mask) if m}
    channels = {
        modality: tuple(
            c for c in chs if c.role != "at" or c.name in keep
        )
        for modality, chs in space.channels.items()
    }
    return CompositeSpace(
        name=space.name,
        dim=space.dim,
        channels=channels,
        at_names=tuple(n for n in space.at_names if n in keep),
        has_vt=space.has_vt,
        unrepaired_audio=space.unrepaired_audio,
    )


def expand_factors(
    factors: CombiningFactors, n_selected: int, has_vt: bool = True
) -> dict[str, list[float]]:
    """Flatten the factor algebra into per-modality weight lists.

    Order matches the channel lists: base first, then the image-text
    expert where present, then each selected audio-text expert.  Every
    list is nonnegative and sums to 1.
    """
    if n_selected < 0:
        raise FuseError("n_selected must be nonnegative")
    if n_selected == 0 and (factors.sigma_a > 0 or factors.sigma_t > 0):
        raise FuseError("no expert selected but sigma weights are positive")
    lv, lt = factors.lambda_v, factors.lambda_t
    sa, st = factors.sigma_a, factors.sigma_t
    at_a = [sa / n_selected] * n_selected if n_selected else []
    at_t = [st / n_selected] * n_selected if n_selected else []
    if has_vt:
        weights = {
            "audio": [1.0 - sa] + at_a,
            "image": [1.0 - lv, lv],
            "text": [(1.0 - st) * (1.0 - lt), (1.0 - st) * lt] + at_t,
        }
    else:
        weights = {
            "audio": [1.0 - sa] + at_a,
            "image": [1.0],
            "text": [1.0 - st] + at_t,
        }
    return weights


def _apply_selection(space: CompositeSpace, factors: CombiningFactors) -> CompositeSpace:
    if factors.selection is None:
        return space
    return select_modules(space, factors.selection)


def encode(
    space: CompositeSpace,
    modality: str,
    inputs: dict[str, np.ndarray],
    factors: CombiningFactors,
    renormalize: bool = True,
    normalize_channels: bool = True,
) -> np.ndarray:
    """Fuse one modality's channels into final embedding rows.

    Each active channel's output is brought to unit row norm, the weighted
    sum is taken with the expanded factors, and the result is renormalized
    (both normalizations can be disabled for fidelity experiments; cosine
    rankings do not depend on them).  Channels with zero weight are never
    computed, and a single full-weight channel is returned exactly.
    """
    space = _apply_selection(space, factors)
    if modality not in space.channels:
        raise FuseError(f"unknown modality {modality!r}")
    chans = space.channels[modality]
    weights = expand_factors(factors, len(space.at_names), space.has_vt)[modality]
    if len(weights) != len(chans):
        raise FuseError(
            f"{modality}: {len(weights)} weights for {len(chans)} channels"
        )
    active = [(w, c) for w, c in zip(weights, chans) if w > 0.0]
    if not active:
        raise FuseError(f"{modality}: all channel weights are zero")

    def channel_rows(c: Channel) -> np.ndarray:
        rows = c.producer.produce(inputs)
        return ensure_unit_rows(rows) if normalize_channels else rows

    if len(active) == 1 and active[0][0] == 1.0:
        return channel_rows(active[0][1])
    first_rows = channel_rows(active[0][1])
    acc = np.zeros(first_rows.shape, dtype=np.float64)
    acc += active[0][0] * first_rows
    for w, c in active[1:]:
        rows = channel_rows(c)
        if rows.shape != first_rows.shape:
            raise FuseError(
                f"{modality}: channel {c.name!r} shape {rows.shape} "
                f"!= {first_rows.shape}"
            )
        acc += w * rows
    fused = acc.astype(np.float32)
    return ensure_unit_rows(fused) if renormalize else fused


def composite_inputs(
    bundles: dict[str, SpaceBundle], indices=None
) -> tuple[dict[str, dict[str, np.ndarray]], dict[str, tuple[str, ...]]]:
    """Per-modality inputs for :func:`encode`, drawn from source bundles.

    Returns ``({modality: {source_name: rows}}, {modality: ids})``
    restricted to ``indices`` (all rows when None).  All bundles must list
    the same ids in the same order for the selected rows.
    """
    out: dict[str, dict[str, np.ndarray]] = {m: {} for m in MODALITY_ORDER}
    reference_ids: dict[str, tuple[str, ...]] = {}
    for name, bundle in bundles.items():
        for modality in bundle.tags:
            matrix = bundle.matrix(modality)
            if indices is not None:
                matrix = matrix.take(indices)
            if modality in reference_ids:
                if matrix.ids != reference_ids[modality]:
                    raise FuseError(
                        f"{name}/{modality}: ids disagree with other sources"
                    )
            else:
                reference_ids[modality] = matrix.ids
            out[modality][name] = matrix.data
    return out, reference_ids


def fused_matrices(
    space: CompositeSpace,
    inputs: dict[str, dict[str, np.ndarray]],
    factors: CombiningFactors,
    ids_by_modality: dict[str, tuple[str, ...]],
) -> dict[str, EmbeddingMatrix]:
    return {
        modality: EmbeddingMatrix(
            ids=ids_by_modality[modality],
            data=encode(space, modality, inputs[modality], factors),
        )
        for modality in MODALITY_ORDER
    }


def evaluate_composite(
    space: CompositeSpace,
    inputs: dict[str, dict[str, np.ndarray]],
    factors: CombiningFactors,
    ids_by_modality: dict[str, tuple[str, ...]],
    ks=DEFAULT_KS,
) -> dict:
    """Encode the task embeddings and produce the retrieval report."""
    mats = fused_matrices(space, inputs, factors, ids_by_modality)
    return retrieval_report(mats, ks=ks)


def factor_sweep(
    space: CompositeSpace,
    inputs: dict[str, dict[str, np.ndarray]],
    ids_by_modality: dict[str, tuple[str, ...]],
    grid: tuple[tuple[float, float], ...],
    base_factors: CombiningFactors = CombiningFactors(),
    ks=DEFAULT_KS,
) -> list[dict]:
    """Evaluate a (sigma_a, sigma_t) grid against the sigma=0 baseline.

    Each row reports delta_at, delta_av, delta_tv: the change of the
    pair-mean R@1 (in points, x100) relative to the baseline where both
    sigma factors are zero and the lambda factors keep their base values.
    """
    if not grid:
        raise FuseError("empty sweep grid")
    for sa, st in grid:
        if not (0.0 <= sa <= 1.0 and 0.0 <= st <= 1.0):
            raise FuseError(f"grid point ({sa}, {st}) outside [0, 1]")
    baseline_factors = replace(base_factors, sigma_a=0.0, sigma_t=0.0)
    baseline = evaluate_composite(space, inputs, baseline_factors, ids_by_modality, ks)
    rows = []
    pair_keys = {"delta_at": "audio_text", "delta_av": "audio_image", "delta_tv": "image_text"}
    for sa, st in grid:
        factors = replace(base_factors, sigma_a=sa, sigma_t=st)
        report = evaluate_composite(space, inputs, factors, ids_by_modality, ks)
        row = {"sigma_a": sa, "sigma_t": st}
        for column, pair in pair_keys.items():
            row[column] = 100.0 * (report["pairs"][pair] - baseline["pairs"][pair])
        rows.append(row)
    return rows
