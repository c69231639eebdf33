"""Pseudo multimodal pair collection via softmax-weighted aggregation.

Two spaces sharing item ids get bonded through pseudo pairs: starting
from an anchor modality's raw rows, each aggregation step retrieves a
soft nearest-neighbor mixture of a candidate pool in some other modality.
Where a step's weights are reused across spaces (the pool rows describe
the same items in both), the aggregated rows inherit the cross-space
correspondence even for modalities the expert space lacks.

Batches are recomputed on the fly from seeds, so an epoch of pseudo pairs
costs O(batch * dim) memory.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from spacebond import kernels
from spacebond.store import EmbeddingMatrix, SpaceBundle, as_array, ensure_unit_rows

BOND_KINDS = ("image_text_bond", "audio_text_bond")

# Anchor modality -> subset letter, matching the seven-subset family
# T, V, A, TV, TA, VA, TVA used by the projector mixture.
ANCHOR_LETTER = {"text": "T", "image": "V", "audio": "A"}
SUBSET_NAMES = ("T", "V", "A", "TV", "TA", "VA", "TVA")

_SHUFFLE_STREAM = 0
_POOL_STREAM = 1


class PairCollectionError(ValueError):
    pass


def soft_weights(query, keys, temperature: float) -> np.ndarray:
    """Softmax over cosine similarities of each query row against the keys.

    ``temperature`` divides the similarities; ``inf`` is accepted as the
    uniform-weight limit.  Rows sum to 1 and are nonnegative.
    """
    if temperature <= 0:
        raise PairCollectionError("temperature must be positive")
    q = ensure_unit_rows(np.ascontiguousarray(as_array(query)))
    k = ensure_unit_rows(np.ascontiguousarray(as_array(keys)))
    if q.shape[1] != k.shape[1]:
        raise PairCollectionError(
            f"query d={q.shape[1]} vs keys d={k.shape[1]}"
        )
    sims = np.ascontiguousarray(q @ k.T)
    scale = 0.0 if np.isinf(temperature) else 1.0 / temperature
    return kernels.softmax_rows(sims, scale)


def soft_aggregate(query, keys, values, temperature: float) -> np.ndarray:
    """Replace each query row with a convex combination of value rows.

    Weights come from :func:`soft_weights` on (query, keys); keys and
    values must therefore index the same items.
    """
    k, v = as_array(keys), as_array(values)
    if k.shape[0] != v.shape[0]:
        raise PairCollectionError(
            f"keys have {k.shape[0]} rows, values {v.shape[0]}"
        )
    w = soft_weights(query, k, temperature)
    return w @ v


# A source names one raw matrix: ("unified" | "expert", modality tag).
Source = tuple[str, str]


@dataclass(frozen=True)
class ChainStep:
    """One aggregation: weights from (query, key), applied to each output's pool.

    ``query`` names a tilde matrix produced earlier in the chain (or copied
    raw from the anchor); ``key`` names the raw pool matrix the weights are
    computed against; every entry of ``outputs`` receives those same
    weights applied to its own space's pool rows.
    """

    query: Source
    key: Source
    outputs: tuple[Source, ...]


@dataclass(frozen=True)
class AggregationChain:
    """The full recipe producing one pseudo-pair batch from one anchor."""

    bond_kind: str
    anchor: str
    raw: tuple[Source, ...]
    steps: tuple[ChainStep, ...]

    def __post_init__(self):
        produced = set(self.raw)
        for i, step in enumerate(self.steps):
            if i == 0 and step.query not in self.raw:
                raise PairCollectionError("first step's query must be a raw anchor")
            if step.query not in produced:
                raise PairCollectionError(
                    f"step {i} queries {step.query} before it is produced"
                )
            produced.update(step.outputs)

    @property
    def symbols(self) -> tuple[Source, ...]:
        out = list(self.raw)
        for step in self.steps:
            out.extend(step.outputs)
        return tuple(out)


def build_chain_templates(bond_kind: str) -> tuple[AggregationChain, ...]:
    """The three per-anchor aggregation chains of a bond.

    For the image-text bond the expert supplies image and text; audio is
    reached only inside the unified space, and the audio-anchored chain
    reuses its unified-space weights on the expert pools.  The audio-text
    bond mirrors this with image as the non-shared modality, and its
    text- and audio-anchored chains reuse expert-space weights on unified
    pools so the tight expert alignment drives the pairing.
    """
    U, E = "unified", "expert"
    if bond_kind == "image_text_bond":
        return (
            AggregationChain(
                bond_kind, "text",
                raw=((E, "text"), (U, "text")),
                steps=(
                    ChainStep((E, "text"), (E, "image"), ((E, "image"),)),
                    ChainStep((U, "text"), (U, "image"), ((U, "image"),)),
                    ChainStep((U, "image"), (U, "audio"), ((U, "audio"),)),
                ),
            ),
            AggregationChain(
                bond_kind, "image",
                raw=((E, "image"), (U, "image")),
                steps=(
                    ChainStep((E, "image"), (E, "text"), ((E, "text"),)),
                    ChainStep((U, "image"), (U, "text"), ((U, "text"),)),
                    ChainStep((U, "image"), (U, "audio"), ((U, "audio"),)),
                ),
            ),
            AggregationChain(
                bond_kind, "audio",
                raw=((U, "audio"),),
                steps=(
                    ChainStep((U, "audio"), (U, "image"), ((U, "image"), (E, "image"))),
                    ChainStep((U, "image"), (U, "text"), ((U, "text"), (E, "text"))),
                ),
            ),
        )
    if bond_kind == "audio_text_bond":
        return (
            AggregationChain(
                bond_kind, "text",
                raw=((E, "text"), (U, "text")),
                steps=(
                    ChainStep((E, "text"), (E, "audio"), ((E, "audio"), (U, "audio"))),
                    ChainStep((U, "text"), (U, "image"), ((U, "image"),)),
                ),
            ),
            AggregationChain(
                bond_kind, "audio",
                raw=((E, "audio"), (U, "audio")),
                steps=(
                    ChainStep((E, "audio"), (E, "text"), ((E, "text"), (U, "text"))),
                    ChainStep((U, "audio"), (U, "image"), ((U, "image"),)),
                ),
            ),
            AggregationChain(
                bond_kind, "image",
                raw=((U, "image"),),
                steps=(
                    ChainStep((U, "image"), (U, "text"), ((U, "text"), (E, "text"))),
                    ChainStep((U, "image"), (U, "audio"), ((U, "audio"), (E, "audio"))),
                ),
            ),
        )
    raise PairCollectionError(f"unknown bond_kind {bond_kind!r}")


@dataclass(frozen=True)
class PseudoPairBatch:
    """One batch of aggregated embeddings spanning both bonded spaces.

    Row i across all matrices is one pseudo multimodal pair.  Aggregated
    rows are convex combinations of their pool rows; raw rows are copies
    of the anchor items' embeddings.
    """

    anchor: str
    matrices: dict[Source, np.ndarray]

    def __post_init__(self):
        sizes = {m.shape[0] for m in self.matrices.values()}
        if len(sizes) != 1:
            raise PairCollectionError(f"inconsistent batch sizes {sizes}")

    @property
    def size(self) -> int:
        return next(iter(self.matrices.values())).shape[0]


def _expert_rows(
    unified_m: EmbeddingMatrix, expert_m: EmbeddingMatrix, indices: np.ndarray
) -> np.ndarray:
    """Map unified-order row indices to the expert matrix via id equality."""
    positions = expert_m.id_positions()
    out = np.empty(len(indices), dtype=np.intp)
    for j, i in enumerate(indices):
        item = unified_m.ids[i]
        pos = positions.get(item)
        if pos is None:
            raise PairCollectionError(
                f"id misalignment: {item!r} missing from expert space"
            )
        out[j] = pos
    return out


def collect_batch(
    chain: AggregationChain,
    unified: SpaceBundle,
    expert: SpaceBundle,
    anchor_rows: np.ndarray,
    pools: dict[str, np.ndarray],
    temperature: float,
) -> PseudoPairBatch:
    """Execute one chain batch-locally and return the tilde matrices.

    ``anchor_rows`` and the per-modality ``pools`` index rows of the
    unified space; expert rows are resolved through id equality so the
    same items back every space's pool.  Pools need at least 2 candidates.
    """
    spaces = {"unified": unified, "expert": expert}
    for tag, pool in pools.items():
        if len(pool) < 2:
            raise PairCollectionError(f"pool for {tag!r} smaller than 2")

    def rows(source: Source, indices: np.ndarray) -> np.ndarray:
        space_tag, modality = source
        unified_m = unified.matrix(modality)
        if space_tag == "unified":
            return unified_m.data[indices]
        expert_m = expert.matrix(modality)
        return expert_m.data[_expert_rows(unified_m, expert_m, indices)]

    tilde: dict[Source, np.ndarray] = {}
    for source in chain.raw:
        tilde[source] = rows(source, np.asarray(anchor_rows)).copy()
    for step in chain.steps:
        pool = np.asarray(pools[step.key[1]])
        keys = rows(step.key, pool)
        weights = soft_weights(tilde[step.query], keys, temperature)
        for out in step.outputs:
            values = rows(out, pool)
            tilde[out] = weights @ values
    return PseudoPairBatch(anchor=chain.anchor, matrices=tilde)


class SubsetStream:
    """Deterministic per-epoch batch stream for one training subset."""

    def __init__(self, sampler: "PairSampler", name: str):
        if name not in SUBSET_NAMES:
            raise PairCollectionError(f"unknown subset {name!r}")
        self.name = name
        self._sampler = sampler

    def epoch_batches(self, epoch: int) -> Iterator[PseudoPairBatch]:
        return self._sampler._subset_epoch(self.name, epoch)

    def batches_per_epoch(self) -> int:
        return len(self.name) * self._sampler.batches_per_anchor


class PairSampler:
    """Samples seeded pseudo-pair batches for every subset of one bond.

    Anchors are drawn without replacement per epoch; the default candidate
    pool of a batch is the batch itself (``pool_size == batch_size``), and
    larger pools are padded with extra distinct items from the training
    pool.  Everything is a pure function of the constructor arguments, so
    batches regenerate identically for a fixed seed.
    """

    def __init__(
        self,
        unified: SpaceBundle,
        expert: SpaceBundle,
        bond_kind: str,
        train_indices,
        batch_size: int,
        temperature: float,
        seed: int,
        pool_size: int | None = None,
        anchors: tuple[str, ...] | None = None,
    ):
        chains = build_chain_templates(bond_kind)
        if anchors is not None:
            chains = tuple(c for c in chains if c.anchor in anchors)
            if not chains:
                raise PairCollectionError("anchor filter left no chains")
        self.unified = unified
        self.expert = expert
        self.bond_kind = bond_kind
        self.chains = {c.anchor: c for c in chains}
        self.train_indices = np.asarray(train_indices, dtype=np.intp)
        self.batch_size = int(batch_size)
        self.pool_size = int(pool_size) if pool_size is not None else self.batch_size
        self.temperature = float(temperature)
        self.seed = int(seed)
        if self.batch_size < 2:
            raise PairCollectionError("batch_size must be at least 2")
        if self.pool_size < self.batch_size:
            raise PairCollectionError("pool_size must be >= batch_size")
        if self.pool_size > len(self.train_indices):
            raise PairCollectionError("pool_size exceeds training pool")
        self.batches_per_anchor = len(self.train_indices) // self.batch_size
        if self.batches_per_anchor == 0:
            raise PairCollectionError("training pool smaller than one batch")

    def _anchor_code(self, anchor: str) -> int:
        return ("text", "image", "audio").index(anchor)

    def _anchor_batches(self, anchor: str, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng(
            np.random.SeedSequence(
                [self.seed, _SHUFFLE_STREAM, self._anchor_code(anchor), epoch]
            )
        )
        perm = rng.permutation(self.train_indices)
        n_used = self.batches_per_anchor * self.batch_size
        return np.split(perm[:n_used], self.batches_per_anchor)

    def _batch_pools(
        self, anchor: str, epoch: int, index: int, batch: np.ndarray
    ) -> dict[str, np.ndarray]:
        if self.pool_size == self.batch_size:
            pool = batch
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence(
                    [self.seed, _POOL_STREAM, self._anchor_code(anchor), epoch, index]
                )
            )
            remainder = np.setdiff1d(self.train_indices, batch, assume_unique=False)
            extra = rng.choice(
                remainder, size=self.pool_size - self.batch_size, replace=False
            )
            pool = np.concatenate([batch, extra])
        return {tag: pool for tag in ("audio", "image", "text")}

    def collect(self, anchor: str, epoch: int, index: int) -> PseudoPairBatch:
        batch = self._anchor_batches(anchor, epoch)[index]
        pools = self._batch_pools(anchor, epoch, index, batch)
        return collect_batch(
            self.chains[anchor], self.unified, self.expert, batch, pools,
            self.temperature,
        )

    def _subset_epoch(self, name: str, epoch: int) -> Iterator[PseudoPairBatch]:
        anchors = [
            a for a, code in ANCHOR_LETTER.items()
            if code in name and a in self.chains
        ]
        if not anchors:
            raise PairCollectionError(
                f"subset {name!r} has no anchors under the configured filter"
            )
        plan = [
            (anchor, index)
            for anchor in sorted(anchors, key=self._anchor_code)
            for index in range(self.batches_per_anchor)
        ]
        rng = np.random.default_rng(
            np.random.SeedSequence(
                [self.seed, _SHUFFLE_STREAM, 100 + SUBSET_NAMES.index(name), epoch]
            )
        )
        for i in rng.permutation(len(plan)):
            anchor, index = plan[i]
            yield self.collect(anchor, epoch, index)

    def subset_stream(self, name: str) -> SubsetStream:
        return SubsetStream(self, name)


def build_subset_family(sampler: PairSampler) -> dict[str, SubsetStream]:
    """All seven training subsets of the projector mixture."""
    return {name: sampler.subset_stream(name) for name in SUBSET_NAMES}
