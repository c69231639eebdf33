"""Embedding matrices, space bundles, and their on-disk format.

Every space handled by this package is a :class:`SpaceBundle`: a named
collection of per-modality :class:`EmbeddingMatrix` objects sharing one
dimensionality.  Matrices serialize to a small binary format (magic
``EMB1``) and bundles to a directory with a JSON manifest.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
FORMAT_VERSION = 1
MODALITIES = ("audio", "image", "text")

# Rows whose L2 norm is already this close to 1 are left untouched by
# ensure_unit_rows, which keeps repeated normalization bitwise stable.
UNIT_TOL = 1e-5

MANIFEST_NAME = "manifest.json"


class StoreError(ValueError):
    """Malformed embedding file, manifest, or invalid matrix contents."""


def as_array(x) -> np.ndarray:
    """Accept either an EmbeddingMatrix or a bare array."""
    return x.data if isinstance(x, EmbeddingMatrix) else np.asarray(x)


def ensure_unit_rows(data: np.ndarray, tol: float = UNIT_TOL) -> np.ndarray:
    """Return ``data`` with every row at unit L2 norm.

    Rows already within ``tol`` of unit norm are returned bit-for-bit
    unchanged, so applying this twice equals applying it once.  Zero rows
    raise because they have no direction.
    """
    data = np.asarray(data)
    norms = np.sqrt(np.einsum("ij,ij->i", data, data, dtype=np.float64))
    if not np.all(np.isfinite(norms)):
        raise StoreError("non-finite values in embedding rows")
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise StoreError(f"zero row at index {int(zero[0])}")
    off = np.abs(norms - 1.0) > tol
    if not off.any():
        return data
    out = data.copy()
    out[off] = (data[off].astype(np.float64) / norms[off, None]).astype(data.dtype)
    return out


@dataclass(frozen=True)
class EmbeddingMatrix:
    """An n x d matrix of float32 row embeddings with item identifiers."""

    ids: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise StoreError(f"embedding data must be 2-D, got shape {data.shape}")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != data.shape[0]:
            raise StoreError(
                f"{len(ids)} ids for {data.shape[0]} rows"
            )
        if len(set(ids)) != len(ids):
            seen = set()
            for pos, item in enumerate(ids):
                if item in seen:
                    raise StoreError(f"duplicate id {item!r} at row {pos}")
                seen.add(item)
        bad = ~np.isfinite(data)
        if bad.any():
            row = int(np.flatnonzero(bad.any(axis=1))[0])
            raise StoreError(f"non-finite value at row {row}")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def take(self, indices) -> "EmbeddingMatrix":
        """Sub-matrix of the given row indices, ids carried along."""
        indices = np.asarray(indices)
        return EmbeddingMatrix(
            ids=tuple(self.ids[i] for i in indices),
            data=self.data[indices],
        )

    def id_positions(self) -> dict[str, int]:
        return {item: i for i, item in enumerate(self.ids)}


def normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Divide each row by its L2 norm; zero rows are an error."""
    norms = np.sqrt(np.einsum("ij,ij->i", m.data, m.data, dtype=np.float64))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise StoreError(f"zero row at index {int(zero[0])}")
    data = (m.data.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(ids=m.ids, data=data)


def cosine_similarity(q, k) -> np.ndarray:
    """Pairwise cosine similarity between rows of ``q`` and rows of ``k``.

    Both inputs are brought to unit row norm first, so the result is the
    plain inner-product matrix, clipped into [-1, 1].
    """
    qa, ka = as_array(q), as_array(k)
    if qa.shape[1] != ka.shape[1]:
        raise StoreError(
            f"dimension mismatch: {qa.shape[1]} vs {ka.shape[1]}"
        )
    qa = ensure_unit_rows(qa)
    ka = ensure_unit_rows(ka)
    sims = qa @ ka.T
    return np.clip(sims, -1.0, 1.0, out=sims)


@dataclass(frozen=True)
class SpaceBundle:
    """A named embedding space: one matrix per modality, one dimensionality."""

    name: str
    dim: int
    modalities: dict[str, EmbeddingMatrix] = field(default_factory=dict)

    def __post_init__(self):
        if not self.modalities:
            raise StoreError("space has no modalities")
        for tag, matrix in self.modalities.items():
            if tag not in MODALITIES:
                raise StoreError(f"unknown modality tag {tag!r}")
            if matrix.d != self.dim:
                raise StoreError(
                    f"{self.name}/{tag}: dimension mismatch, "
                    f"matrix has d={matrix.d}, space dim={self.dim}"
                )

    def matrix(self, tag: str) -> EmbeddingMatrix:
        try:
            return self.modalities[tag]
        except KeyError:
            raise StoreError(f"space {self.name!r} has no {tag!r} modality") from None

    @property
    def tags(self) -> tuple[str, ...]:
        return tuple(t for t in MODALITIES if t in self.modalities)


def write_embedding_file(m: EmbeddingMatrix, path) -> None:
    """Write one matrix: EMB1 header, little-endian f32 payload, id lines."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, m.n, m.d))
        f.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
        for item in m.ids:
            f.write(item.encode("utf-8"))
            f.write(b"\n")


def read_embedding_file(path) -> EmbeddingMatrix:
    """Read a matrix written by :func:`write_embedding_file`, bit-exact."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise StoreError(f"{path}: malformed header (bad magic)")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != FORMAT_VERSION:
        raise StoreError(f"{path}: unsupported format version {version}")
    payload_end = 16 + n * d * 4
    if len(raw) < payload_end:
        raise StoreError(f"{path}: payload size mismatch (file truncated)")
    data = np.frombuffer(raw[16:payload_end], dtype="<f4").reshape(n, d).copy()
    id_block = raw[payload_end:]
    try:
        text = id_block.decode("utf-8")
    except UnicodeDecodeError:
        raise StoreError(
            f"{path}: payload size mismatch (id block is not valid UTF-8)"
        ) from None
    if n > 0 and not text.endswith("\n"):
        raise StoreError(f"{path}: payload size mismatch (unterminated id block)")
    lines = text.split("\n")[:-1] if text else []
    if len(lines) != n:
        raise StoreError(
            f"{path}: payload size mismatch (expected {n} ids, found {len(lines)})"
        )
    try:
        return EmbeddingMatrix(ids=tuple(lines), data=data)
    except StoreError as exc:
        raise StoreError(f"{path}: {exc}") from None


def save_space(space: SpaceBundle, path) -> None:
    """Write a bundle as a directory: manifest.json plus one .emb per modality."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "name": space.name,
        "dim": space.dim,
        "modalities": {tag: f"{tag}.emb" for tag in space.tags},
    }
    for tag in space.tags:
        write_embedding_file(space.modalities[tag], path / manifest["modalities"][tag])
    with open(path / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_space(path, normalize: bool = True) -> SpaceBundle:
    """Load a bundle from a manifest file or a directory containing one.

    With ``normalize=True`` (the default) every row is brought to unit
    norm via :func:`ensure_unit_rows`; rows that are already unit pass
    through bit-for-bit, so saving and reloading a normalized bundle
    round-trips exactly.
    """
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise StoreError(f"{manifest_path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise StoreError(f"{manifest_path}: malformed manifest ({exc})") from None
    for key in ("name", "dim", "modalities"):
        if key not in manifest:
            raise StoreError(f"{manifest_path}: manifest missing {key!r}")
    base = manifest_path.parent
    modalities = {}
    for tag, fname in manifest["modalities"].items():
        matrix = read_embedding_file(base / fname)
        if matrix.d != manifest["dim"]:
            raise StoreError(
                f"{base / fname}: dimension mismatch, "
                f"file has d={matrix.d}, manifest says {manifest['dim']}"
            )
        if normalize:
            matrix = EmbeddingMatrix(ids=matrix.ids, data=ensure_unit_rows(matrix.data))
        modalities[tag] = matrix
    return SpaceBundle(name=manifest["name"], dim=manifest["dim"], modalities=modalities)
