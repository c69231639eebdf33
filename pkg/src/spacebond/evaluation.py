"""Zero-shot task metrics: cross-modal retrieval R@k, accuracy, and mAP.

All rankings use cosine similarity with deterministic tie-breaking by
ascending gallery (or class) index.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spacebond.store import EmbeddingMatrix, cosine_similarity

DEFAULT_KS = (1, 5)

# The six cross-modal retrieval directions reported for a three-modality
# space, and the three task pairs they average into.
RETRIEVAL_DIRECTIONS = (
    ("audio", "text"),
    ("text", "audio"),
    ("audio", "image"),
    ("image", "audio"),
    ("image", "text"),
    ("text", "image"),
)
TASK_PAIRS = {
    "audio_text": (("audio", "text"), ("text", "audio")),
    "audio_image": (("audio", "image"), ("image", "audio")),
    "image_text": (("image", "text"), ("text", "image")),
}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalTask:
    """Ranked retrieval of gallery items for each query.

    ``ground_truth`` maps query id to the set of correct gallery ids;
    every query must have at least one correct item.
    """

    query_ids: tuple[str, ...]
    queries: np.ndarray
    gallery_ids: tuple[str, ...]
    gallery: np.ndarray
    ground_truth: dict[str, set]
    ks: tuple[int, ...] = DEFAULT_KS

    def __post_init__(self):
        if self.gallery.shape[0] == 0:
            raise EvaluationError("empty gallery")
        if any(k <= 0 for k in self.ks):
            raise EvaluationError("k values must be positive")
        gallery_set = set(self.gallery_ids)
        for qid in self.query_ids:
            correct = self.ground_truth.get(qid, set())
            if not correct:
                raise EvaluationError(f"query {qid!r} has no correct gallery item")
            if not correct & gallery_set:
                raise EvaluationError(f"query {qid!r}: no ground-truth id in gallery")


@dataclass(frozen=True)
class ClassificationTask:
    """Zero-shot classification against one prototype embedding per class.

    ``labels`` is a list of ints for single-label tasks or a list of
    int sets for multi-label tasks.
    """

    samples: np.ndarray
    prototypes: np.ndarray
    labels: tuple

    def __post_init__(self):
        n_classes = self.prototypes.shape[0]
        if n_classes < 2:
            raise EvaluationError("need at least 2 classes")
        if len(self.labels) != self.samples.shape[0]:
            raise EvaluationError("one label entry per sample required")
        for lab in self.labels:
            entries = lab if isinstance(lab, (set, frozenset, tuple, list)) else (lab,)
            for c in entries:
                if not 0 <= int(c) < n_classes:
                    raise EvaluationError(f"label index {c} out of range")

    @property
    def multi_label(self) -> bool:
        return bool(self.labels) and isinstance(
            self.labels[0], (set, frozenset, tuple, list)
        )


def _ranked_indices(sims: np.ndarray) -> np.ndarray:
    # Stable sort on the negated scores: ties resolve to the lowest index.
    return np.argsort(-sims, axis=-1, kind="stable")


def recall_at_k(task: RetrievalTask) -> dict[int, float]:
    """Fraction of queries whose top-k ranked gallery items hit the truth."""
    sims = cosine_similarity(task.queries, task.gallery)
    order = _ranked_indices(sims)
    out = {}
    for k in task.ks:
        hits = 0
        for qi, qid in enumerate(task.query_ids):
            correct = task.ground_truth[qid]
            top = order[qi, :k]
            if any(task.gallery_ids[gi] in correct for gi in top):
                hits += 1
        out[k] = hits / len(task.query_ids)
    return out


def zero_shot_accuracy(task: ClassificationTask) -> float:
    """Argmax-cosine prediction accuracy; ties go to the lowest class index."""
    if task.multi_label:
        raise EvaluationError("zero_shot_accuracy expects a single-label task")
    sims = cosine_similarity(task.samples, task.prototypes)
    predictions = np.argmax(sims, axis=1)
    labels = np.asarray([int(lab) for lab in task.labels])
    return float(np.mean(predictions == labels))


def mean_average_precision(task: ClassificationTask) -> float:
    """Mean over classes of average precision of the class-prototype ranking.

    AP for one class is the mean of precision-at-rank taken at each
    positive's rank (no interpolation).  Classes without positives are
    excluded from the mean.
    """
    if not task.multi_label:
        raise EvaluationError("mean_average_precision expects a multi-label task")
    sims = cosine_similarity(task.samples, task.prototypes)
    label_sets = [frozenset(int(c) for c in lab) for lab in task.labels]
    aps = []
    for c in range(task.prototypes.shape[0]):
        positives = [i for i, labs in enumerate(label_sets) if c in labs]
        if not positives:
            continue
        order = _ranked_indices(sims[:, c])
        positive_mask = np.zeros(len(label_sets), dtype=bool)
        positive_mask[positives] = True
        ranked_hits = positive_mask[order]
        cum_hits = np.cumsum(ranked_hits)
        ranks = np.flatnonzero(ranked_hits) + 1
        aps.append(float(np.mean(cum_hits[ranks - 1] / ranks)))
    if not aps:
        raise EvaluationError("no class has a positive sample")
    return float(np.mean(aps))


def identity_retrieval_task(
    queries: EmbeddingMatrix, gallery: EmbeddingMatrix, ks=DEFAULT_KS
) -> RetrievalTask:
    """Task whose ground truth pairs each query with the same-id gallery item."""
    return RetrievalTask(
        query_ids=queries.ids,
        queries=queries.data,
        gallery_ids=gallery.ids,
        gallery=gallery.data,
        ground_truth={qid: {qid} for qid in queries.ids},
        ks=tuple(ks),
    )


def retrieval_report(mats: dict[str, EmbeddingMatrix], ks=DEFAULT_KS) -> dict:
    """Six-direction retrieval report for one three-modality space.

    Returns ``{direction: {"r@k": value}}`` for every direction plus a
    ``pairs`` entry holding the mean R@1 of the two directions of each
    task pair (the single-number summary used for deltas).
    """
    missing = [m for m in ("audio", "image", "text") if m not in mats]
    if missing:
        raise EvaluationError(f"retrieval report needs all three modalities, missing {missing}")
    report = {}
    for query_tag, gallery_tag in RETRIEVAL_DIRECTIONS:
        task = identity_retrieval_task(mats[query_tag], mats[gallery_tag], ks=ks)
        recalls = recall_at_k(task)
        report[f"{query_tag}_to_{gallery_tag}"] = {
            f"r@{k}": recalls[k] for k in task.ks
        }
    report["pairs"] = {
        pair: (
            report[f"{a}_to_{b}"]["r@1"] + report[f"{c}_to_{d}"]["r@1"]
        ) / 2.0
        for pair, ((a, b), (c, d)) in TASK_PAIRS.items()
    }
    return report


def report_rows(report: dict) -> list[tuple[str, str, float]]:
    """Flatten a report into (task, metric, value) rows for CSV output."""
    rows = []
    for task, metrics in sorted(report.items()):
        if task == "pairs":
            for pair, value in sorted(metrics.items()):
                rows.append((f"pair_{pair}", "mean_r@1", float(value)))
        else:
            for metric, value in sorted(metrics.items()):
                rows.append((task, metric, float(value)))
    return rows


def write_report_csv(report: dict, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "metric", "value"])
        for row in report_rows(report):
            writer.writerow([row[0], row[1], repr(row[2])])


def load_ground_truth_csv(path) -> dict[str, set]:
    """Read a two-column (query_id, gallery_id) CSV; multi-row per query allowed."""
    truth: dict[str, set] = {}
    with open(Path(path), "r", newline="", encoding="utf-8") as f:
        for row in csv.reader(f):
            if not row or row[0].strip().lower() == "query_id":
                continue
            if len(row) != 2:
                raise EvaluationError(f"ground-truth row needs 2 columns, got {row!r}")
            truth.setdefault(row[0], set()).add(row[1])
    return truth
