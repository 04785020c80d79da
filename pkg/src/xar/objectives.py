"""Bidirectional max-margin ranking loss and retrieval metrics."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Collection, Mapping, Sequence

import numpy as np

from . import numkit as nk
from .encoders import TextEmbedding, similarity_scores
from .numkit import Tensor

DEFAULT_KS = (1, 5, 10)
DIRECTIONS = ("t2a", "a2t")


@dataclass
class SimilarityMatrix:
    """Scores with rows = queries and columns = gallery items."""

    values: np.ndarray
    query_ids: list = field(default_factory=list)
    gallery_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"similarity matrix must be 2-d, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise nk.NumericalError("similarity matrix has non-finite entries")

    @property
    def T(self) -> "SimilarityMatrix":
        return SimilarityMatrix(self.values.T, self.gallery_ids, self.query_ids)


def similarity_matrix(audio: Sequence[Tensor], text: TextEmbedding, text_ids=None, audio_ids=None,
                      chunk: int = 1024) -> SimilarityMatrix:
    """Text-to-audio scores: entry (i, j) compares caption i with audio j."""
    n_text = text.experts[0].shape[0]
    n_audio = audio[0].shape[0]
    if n_text == 0 or n_audio == 0:
        raise ValueError("similarity_matrix needs nonempty batches")
    rows = []
    with nk.no_grad():
        for lo in range(0, n_text, chunk):
            sl = slice(lo, lo + chunk)
            part = TextEmbedding(text.h[sl], [t[sl] for t in text.experts], text.weights[sl])
            rows.append(similarity_scores(audio, part).data)
    values = np.concatenate(rows, axis=0)
    return SimilarityMatrix(
        values,
        list(range(n_text)) if text_ids is None else list(text_ids),
        list(range(n_audio)) if audio_ids is None else list(audio_ids),
    )


def ranking_loss(s: Tensor, margin: float = 0.2) -> Tensor:
    """(1/B) sum_{i, j != i} [m + s_ij - s_ii]_+ + [m + s_ji - s_ii]_+ ."""
    s = nk._lift(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"ranking_loss needs a square matrix, got {s.shape}")
    B = s.shape[0]
    diag = nk.diagonal(s)
    off = (1.0 - np.eye(B)).astype(s.dtype)
    rows = nk.relu(nk.add(nk.sub(s, nk.reshape(diag, (B, 1))), margin))
    cols = nk.relu(nk.add(nk.sub(s, nk.reshape(diag, (1, B))), margin))
    total = nk.sum_(nk.mul(nk.add(rows, cols), off))
    return nk.mul(total, 1.0 / B)


GroundTruth = Sequence[Collection[int]]


def best_ranks(s: SimilarityMatrix | np.ndarray, gt: GroundTruth) -> np.ndarray:
    """1-based rank of the best-placed correct item for each query.

    rank = 1 + number of gallery items scoring strictly higher (ties go in
    the query's favour).
    """
    values = s.values if isinstance(s, SimilarityMatrix) else np.asarray(s)
    Q, G = values.shape
    if len(gt) != Q:
        raise ValueError(f"{len(gt)} ground-truth entries for {Q} queries")
    target = np.empty(Q, dtype=values.dtype)
    for q, correct in enumerate(gt):
        idx = np.fromiter(correct, dtype=np.int64)
        if idx.size == 0:
            raise ValueError(f"query {q} has no correct gallery item")
        if idx.min() < 0 or idx.max() >= G:
            raise IndexError(f"query {q} references gallery index outside [0, {G})")
        target[q] = values[q, idx].max()
    return 1 + (values > target[:, None]).sum(axis=1)


def recall_at_k(s: SimilarityMatrix | np.ndarray, gt: GroundTruth, k: int, ranks: np.ndarray | None = None) -> float:
    """Percentage of queries whose best correct item lands in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    values = s.values if isinstance(s, SimilarityMatrix) else np.asarray(s)
    if k > values.shape[1]:
        warnings.warn(f"k={k} exceeds gallery size {values.shape[1]}; clamping", stacklevel=2)
        k = values.shape[1]
    if ranks is None:
        ranks = best_ranks(values, gt)
    return 100.0 * float(np.mean(ranks <= k))


def geometric_mean_score(r1: float, r5: float, r10: float) -> float:
    for r in (r1, r5, r10):
        if not 0 <= r <= 100:
            raise ValueError(f"recall {r} outside [0, 100]")
    return float(np.cbrt(r1 * r5 * r10))


def metric_key(k: int) -> str:
    return f"R@{k}"


@dataclass
class RetrievalReport:
    """Recall@k for one direction, optionally aggregated over seeds.

    ``recalls``/``geom_mean`` hold the (mean) values; ``per_seed`` keeps the
    individual runs and ``std`` is None when fewer than two seeds exist.
    """

    direction: str
    recalls: dict[int, float]
    geom_mean: float
    seeds: list[int] = field(default_factory=list)
    per_seed: list[dict[str, float]] = field(default_factory=list)
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] | None = None
    label: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        self.recalls = {int(k): float(v) for k, v in self.recalls.items()}
        if not self.mean:
            self.mean = self.metrics()

    def metrics(self) -> dict[str, float]:
        out = {metric_key(k): v for k, v in sorted(self.recalls.items())}
        out["geom_mean"] = self.geom_mean
        return out

    def to_dict(self) -> dict:
        d = {
            "direction": self.direction,
            "recalls": {str(k): v for k, v in sorted(self.recalls.items())},
            "geom_mean": self.geom_mean,
            "seeds": list(self.seeds),
            "per_seed": self.per_seed,
            "mean": self.mean,
            "std": self.std,
        }
        if self.label is not None:
            d["label"] = self.label
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RetrievalReport":
        known = {"direction", "recalls", "geom_mean", "seeds", "per_seed", "mean", "std", "label"}
        return cls(
            direction=d["direction"],
            recalls={int(k): v for k, v in d["recalls"].items()},
            geom_mean=d["geom_mean"],
            seeds=list(d.get("seeds", [])),
            per_seed=list(d.get("per_seed", [])),
            mean=dict(d.get("mean") or {}),
            std=d.get("std"),
            label=d.get("label"),
            extra={k: v for k, v in d.items() if k not in known},
        )


def evaluate_direction(s: SimilarityMatrix | np.ndarray, gt: GroundTruth, direction: str,
                       ks: Sequence[int] = DEFAULT_KS, seed: int | None = None) -> RetrievalReport:
    values = s.values if isinstance(s, SimilarityMatrix) else np.asarray(s)
    ranks = best_ranks(values, gt)
    # clamp quietly here; the gallery may legitimately be smaller than 10
    recalls = {k: recall_at_k(values, gt, min(k, values.shape[1]), ranks=ranks) for k in ks}
    r = [recalls[k] for k in (1, 5, 10)] if all(k in recalls for k in (1, 5, 10)) else None
    geom = geometric_mean_score(*r) if r else float("nan")
    per_seed = [dict({metric_key(k): v for k, v in recalls.items()}, geom_mean=geom)]
    return RetrievalReport(direction, recalls, geom, seeds=[] if seed is None else [seed], per_seed=per_seed)


def aggregate_seeds(reports: Sequence[RetrievalReport]) -> RetrievalReport:
    """Mean and sample standard deviation (n - 1) of every metric across seeds."""
    if not reports:
        raise ValueError("aggregate_seeds needs at least one report")
    directions = {r.direction for r in reports}
    if len(directions) != 1:
        raise ValueError(f"cannot aggregate mixed directions {sorted(directions)}")
    rows = [row for r in reports for row in (r.per_seed or [r.metrics()])]
    keys = list(rows[0])
    if any(list(row) != keys for row in rows):
        raise ValueError("cannot aggregate reports with different metrics")
    table = np.array([[row[k] for k in keys] for row in rows], dtype=np.float64)
    means = table.mean(axis=0)
    mean = {k: float(v) for k, v in zip(keys, means)}
    std = None
    if len(rows) >= 2:
        std = {k: float(v) for k, v in zip(keys, table.std(axis=0, ddof=1))}
    recalls = {int(k[2:]): mean[k] for k in keys if k.startswith("R@")}
    return RetrievalReport(
        reports[0].direction,
        recalls,
        mean["geom_mean"],
        seeds=[s for r in reports for s in r.seeds],
        per_seed=rows,
        mean=mean,
        std=std,
        label=reports[0].label,
        extra=dict(reports[0].extra),
    )


def format_mean_std(mean: float, std: float | None) -> str:
    """Tables print one decimal; '18.0±0.2', or '18.0' without a spread."""
    if std is None or (isinstance(std, float) and math.isnan(std)):
        return f"{mean:.1f}"
    return f"{mean:.1f}±{std:.1f}"
