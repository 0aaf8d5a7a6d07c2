"""Ranking metrics for multi-label tagging and the per-class improvement analysis."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


class NoPositives(ValueError):
    pass


class DegenerateLabels(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class ClassSetMismatch(ValueError):
    pass


def _prepare(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if scores.ndim == 0:
        raise ValueError("need at least one score")
    return scores, labels


def _scalar_or_array(v):
    return float(v) if np.ndim(v) == 0 else v


def average_precision(scores, labels):
    """Non-interpolated AP: mean precision at the rank of each positive.

    Sorting is by descending score with ties kept in input order.  Leading
    axes are treated as independent rankings.
    """
    scores, labels = _prepare(scores, labels)
    n_pos = labels.sum(axis=-1)
    if np.any(n_pos == 0):
        raise NoPositives("average precision needs at least one positive")
    order = np.argsort(-scores, axis=-1, kind="stable")
    hits = np.take_along_axis(labels, order, axis=-1)
    ranks = np.arange(1, scores.shape[-1] + 1)
    precision = np.cumsum(hits, axis=-1) / ranks
    return _scalar_or_array(np.where(hits, precision, 0.0).sum(axis=-1) / n_pos)


def _average_ranks(scores):
    """1-based ranks along the last axis; tied scores share their mean rank."""
    n = scores.shape[-1]
    order = np.argsort(scores, axis=-1, kind="stable")
    s = np.take_along_axis(scores, order, axis=-1)
    idx = np.broadcast_to(np.arange(n), s.shape)
    new_group = np.ones(s.shape, dtype=bool)
    new_group[..., 1:] = s[..., 1:] != s[..., :-1]
    first = np.maximum.accumulate(np.where(new_group, idx, 0), axis=-1)
    last_group = np.ones(s.shape, dtype=bool)
    last_group[..., :-1] = new_group[..., 1:]
    last = np.flip(np.minimum.accumulate(np.flip(np.where(last_group, idx, n - 1), -1), axis=-1), -1)
    ranks = np.empty(s.shape, dtype=np.float64)
    np.put_along_axis(ranks, order, (first + last) / 2.0 + 1.0, axis=-1)
    return ranks


def roc_auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counted as 1/2."""
    scores, labels = _prepare(scores, labels)
    n_pos = labels.sum(axis=-1)
    n_neg = labels.shape[-1] - n_pos
    if np.any(n_pos == 0) or np.any(n_neg == 0):
        raise DegenerateLabels("AUC needs at least one positive and one negative")
    rank_sum = np.where(labels, _average_ranks(scores), 0.0).sum(axis=-1)
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return _scalar_or_array(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    class_names: list[str]
    ap: list[float | None]
    auc: list[float | None]
    n_positives: list[int]
    n_eval: int
    mAP: float = float("nan")
    mAUC: float = float("nan")
    excluded: list[int] = field(default_factory=list)

    def to_jsonl(self) -> str:
        rows = []
        for i, name in enumerate(self.class_names):
            rows.append(json.dumps({"class": i, "name": name, "ap": self.ap[i], "auc": self.auc[i],
                                    "n_positives": self.n_positives[i]}))
        rows.append(json.dumps({"summary": True, "mAP": self.mAP, "mAUC": self.mAUC, "n_eval": self.n_eval,
                                "n_classes": len(self.class_names), "excluded": self.excluded}))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EvalReport":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        summary = [r for r in rows if r.get("summary")]
        classes = sorted((r for r in rows if not r.get("summary")), key=lambda r: r["class"])
        if len(summary) != 1:
            raise ValueError("report must contain exactly one summary line")
        s = summary[0]
        return cls(class_names=[r["name"] for r in classes], ap=[r["ap"] for r in classes],
                   auc=[r["auc"] for r in classes], n_positives=[r["n_positives"] for r in classes],
                   n_eval=s["n_eval"], mAP=s["mAP"], mAUC=s["mAUC"], excluded=s["excluded"])


def evaluate_scores(scores, labels, class_names=None) -> EvalReport:
    """Per-class AP/AUC over an (n_recordings, |C|) score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise EmptyDataset("no recordings to evaluate")
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    n, c = scores.shape
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(c)]
    aps, aucs, excluded = [], [], []
    npos = labels.sum(axis=0).astype(int).tolist()
    for i in range(c):
        if npos[i] == 0:
            aps.append(None)
            aucs.append(None)
            excluded.append(i)
            continue
        aps.append(average_precision(scores[:, i], labels[:, i]))
        aucs.append(roc_auc(scores[:, i], labels[:, i]) if npos[i] < n else None)
    kept_ap = [a for a in aps if a is not None]
    kept_auc = [a for a in aucs if a is not None]
    return EvalReport(class_names=names, ap=aps, auc=aucs, n_positives=npos, n_eval=n,
                      mAP=float(np.mean(kept_ap)) if kept_ap else float("nan"),
                      mAUC=float(np.mean(kept_auc)) if kept_auc else float("nan"),
                      excluded=excluded)


# -- improvement analysis --------------------------------------------------------

BIN_EDGES = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class ImprovementBins:
    edges: tuple
    counts: list[int]
    base_mean: list[float | None]
    new_mean: list[float | None]
    relative_improvement_pct: list[float | None]
    class_deltas_pct: list[float | None]
    n_improved: int
    n_improved_over_20pct: int
    n_degraded_over_10pct: int

    def to_dict(self) -> dict:
        return asdict(self)

    def histogram(self) -> str:
        lines = ["# base-AP bin      classes  rel. mean-AP change"]
        for i, cnt in enumerate(self.counts):
            lo, hi = self.edges[i], self.edges[i + 1]
            rel = self.relative_improvement_pct[i]
            bar = "" if rel is None else ("+" if rel >= 0 else "-") * min(40, int(round(abs(rel) / 2.5)))
            val = "      n/a" if rel is None else f"{rel:+8.2f}%"
            lines.append(f"[{lo:.1f}, {hi:.1f}{']' if i == len(self.counts) - 1 else ')'}  {cnt:7d}  {val} {bar}")
        lines.append(f"# improved: {self.n_improved}  >20% better: {self.n_improved_over_20pct}"
                     f"  >10% worse: {self.n_degraded_over_10pct}")
        return "\n".join(lines) + "\n"


def _bin_index(ap: float) -> int:
    return min(int(np.floor(ap * 10 + 1e-9)), 9)


def improvement_analysis(base: EvalReport, new: EvalReport) -> ImprovementBins:
    """Bin classes by their base AP and compare mean AP per bin."""
    if base.class_names != new.class_names:
        raise ClassSetMismatch("reports cover different class sets")
    nb = len(BIN_EDGES) - 1
    members: list[list[int]] = [[] for _ in range(nb)]
    deltas: list[float | None] = []
    for i, (b, n) in enumerate(zip(base.ap, new.ap)):
        if b is None or n is None:
            deltas.append(None)
            continue
        members[_bin_index(b)].append(i)
        deltas.append(None if b == 0 else (n - b) / b * 100.0)
    base_mean, new_mean, rel = [], [], []
    for idx in members:
        if not idx:
            base_mean.append(None)
            new_mean.append(None)
            rel.append(None)
            continue
        mb = float(np.mean([base.ap[i] for i in idx]))
        mn = float(np.mean([new.ap[i] for i in idx]))
        base_mean.append(mb)
        new_mean.append(mn)
        rel.append(None if mb == 0 else (mn - mb) / mb * 100.0)
    valid = [(base.ap[i], new.ap[i], d) for i, d in enumerate(deltas) if base.ap[i] is not None
             and new.ap[i] is not None]
    return ImprovementBins(
        edges=BIN_EDGES,
        counts=[len(m) for m in members],
        base_mean=base_mean,
        new_mean=new_mean,
        relative_improvement_pct=rel,
        class_deltas_pct=deltas,
        n_improved=sum(1 for b, n, _ in valid if n > b),
        n_improved_over_20pct=sum(1 for _, _, d in valid if d is not None and d > 20.0),
        n_degraded_over_10pct=sum(1 for _, _, d in valid if d is not None and d < -10.0),
    )
