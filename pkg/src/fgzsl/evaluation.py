"""GZSL metrics: per-class top-k accuracy on seen/unseen classes, harmonic
mean, hop-set breakdowns and accuracy at coarser taxonomic levels."""

from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyClassInSubset, NegativeInput, UnknownClass, UnknownSpecies
from .taxonomy import HOPS, LEVEL_NAMES, Split, Taxonomy, ancestor_at_level

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)


@dataclass(frozen=True)
class PredictionSet:
    """True class and ranked predictions (best first) for each sample."""

    sample_ids: tuple[str, ...]
    true: tuple[str, ...]
    ranked: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not (len(self.sample_ids) == len(self.true) == len(self.ranked)):
            raise ValueError("sample_ids, true and ranked must have equal length")
        for sid, r in zip(self.sample_ids, self.ranked):
            if len(set(r)) != len(r):
                raise ValueError(f"sample {sid!r}: ranked predictions contain duplicates")

    def __len__(self):
        return len(self.true)

    @property
    def max_k(self) -> int:
        return min((len(r) for r in self.ranked), default=0)

    @classmethod
    def from_scores(cls, scores, true_labels, class_ids: Sequence[str], k: int = 10,
                    sample_ids: Sequence[str] | None = None) -> "PredictionSet":
        """Rank classes by descending score; ties keep class-registry order."""
        scores = np.asarray(scores)
        k = min(k, scores.shape[1])
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        ids = np.asarray(class_ids, dtype=object)
        if sample_ids is None:
            sample_ids = [str(i) for i in range(len(scores))]
        return cls(tuple(sample_ids), tuple(str(class_ids[t]) for t in true_labels),
                   tuple(tuple(row) for row in ids[order]))

    def check_registered(self, classes: Iterable[str]) -> None:
        known = set(classes)
        bad = {c for c in self.true if c not in known}
        bad |= {c for r in self.ranked for c in r if c not in known}
        if bad:
            raise UnknownClass(f"unregistered class ids in predictions: {sorted(bad)[:5]}")

    def save(self, path, k: int = 10) -> None:
        """Write ``sample_id,true_class,rank1..rankK``."""
        k = min(k, self.max_k)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sample_id", "true_class", *(f"rank{i}" for i in range(1, k + 1))])
            for sid, t, r in zip(self.sample_ids, self.true, self.ranked):
                w.writerow([sid, t, *r[:k]])

    @classmethod
    def load(cls, path) -> "PredictionSet":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if not rows or rows[0][:2] != ["sample_id", "true_class"]:
            raise ValueError(f"{path}: expected header sample_id,true_class,rank1,...")
        body = rows[1:]
        return cls(tuple(r[0] for r in body), tuple(r[1] for r in body),
                   tuple(tuple(r[2:]) for r in body))


def _hits(preds: PredictionSet, k: int) -> dict[str, list[bool]]:
    if k > preds.max_k:
        raise ValueError(f"k={k} exceeds the ranked list length {preds.max_k}")
    by_class: dict[str, list[bool]] = {}
    for t, r in zip(preds.true, preds.ranked):
        by_class.setdefault(t, []).append(t in r[:k])
    return by_class


def per_class_topk(preds: PredictionSet, classes: Iterable[str], k: int = 1,
                   average: str = "macro", skip_missing: bool = False) -> float:
    """Top-k accuracy (percent) over the samples of ``classes``.

    ``average="macro"`` takes the unweighted mean of per-class accuracies;
    ``"micro"`` pools samples. Classes without samples raise
    :class:`EmptyClassInSubset`, or are dropped with a warning when
    ``skip_missing`` is set.
    """
    classes = sorted(set(classes))
    if not classes:
        raise EmptyClassInSubset("class subset is empty")
    hits = _hits(preds, k)
    missing = [c for c in classes if c not in hits]
    if missing:
        if not skip_missing:
            raise EmptyClassInSubset(f"no samples for classes {missing[:5]}")
        log.warning("skipping %d class(es) with no test samples", len(missing))
        classes = [c for c in classes if c in hits]
        if not classes:
            raise EmptyClassInSubset("no class of the subset has samples")
    if average == "macro":
        return 100.0 * float(np.mean([np.mean(hits[c]) for c in classes]))
    if average == "micro":
        pooled = [h for c in classes for h in hits[c]]
        return 100.0 * float(np.mean(pooled))
    raise ValueError(f"average must be 'macro' or 'micro', got {average!r}")


def harmonic_mean(s: float, u: float) -> float:
    """2SU / (S + U), or 0 when either accuracy is 0."""
    if s < 0 or u < 0:
        raise NegativeInput(f"accuracies must be >= 0, got S={s}, U={u}")
    if s == 0 or u == 0:
        return 0.0
    return 2 * s * u / (s + u)


def hop_breakdown(preds: PredictionSet, split: Split, k: int = 1, average: str = "macro") -> dict[int, float | None]:
    """Top-k accuracy restricted to each hop set.

    Classes without predictions are skipped (counted in the log); a hop set with
    no evaluated class maps to ``None``.
    """
    present = set(preds.true)
    out: dict[int, float | None] = {}
    skipped = 0
    for i in HOPS:
        members = [c for c in split.hop_sets[i] if c in present]
        skipped += len(split.hop_sets[i]) - len(members)
        out[i] = per_class_topk(preds, members, k, average) if members else None
    if skipped:
        log.warning("hop breakdown skipped %d class(es) without predictions", skipped)
    return out


def hierarchical_accuracy(preds: PredictionSet, tax: Taxonomy, level: int | str,
                          classes: Iterable[str] | None = None) -> float:
    """Top-1 accuracy where a prediction counts if it falls in the true
    species' genus/family/order; macro-averaged over true species."""
    lvl = LEVEL_NAMES.index(level) if isinstance(level, str) else int(level)
    if lvl not in (0, 1, 2, 3):
        raise ValueError(f"level must be 0..3 or one of {LEVEL_NAMES}")
    keep = None if classes is None else set(classes)
    by_class: dict[str, list[bool]] = {}
    for t, r in zip(preds.true, preds.ranked):
        if keep is not None and t not in keep:
            continue
        p = r[0]
        for c in (t, p):
            if c not in tax:
                raise UnknownSpecies(f"unknown species {c!r}")
        ok = p == t if lvl == 0 else ancestor_at_level(tax, p, lvl) == ancestor_at_level(tax, t, lvl)
        by_class.setdefault(t, []).append(ok)
    if not by_class:
        raise EmptyClassInSubset("no samples to evaluate")
    return 100.0 * float(np.mean([np.mean(v) for v in by_class.values()]))


@dataclass
class GZSLReport:
    topk: dict[int, dict[str, float]]
    hops: dict[int, dict[int, float | None]]
    levels: dict[str, float | None]
    levels_by_hop: dict[int, dict[str, float | None]]
    counts: dict[str, int]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "topk": {str(k): v for k, v in self.topk.items()},
            "hops": {str(k): {str(i): a for i, a in v.items()} for k, v in self.hops.items()},
            "levels": self.levels,
            "levels_by_hop": {str(i): v for i, v in self.levels_by_hop.items()},
            "counts": self.counts,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def to_markdown(self) -> str:
        ks = sorted(self.topk)
        lines = ["| metric | " + " | ".join(f"top-{k}" for k in ks) + " |",
                 "|---|" + "---|" * len(ks)]
        for m in ("S", "U", "H"):
            lines.append(f"| {m} | " + " | ".join(_fmt(self.topk[k][m]) for k in ks) + " |")
        for i in HOPS:
            lines.append(f"| {i}-hop | " + " | ".join(_fmt(self.hops[k][i]) for k in ks) + " |")
        lines.append("")
        lines.append("| level | top-1 (unseen) |")
        lines.append("|---|---|")
        for name in LEVEL_NAMES:
            lines.append(f"| {name} | {_fmt(self.levels.get(name))} |")
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "-" if v is None else f"{v:.1f}"


def evaluate(preds: PredictionSet, split: Split, tax: Taxonomy | None = None,
             ks: Sequence[int] = DEFAULT_KS, average: str = "macro",
             metadata: Mapping | None = None) -> GZSLReport:
    """Full GZSL report over predictions made in the joint label space."""
    preds.check_registered(split.classes)
    present = set(preds.true)
    seen = [c for c in split.seen if c in present]
    unseen = [c for c in split.unseen if c in present]
    missing = len(split.classes) - len(seen) - len(unseen)
    if missing:
        log.warning("%d class(es) have no test samples and are excluded", missing)
    topk, hops = {}, {}
    for k in ks:
        s = per_class_topk(preds, seen, k, average) if seen else 0.0
        u = per_class_topk(preds, unseen, k, average) if unseen else 0.0
        topk[k] = {"S": s, "U": u, "H": harmonic_mean(s, u)}
        hops[k] = hop_breakdown(preds, split, k, average)
    levels: dict[str, float | None] = {n: None for n in LEVEL_NAMES}
    levels_by_hop = {i: {n: None for n in LEVEL_NAMES} for i in HOPS}
    if tax is not None and unseen:
        for lvl, name in enumerate(LEVEL_NAMES):
            levels[name] = hierarchical_accuracy(preds, tax, lvl, unseen)
            for i in HOPS:
                members = [c for c in split.hop_sets[i] if c in present]
                if members:
                    levels_by_hop[i][name] = hierarchical_accuracy(preds, tax, lvl, members)
    counts = {
        "samples": len(preds),
        "seen_classes": len(seen),
        "unseen_classes": len(unseen),
        "excluded_classes": missing,
        **{f"{i}-hop_classes": sum(c in present for c in split.hop_sets[i]) for i in HOPS},
    }
    return GZSLReport(topk, hops, levels, levels_by_hop, counts, dict(metadata or {}))


def aggregate_runs(reports: Sequence[GZSLReport]) -> dict:
    """Mean and standard deviation of S, U and H over runs.

    H is computed within each run and then averaged; it is not the harmonic
    mean of the averaged S and U.
    """
    out = {}
    for k in reports[0].topk:
        row = {}
        for m in ("S", "U", "H"):
            vals = [r.topk[k][m] for r in reports]
            row[m] = {"mean": statistics.fmean(vals),
                      "std": statistics.stdev(vals) if len(vals) > 1 else 0.0}
        out[str(k)] = row
    return out
