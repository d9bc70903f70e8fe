"""Sparsity, radius, and robust-accuracy statistics over attack records."""

import math
from dataclasses import dataclass, field

import numpy as np


def sparsity_measure(delta):
    """Soft sparsity of a perturbation: absolute-sum over Euclidean norm.

    Ranges over [1, sqrt(n)]: 1 for a one-hot perturbation, sqrt(n) when
    every coordinate has the same magnitude.  Undefined for an exactly-zero
    perturbation, reported as ``None``.
    """
    delta = np.asarray(delta, dtype=float)
    l2 = float(np.linalg.norm(delta))
    if l2 == 0.0:
        return None
    return float(np.abs(delta).sum() / l2)


def _check_coverage(records_by_tag):
    ids = None
    for tag, records in records_by_tag.items():
        tag_ids = sorted(r.sample_id for r in records)
        if len(set(tag_ids)) != len(tag_ids):
            raise ValueError(f"duplicate sample ids for solver {tag!r}")
        if ids is None:
            ids = tag_ids
        elif tag_ids != ids:
            raise ValueError("solver record sets cover different samples")
    return ids


def robust_accuracy(records, clean_correct):
    """Fraction of samples that survive both the clean test and the attacks.

    ``clean_correct`` maps sample id to whether the unperturbed prediction
    was right; a miss counts against robustness at zero attack cost.
    """
    by_id = {}
    for r in records:
        by_id.setdefault(r.sample_id, []).append(r)
    missing = set(by_id) - set(clean_correct)
    if missing:
        raise ValueError(f"no clean predictions for samples {sorted(missing)}")
    robust = 0
    for sid, recs in by_id.items():
        attacked = any(r.attack_success for r in recs)
        robust += int(clean_correct[sid] and not attacked)
    return robust / len(by_id) if by_id else float("nan")


def union_robust_accuracy(records_by_tag, clean_correct):
    """Robust accuracy against the union of successes across solver tags."""
    _check_coverage(records_by_tag)
    pooled = [r for records in records_by_tag.values() for r in records]
    return robust_accuracy(pooled, clean_correct)


@dataclass
class RadiusStats:
    mean: float
    median: float
    std: float  # population
    count: int


def radius_stats(records):
    """Mean, median, and population standard deviation of recorded radii."""
    if not records:
        raise ValueError("no records")
    radii = np.array([r.objective_or_radius for r in records], dtype=float)
    return RadiusStats(
        mean=float(radii.mean()),
        median=float(np.median(radii)),
        std=float(radii.std()),
        count=radii.size,
    )


def radius_differences(records_a, records_b):
    """Sample-wise radius differences (first solver minus second)."""
    b_by_id = {r.sample_id: r for r in records_b}
    diffs = []
    for r in records_a:
        if r.sample_id not in b_by_id:
            raise ValueError(f"sample {r.sample_id} missing from the second record set")
        diffs.append((r.sample_id, r.objective_or_radius - b_by_id[r.sample_id].objective_or_radius))
    return diffs


def sparsity_histogram(sparsities, n, bins=30):
    """Histogram of sparsity measures over their full range [1, sqrt(n)]."""
    values = [s for s in sparsities if s is not None]
    edges = np.linspace(1.0, math.sqrt(n), bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return edges, counts


@dataclass
class RunSummary:
    """Aggregate view of one experiment: accuracy, radii, and sparsity."""

    robust_accuracy: dict = field(default_factory=dict)  # (tag, loss, metric) -> value
    union_robust_accuracy: dict = field(default_factory=dict)  # (loss, metric) -> value
    radius_stats: dict = field(default_factory=dict)  # (tag, metric) -> RadiusStats
    sparsity_mean: dict = field(default_factory=dict)  # (tag, loss, metric) -> value
    histogram_edges: list = field(default_factory=list)
    histograms: dict = field(default_factory=dict)  # (tag, loss, metric) -> counts

    def to_dict(self):
        def keyed(d, fn=lambda v: v):
            return {"|".join(map(str, k)): fn(v) for k, v in d.items()}

        return {
            "schema_version": 1,
            "robust_accuracy": keyed(self.robust_accuracy),
            "union_robust_accuracy": keyed(self.union_robust_accuracy),
            "radius_stats": keyed(self.radius_stats, lambda s: vars(s)),
            "sparsity_mean": keyed(self.sparsity_mean),
            "histogram_edges": list(self.histogram_edges),
            "histograms": keyed(self.histograms, lambda c: [int(x) for x in c]),
        }


def summarize(records, clean_correct, n, bins=30):
    """Build a RunSummary from a flat list of attack records."""
    summary = RunSummary()
    groups = {}
    for r in records:
        groups.setdefault((r.solver_tag, r.loss, r.metric), []).append(r)

    for key, recs in sorted(groups.items()):
        tag, loss, metric = key
        summary.robust_accuracy[key] = robust_accuracy(recs, clean_correct)
        sparsities = [r.sparsity for r in recs if r.sparsity is not None]
        if sparsities:
            summary.sparsity_mean[key] = float(np.mean(sparsities))
        edges, counts = sparsity_histogram([r.sparsity for r in recs], n, bins)
        summary.histogram_edges = edges.tolist()
        summary.histograms[key] = counts
        if all(r.eps is None for r in recs):
            summary.radius_stats[(tag, metric)] = radius_stats(recs)

    by_config = {}
    for r in records:
        by_config.setdefault((r.loss, r.metric), {}).setdefault(r.solver_tag, []).append(r)
    for cfg_key, by_tag in sorted(by_config.items()):
        if len(by_tag) > 1:
            summary.union_robust_accuracy[cfg_key] = union_robust_accuracy(by_tag, clean_correct)
    return summary
