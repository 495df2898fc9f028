"""Evaluation pipeline: threshold selection, largest connected component,
Dice / surface distances in mm, aggregation, and the paired t-test."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

FACE6 = ndimage.generate_binary_structure(3, 1)
DEFAULT_THRESHOLD_GRID = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


class EmptyMaskError(ValueError):
    """Surface distance is undefined for an empty mask."""


class StatisticsError(ValueError):
    """Degenerate sample for a statistical test."""


@dataclass
class BinaryMask:
    data: np.ndarray            # bool, indexed (z, y, x)
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 3:
            raise ValueError("BinaryMask requires a 3D array")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError("spacing must be strictly positive")

    @property
    def dims(self):
        return self.data.shape

    def count(self):
        return int(self.data.sum())


def dice(a, b):
    """Overlap 2|A&B| / (|A|+|B|); 1.0 when both masks are empty."""
    if a.dims != b.dims:
        raise ValueError(f"dice: dims {a.dims} vs {b.dims}")
    na, nb = a.count(), b.count()
    if na == 0 and nb == 0:
        return 1.0
    inter = int((a.data & b.data).sum())
    return 2.0 * inter / (na + nb)


def largest_component(mask):
    """Keep only the biggest 6-connected foreground component.

    Size ties break toward the component containing the lexicographically
    smallest voxel. Empty input passes through empty.
    """
    labels, n = ndimage.label(mask.data, structure=FACE6)
    if n == 0:
        return BinaryMask(np.zeros(mask.dims, dtype=bool), mask.spacing_mm)
    flat = labels.ravel()
    sizes = np.bincount(flat)
    sizes[0] = 0
    best_size = sizes.max()
    candidates = np.flatnonzero(sizes == best_size)
    if len(candidates) == 1:
        keep = candidates[0]
    else:
        keep = min(candidates, key=lambda lab: int(np.argmax(flat == lab)))
    return BinaryMask(labels == keep, mask.spacing_mm)


def surface_voxels(mask):
    """Foreground voxels with a face-adjacent background (or out-of-bounds)
    neighbor, as an (n, 3) coordinate array in (z, y, x) order."""
    m = mask.data
    if not m.any():
        return np.zeros((0, 3), dtype=np.intp)
    eroded = ndimage.binary_erosion(m, structure=FACE6, border_value=0)
    return np.argwhere(m & ~eroded)


def surface_distances(a, b):
    """(MSD_mm, HD_mm) between the face-adjacency surfaces of two masks.

    Distances are Euclidean between voxel centers, scaled per-axis by the
    shared spacing. Raises EmptyMaskError if either mask is empty.
    """
    if a.dims != b.dims:
        raise ValueError(f"surface_distances: dims {a.dims} vs {b.dims}")
    if a.spacing_mm != b.spacing_mm:
        raise ValueError("surface_distances: spacing mismatch")
    if a.count() == 0 or b.count() == 0:
        raise EmptyMaskError("surface distance undefined for an empty mask")
    spacing = np.asarray(a.spacing_mm)
    pa = surface_voxels(a) * spacing
    pb = surface_voxels(b) * spacing
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    msd = 0.5 * (d_ab.mean() + d_ba.mean())
    hd = max(d_ab.max(), d_ba.max())
    return float(msd), float(hd)


def select_threshold(probs, refs, grid=DEFAULT_THRESHOLD_GRID):
    """Grid threshold maximizing mean Dice over a validation set.

    Ties break toward 0.5 (closest first, then the smaller value).
    """
    if len(probs) == 0 or len(probs) != len(refs):
        raise ValueError("select_threshold needs a nonempty, paired validation set")
    scores = []
    for t in grid:
        vals = [dice(BinaryMask(p >= t, r.spacing_mm), r) for p, r in zip(probs, refs)]
        scores.append(float(np.mean(vals)))
    best = max(scores)
    winners = [t for t, s in zip(grid, scores) if s == best]
    return min(winners, key=lambda t: (abs(t - 0.5), t))


# ---------------------------------------------------------------------------
# paired t-test via the regularized incomplete beta function


def _betacf(a, b, x, max_iter=300, eps=1e-15):
    # continued fraction for the incomplete beta (modified Lentz)
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a, b, x):
    if x < 0.0 or x > 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t, df):
    """Two-tailed survival probability P(|T| >= t) for Student's t."""
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def paired_ttest(x, y):
    """Paired two-sample t statistic and two-tailed p value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired_ttest needs two equal-length 1D samples")
    n = len(x)
    if n < 2:
        raise StatisticsError("paired_ttest needs at least 2 pairs")
    d = x - y
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise StatisticsError("zero-variance differences")
    t = d.mean() / (sd / math.sqrt(n))
    p = student_t_sf(abs(t), n - 1)
    return float(t), float(p)


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class CaseResult:
    train_domain: str
    test_domain: str
    preset: str
    case_id: str
    dice: float
    msd_mm: float = float("nan")
    hd_mm: float = float("nan")
    flag: str = ""               # "empty_prediction" when distances undefined


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def aggregate(self):
        """Per-group mean/std (sample std, n-1). Flagged cases are excluded
        from MSD/HD aggregates but kept for Dice."""
        groups = {}
        for r in self.rows:
            groups.setdefault((r.train_domain, r.test_domain, r.preset), []).append(r)
        out = []
        for key in sorted(groups):
            rows = groups[key]
            group = "{}->{}:{}".format(*key)
            dc = [r.dice for r in rows]
            out.append(("dice", group, _mean(dc), _std(dc), len(dc)))
            clean = [r for r in rows if not r.flag]
            for metric, vals in (("msd_mm", [r.msd_mm for r in clean]),
                                 ("hd_mm", [r.hd_mm for r in clean])):
                out.append((metric, group, _mean(vals), _std(vals), len(vals)))
        return out

    def write_cases_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["train_domain", "test_domain", "preset", "case_id",
                         "dice", "msd_mm", "hd_mm", "flag"])
            for r in self.rows:
                wr.writerow([r.train_domain, r.test_domain, r.preset, r.case_id,
                             repr(r.dice), repr(r.msd_mm), repr(r.hd_mm), r.flag])

    def write_aggregate_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["metric", "group", "mean", "std", "n"])
            for metric, group, mean, std, n in self.aggregate():
                wr.writerow([metric, group, repr(mean), repr(std), n])


def _mean(vals):
    return float(np.mean(vals)) if vals else float("nan")


def _std(vals):
    return float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")


def evaluate_case(probs, ref, threshold):
    """Threshold -> largest component -> Dice + surface distances.

    Returns (dice, msd, hd, flag); an empty prediction yields Dice 0 and
    flagged, undefined distances.
    """
    pred = largest_component(BinaryMask(probs >= threshold, ref.spacing_mm))
    dc = dice(pred, ref)
    try:
        msd, hd = surface_distances(pred, ref)
        return dc, msd, hd, ""
    except EmptyMaskError:
        return dc, float("nan"), float("nan"), "empty_prediction"


def evaluate(prob_cases, threshold, train_domain, preset):
    """Run the metric pipeline over {test_domain: [(case_id, probs, ref)]}.

    ``threshold`` must come from select_threshold on the validation split,
    never from test data.
    """
    report = MetricsReport()
    for test_domain in sorted(prob_cases):
        for case_id, probs, ref in prob_cases[test_domain]:
            dc, msd, hd, flag = evaluate_case(probs, ref, threshold)
            report.rows.append(CaseResult(train_domain, test_domain, preset,
                                          case_id, dc, msd, hd, flag))
    return report
