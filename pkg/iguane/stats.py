"""Statistics of the evaluation harness: similarity, correlations, effect sizes, tests."""

from dataclasses import dataclass
from itertools import combinations, product

import numpy as np
from scipy import stats
from scipy.ndimage import gaussian_filter

from iguane.console_utils import warning
from iguane.core import Volume
from iguane.errors import DegenerateInputError, UndefinedResultError, ValidationError

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EXACT_CLUSTERS = 10
"""Up to this many clusters, clustered Wilcoxon p-values come from all sign flips"""


@dataclass
class StatResult:
    """Result of a statistical test"""

    statistic: float
    pvalue: float
    n: int = None
    method: str = "unknown"

    def __iter__(self):
        yield self.statistic
        yield self.pvalue


def _array(x):
    return np.asarray(x.data if isinstance(x, Volume) else x, dtype=float)


# Similarity
# ----------


def ssim(a, b, shift=0.0) -> float:
    """Mean structural similarity of two volumes

    Local statistics use a Gaussian window (sigma 1.5, 11 voxels wide, symmetric
    boundary); the dynamic range is the 99th percentile of the intensities of both
    shifted volumes.

    Parameters
    ----------
    a, b : Volume or np.ndarray
        volumes of identical dimensions
    shift : float, optional
        constant added to both volumes so that intensities are non-negative

    Raises
    ------
    ValidationError
        on dimension mismatch or negative shifted intensities
    """
    a, b = _array(a) + shift, _array(b) + shift
    if a.shape != b.shape:
        raise ValidationError(f"dimensions differ: {a.shape} and {b.shape}")
    if a.min() < 0 or b.min() < 0:
        raise ValidationError("shifted intensities must be non-negative")
    L = np.percentile(np.concatenate([a.ravel(), b.ravel()]), 99)
    if not L > 0:
        raise UndefinedResultError("dynamic range is zero")

    window = lambda x: gaussian_filter(
        x, SSIM_SIGMA, mode="reflect", truncate=SSIM_RADIUS / SSIM_SIGMA
    )
    mu_a, mu_b = window(a), window(b)
    var_a = window(a * a) - mu_a**2
    var_b = window(b * b) - mu_b**2
    cov = window(a * b) - mu_a * mu_b
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    local = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(local.mean())


# Correlations
# ------------


def pearson(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) != len(y):
        raise ValidationError("x and y must have the same length")
    if len(x) < 3:
        raise ValidationError("at least 3 observations are required")
    dx, dy = x - x.mean(), y - y.mean()
    denominator = np.sqrt((dx**2).sum() * (dy**2).sum())
    if not denominator > 0:
        raise UndefinedResultError("zero variance")
    return float((dx * dy).sum() / denominator)


def participant_weights(subject_ids) -> np.ndarray:
    """1 / (number of images of the participant), so each participant sums to 1"""
    ids = np.asarray(subject_ids, dtype=object)
    _, inverse, counts = np.unique(ids.astype(str), return_inverse=True, return_counts=True)
    return 1.0 / counts[inverse]


def weighted_pearson(x, y, w) -> float:
    x, y, w = (np.asarray(v, float) for v in (x, y, w))
    if not len(x) == len(y) == len(w):
        raise ValidationError("x, y and w must have the same length")
    if len(x) < 3:
        raise ValidationError("at least 3 observations are required")
    if (w < 0).any() or not w.sum() > 0:
        raise ValidationError("weights must be non-negative with a positive sum")
    w = w / w.sum()
    dx, dy = x - (w * x).sum(), y - (w * y).sum()
    denominator = np.sqrt((w * dx**2).sum() * (w * dy**2).sum())
    if not denominator > 0:
        raise UndefinedResultError("zero variance")
    return float((w * dx * dy).sum() / denominator)


def regression_slope(x, y, w=None) -> float:
    """(Weighted) least-squares slope of y on x"""
    x, y = np.asarray(x, float), np.asarray(y, float)
    w = np.ones_like(x) if w is None else np.asarray(w, float)
    if len(x) < 2:
        raise ValidationError("at least 2 observations are required")
    w = w / w.sum()
    dx = x - (w * x).sum()
    sxx = (w * dx**2).sum()
    if not sxx > 0:
        raise UndefinedResultError("x is constant")
    return float((w * dx * (y - (w * y).sum())).sum() / sxx)


def steiger_test(r12, r13, r23, n) -> StatResult:
    """Two-tailed test of two dependent correlations sharing variable 1

    Fisher-transformed difference with the asymptotic covariance of the two
    correlations evaluated at their mean.
    """
    for r in (r12, r13, r23):
        if not abs(r) < 1:
            raise DegenerateInputError("correlations must lie strictly within (-1, 1)")
    if n < 4:
        raise ValidationError("at least 4 observations are required")
    rm2 = ((r12 + r13) / 2) ** 2
    psi = r23 * (1 - 2 * rm2) - 0.5 * rm2 * (1 - 2 * rm2 - r23**2)
    c = psi / (1 - rm2) ** 2
    z = (np.arctanh(r12) - np.arctanh(r13)) * np.sqrt(n - 3) / np.sqrt(2 - 2 * c)
    p = 2 * stats.norm.sf(abs(z))
    return StatResult(float(z), float(min(p, 1.0)), int(n), "steiger")


def icc_oneway(a, b) -> float:
    """One-way random, single-measure intraclass correlation of paired measurements"""
    data = np.column_stack([np.asarray(a, float), np.asarray(b, float)])
    n, k = data.shape
    if n < 2:
        raise ValidationError("at least 2 pairs are required")
    means = data.mean(axis=1)
    msb = k * ((means - data.mean()) ** 2).sum() / (n - 1)
    msw = ((data - means[:, None]) ** 2).sum() / (n * (k - 1))
    if not msb + (k - 1) * msw > 0:
        raise UndefinedResultError("zero variance")
    return float((msb - msw) / (msb + (k - 1) * msw))


def pairwise_distances(volumes) -> np.ndarray:
    """Euclidean distances between all image pairs (condensed, pair order of combinations)"""
    flat = [_array(v).ravel() for v in volumes]
    return np.array([np.linalg.norm(u - v) for u, v in combinations(flat, 2)])


def distance_preservation(before, after, groups=None) -> dict:
    """Per-group agreement of pairwise image distances before and after harmonization

    Distances are normalized by the group's mean distance.

    Returns
    -------
    dict
        group to ``{"r", "icc", "n", "distances"}`` (normalized distances before and
        after); groups with fewer than 3 images are skipped
    """
    if len(before) != len(after):
        raise ValidationError("before and after must hold the same images")
    groups = np.zeros(len(before), dtype=int) if groups is None else np.asarray(groups)
    results = {}
    for group in sorted(set(groups.tolist()), key=str):
        idx = np.flatnonzero(groups == group)
        if len(idx) < 3:
            warning(f"distance preservation: group {group} has fewer than 3 images, skipped")
            continue
        d0 = pairwise_distances([before[i] for i in idx])
        d1 = pairwise_distances([after[i] for i in idx])
        d0, d1 = d0 / d0.mean(), d1 / d1.mean()
        results[group] = dict(
            r=pearson(d0, d1), icc=icc_oneway(d0, d1), n=int(len(idx)), distances=(d0, d1)
        )
    return results


# Tests
# -----


@dataclass
class ClusteredSample:
    """Paired differences grouped by cluster (subject)"""

    differences: np.ndarray
    clusters: np.ndarray = None
    """cluster id of each difference, by default one cluster per difference"""

    def __post_init__(self):
        self.differences = np.asarray(self.differences, dtype=float)
        if self.clusters is None:
            self.clusters = np.arange(len(self.differences))
        self.clusters = np.asarray(self.clusters)
        if len(self.clusters) != len(self.differences):
            raise ValidationError("one cluster id per difference is required")

    def signed_rank_sums(self) -> np.ndarray:
        """Per-cluster sums of signed ranks (ranks over all nonzero differences)"""
        d = self.differences
        nonzero = d != 0
        signed = np.zeros_like(d)
        signed[nonzero] = np.sign(d[nonzero]) * stats.rankdata(np.abs(d[nonzero]))
        _, inverse = np.unique(self.clusters.astype(str), return_inverse=True)
        sums = np.bincount(inverse, weights=signed)
        has_nonzero = np.bincount(inverse, weights=nonzero.astype(float)) > 0
        return sums[has_nonzero]


def sign_flip_pvalue(sums) -> float:
    """Two-tailed p of ``sum(sums)`` over all ``2**n`` sign assignments of the cluster sums"""
    sums = np.asarray(sums, dtype=float)
    totals = np.array(list(product((1.0, -1.0), repeat=len(sums)))) @ sums
    t = abs(sums.sum())
    return float(np.mean(np.abs(totals) >= t - 1e-9 * max(t, 1.0)))


def clustered_wilcoxon(sample: ClusteredSample, exact=None) -> StatResult:
    """Signed-rank test for clustered data

    The statistic sums signed ranks over clusters; its variance under cluster-wise
    sign symmetry is the sum of squared cluster sums. The reported statistic is the
    standardized sum. The two-tailed p enumerates every cluster sign flip when
    ``exact`` (by default up to ``EXACT_CLUSTERS`` clusters) and uses the normal
    approximation without continuity correction otherwise.
    """
    if not (sample.differences != 0).any():
        raise UndefinedResultError("all differences are zero")
    sums = sample.signed_rank_sums()
    if len(sums) < 2:
        raise ValidationError("at least 2 clusters with nonzero differences are required")
    if exact is None:
        exact = len(sums) <= EXACT_CLUSTERS
    t = sums.sum()
    variance = (sums**2).sum()
    z = t / np.sqrt(variance)
    if exact:
        return StatResult(float(z), sign_flip_pvalue(sums), int(len(sums)), "clustered_wilcoxon_exact")
    p = 2 * stats.norm.sf(abs(z))
    return StatResult(float(z), float(min(p, 1.0)), int(len(sums)), "clustered_wilcoxon")


def benjamini_hochberg(p) -> np.ndarray:
    """Step-up adjusted p-values, in input order"""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        return p
    if (p < 0).any() or (p > 1).any() or not np.isfinite(p).all():
        raise ValidationError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adjusted, 1.0)
    return out


def cohens_d(group_a, group_b) -> float:
    """Mean difference over the pooled standard deviation (n_a + n_b - 2 denominator)"""
    a, b = np.asarray(group_a, float), np.asarray(group_b, float)
    if len(a) < 2 or len(b) < 2:
        raise ValidationError("each group needs at least 2 observations")
    pooled = np.sqrt(
        ((len(a) - 1) * a.var(ddof=1) + (len(b) - 1) * b.var(ddof=1)) / (len(a) + len(b) - 2)
    )
    if not pooled > 0:
        raise UndefinedResultError("zero pooled standard deviation")
    return float((a.mean() - b.mean()) / pooled)


# Predictions
# -----------


def r2_score(y, y_pred) -> float:
    y, y_pred = np.asarray(y, float), np.asarray(y_pred, float)
    total = ((y - y.mean()) ** 2).sum()
    if not total > 0:
        raise UndefinedResultError("targets are constant")
    return float(1 - ((y - y_pred) ** 2).sum() / total)


def mean_absolute_error(y, y_pred) -> float:
    return float(np.mean(np.abs(np.asarray(y, float) - np.asarray(y_pred, float))))


def accuracy(y, y_pred) -> float:
    y, y_pred = np.asarray(y), np.asarray(y_pred)
    if len(y) == 0:
        raise ValidationError("no predictions")
    return float(np.mean(y == y_pred))


def roc_auc(y, score) -> float:
    """Area under the ROC curve of binary labels ``y`` (ties count one half)"""
    y, score = np.asarray(y).astype(bool), np.asarray(score, dtype=float)
    if len(y) != len(score):
        raise ValidationError("one score per label is required")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedResultError("both classes are required")
    ranks = stats.rankdata(score)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# Site effects
# ------------


def brain_histogram(vol: Volume, bins=64, range=None) -> np.ndarray:
    """Normalized histogram of brain intensities"""
    brain = vol.data[vol.mask]
    if range is None:
        range = np.percentile(brain, (0.5, 99.5))
    counts, _ = np.histogram(brain, bins=bins, range=range)
    total = counts.sum()
    return counts / total if total else counts.astype(float)


def site_classification_accuracy(features, sites) -> float:
    """Leave-one-out accuracy of a nearest-centroid site classifier"""
    features = np.asarray(features, dtype=float)
    sites = np.asarray(sites).astype(str)
    labels = np.unique(sites)
    if len(labels) < 2:
        raise ValidationError("at least two sites are required")
    correct = 0
    for i in range(len(features)):
        keep = np.arange(len(features)) != i
        best, best_distance = None, np.inf
        for label in labels:
            members = keep & (sites == label)
            if not members.any():
                continue
            distance = np.linalg.norm(features[i] - features[members].mean(axis=0))
            if distance < best_distance:
                best, best_distance = label, distance
        correct += best == sites[i]
    return correct / len(features)
