"""Age-balanced sampling of source-site images.

Each source image is drawn with a probability proportional to the reference share of
its age bin divided by the number of source images in that bin, so that the sampled
ages follow the reference distribution over the bins the source site covers.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from iguane.console_utils import warning
from iguane.errors import ValidationError

AGE_LIMITS = (18.0, 80.0)


def default_bin_edges(width=5, low=AGE_LIMITS[0], high=AGE_LIMITS[1]):
    """Bins of ``width`` years from ``low``, the last one clipped at ``high``"""
    edges = np.arange(low, high, width, dtype=float)
    return tuple(np.append(edges, high))


def age_bins(ages, bin_edges):
    """Bin index of each age (the last bin includes its upper edge)"""
    ages = np.asarray(ages, dtype=float)
    edges = np.asarray(bin_edges, dtype=float)
    idx = np.searchsorted(edges, ages, side="right") - 1
    idx[ages == edges[-1]] = len(edges) - 2
    outside = (ages < edges[0]) | (ages > edges[-1]) | ~np.isfinite(ages)
    return idx, outside


def total_variation(p, q) -> float:
    return float(0.5 * np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())


@dataclass(frozen=True, eq=False)
class SamplingPlan:
    """Per-image draw probabilities of one source site

    Plans are immutable; draws use caller-owned random generators.
    """

    image_ids: tuple
    weights: np.ndarray
    bin_edges: tuple = field(default_factory=default_bin_edges)
    ages: np.ndarray = None
    reference_histogram: np.ndarray = None
    """reference age distribution restricted to covered bins (None for uniform plans)"""
    uncovered_mass: float = 0.0
    """reference mass that fell in bins without source images (redistributed)"""
    no_overlap: bool = False
    """no reference mass in any covered bin: the plan fell back to uniform"""

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        if len(weights) != len(self.image_ids):
            raise ValidationError("one weight per image is required")
        if (weights < 0).any() or not np.isclose(weights.sum(), 1.0):
            raise ValidationError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return len(self.image_ids)

    @property
    def uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1 / len(self.weights)))

    def weight(self, image_id) -> float:
        return float(self.weights[list(self.image_ids).index(image_id)])

    def draw(self, rng: np.random.Generator, size=None):
        """Image id(s) drawn with probability ``weights``"""
        p = self.weights / self.weights.sum()
        idx = rng.choice(len(self.image_ids), size=size, p=p)
        if size is None:
            return self.image_ids[int(idx)]
        return [self.image_ids[i] for i in np.atleast_1d(idx)]

    def expected_histogram(self, ages=None):
        """Expected distribution of sampled ages over the bins"""
        ages = self.ages if ages is None else ages
        if ages is None:
            raise ValidationError("image ages are required")
        idx, _ = age_bins(ages, self.bin_edges)
        return np.bincount(idx, weights=self.weights, minlength=len(self.bin_edges) - 1)

    def to_csv(self, path):
        pd.DataFrame({"image_id": list(self.image_ids), "weight": self.weights}).to_csv(
            path, index=False
        )


def compute_sampling_weights(
    source_ages, reference_ages, bin_edges=None, image_ids=None
) -> SamplingPlan:
    """Sampling plan matching a source site's ages to the reference distribution

    Parameters
    ----------
    source_ages : list
        ages of the source site images
    reference_ages : list
        ages of the reference site images
    bin_edges : tuple, optional
        ascending age bin edges, by default :py:func:`default_bin_edges`
    image_ids : list, optional
        identifiers of the source images, by default their indices

    Returns
    -------
    SamplingPlan
        weights ``p'(bin) / count(bin)`` where ``p'`` is the reference histogram
        renormalized over the bins holding source images

    Raises
    ------
    ValidationError
        if a list is empty or a source age falls outside the bins
    """
    source_ages = np.asarray(source_ages, dtype=float)
    reference_ages = np.asarray(reference_ages, dtype=float)
    if source_ages.size == 0 or reference_ages.size == 0:
        raise ValidationError("source and reference ages must be non-empty")
    bin_edges = tuple(default_bin_edges() if bin_edges is None else bin_edges)
    if np.any(np.diff(bin_edges) <= 0):
        raise ValidationError("bin edges must be strictly ascending")
    if image_ids is None:
        image_ids = list(range(len(source_ages)))
    if len(image_ids) != len(source_ages):
        raise ValidationError("one image id per source age is required")

    n_bins = len(bin_edges) - 1
    source_bins, outside = age_bins(source_ages, bin_edges)
    if outside.any():
        raise ValidationError(
            f"source age(s) {source_ages[outside].tolist()} outside the bins"
        )
    reference_bins, ref_outside = age_bins(reference_ages, bin_edges)
    reference_bins = reference_bins[~ref_outside]
    if reference_bins.size == 0:
        raise ValidationError("no reference age falls within the bins")

    counts = np.bincount(source_bins, minlength=n_bins)
    reference = np.bincount(reference_bins, minlength=n_bins) / reference_bins.size
    covered = counts > 0
    covered_mass = reference[covered].sum()

    if covered_mass == 0:
        warning("no reference image in the age bins of this site: uniform sampling")
        n = len(source_ages)
        return SamplingPlan(
            tuple(image_ids),
            np.full(n, 1 / n),
            bin_edges,
            source_ages,
            None,
            uncovered_mass=1.0,
            no_overlap=True,
        )

    target = np.where(covered, reference / covered_mass, 0.0)
    weights = target[source_bins] / counts[source_bins]
    return SamplingPlan(
        tuple(image_ids),
        weights / weights.sum(),
        bin_edges,
        source_ages,
        target,
        uncovered_mass=float(1 - covered_mass),
    )


def uniform_plan(image_ids, ages=None, bin_edges=None) -> SamplingPlan:
    """Equiprobable sampling"""
    n = len(image_ids)
    if n == 0:
        raise ValidationError("image_ids must be non-empty")
    return SamplingPlan(
        tuple(image_ids),
        np.full(n, 1 / n),
        tuple(default_bin_edges() if bin_edges is None else bin_edges),
        None if ages is None else np.asarray(ages, dtype=float),
    )
