"""Intensity normalization baselines and predictor input scaling."""

from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
from scipy.interpolate import interp1d
from scipy.ndimage import gaussian_filter1d
from scipy.signal import find_peaks

from iguane.blocks.preprocessing import _to_model_space
from iguane.core import Block, Space, Volume
from iguane.errors import DegenerateInputError, SpaceError, ValidationError

__all__ = [
    "StandardScale",
    "learn_standard_scale",
    "histogram_match",
    "whitestripe",
    "rescale_for_predictor",
    "HistogramMatching",
    "WhiteStripe",
    "RescaleForPredictor",
]

LANDMARKS = (1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0)
HISTOGRAM_BINS = 256
HISTOGRAM_SMOOTHING = 2.0
STRIPE_WIDTH = 0.05

HM_RANGE = (-0.5, 0.5)
WS_STRIPE = (0.7, 0.01)


class PredictorScaling(str, Enum):
    PREPROC = "preproc"
    IGUANE = "iguane"
    HM = "hm"
    WS = "ws"


def _brain(vol):
    if not vol.mask.any():
        raise DegenerateInputError("brain mask is empty")
    return vol.data[vol.mask]


# Histogram matching
# ------------------


@dataclass(frozen=True, eq=False)
class StandardScale:
    """Standard scale of histogram matching: landmark percentiles and target intensities"""

    percentiles: tuple = LANDMARKS
    targets: tuple = None

    def __post_init__(self):
        percentiles = tuple(float(p) for p in self.percentiles)
        targets = tuple(float(t) for t in self.targets)
        if len(percentiles) != len(targets):
            raise ValidationError("one target per landmark percentile is required")
        if np.any(np.diff(percentiles) <= 0):
            raise ValidationError("landmark percentiles must be strictly increasing")
        if np.any(np.diff(targets) <= 0):
            raise DegenerateInputError("standard scale targets must be strictly increasing")
        object.__setattr__(self, "percentiles", percentiles)
        object.__setattr__(self, "targets", targets)

    def to_csv(self, path):
        pd.DataFrame({"percentile": self.percentiles, "target": self.targets}).to_csv(
            path, index=False
        )

    @classmethod
    def from_csv(cls, path):
        df = pd.read_csv(path)
        return cls(tuple(df["percentile"]), tuple(df["target"]))


def landmarks(vol: Volume, percentiles=LANDMARKS) -> np.ndarray:
    """Brain intensity percentiles"""
    return np.percentile(_brain(vol), percentiles)


def learn_standard_scale(ref_volumes, percentiles=LANDMARKS) -> StandardScale:
    """Average brain landmarks of the reference volumes"""
    if len(ref_volumes) == 0:
        raise ValidationError("at least one reference volume is required")
    targets = np.mean([landmarks(v, percentiles) for v in ref_volumes], axis=0)
    return StandardScale(tuple(percentiles), tuple(targets))


def _histogram_match(vol, scale):
    if vol.space == Space.MODEL:
        raise SpaceError("histogram matching applies to raw or preprocessed volumes")
    source = landmarks(vol, scale.percentiles)
    if np.any(np.diff(source) <= 0):
        raise DegenerateInputError("volume has equal landmark percentiles")
    mapping = interp1d(source, scale.targets, fill_value="extrapolate")
    vol.data = np.where(vol.mask, mapping(vol.data), 0.0)
    vol.background_value = 0.0
    vol.normalization = "hm"


def histogram_match(vol: Volume, scale: StandardScale) -> Volume:
    """Piecewise-linear map of the brain landmarks onto the standard scale

    Beyond the extreme landmarks the first and last segments are extended linearly.
    The background is set to 0.
    """
    vol = vol.copy()
    _histogram_match(vol, scale)
    return vol


# WhiteStripe
# -----------


def white_matter_mode(brain, bins=HISTOGRAM_BINS, smoothing=HISTOGRAM_SMOOTHING) -> float:
    """Last mode of the smoothed brain intensity histogram"""
    lo, hi = float(brain.min()), float(brain.max())
    span = hi - lo
    if not span > 0:
        raise DegenerateInputError("brain intensities are constant")
    # margins so that a mode at the extremes is still a local maximum
    counts, edges = np.histogram(brain, bins=bins, range=(lo - 0.05 * span, hi + 0.05 * span))
    smoothed = gaussian_filter1d(counts.astype(float), smoothing, mode="constant")
    peaks, _ = find_peaks(smoothed, prominence=0.05 * smoothed.max())
    if len(peaks) == 0:
        raise DegenerateInputError("no white matter mode found")
    centers = 0.5 * (edges[1:] + edges[:-1])
    return float(centers[peaks[-1]])


def white_stripe(vol: Volume, width=STRIPE_WIDTH):
    """White matter mode and stripe mask of a volume

    The stripe is unchanged by an affine intensity map, so it can be found again on a
    volume that was already WhiteStripe-normalized.
    """
    brain = _brain(vol)
    mode = white_matter_mode(brain)
    q = np.mean(brain < mode)
    low, high = np.quantile(brain, (max(q - width, 0.0), min(q + width, 1.0)))
    stripe = vol.mask & (vol.data >= low) & (vol.data <= high)
    if not stripe.any():
        raise DegenerateInputError("white stripe is empty")
    return mode, stripe


def _whitestripe(vol, width):
    if vol.space == Space.MODEL:
        raise SpaceError("WhiteStripe applies to raw or preprocessed volumes")
    mode, stripe = white_stripe(vol, width)
    values = vol.data[stripe]
    mu, sigma = float(values.mean()), float(values.std())
    if not sigma > 0:
        raise DegenerateInputError("white stripe has no intensity spread")

    background = (0.0 - mu) / sigma
    vol.data = np.where(vol.mask, (vol.data - mu) / sigma, background)
    vol.background_value = background
    vol.normalization = "ws"
    vol.white_matter_mode = mode
    vol.white_stripe = stripe
    vol.white_stripe_stats = (mu, sigma)


def whitestripe(vol: Volume, width=STRIPE_WIDTH) -> Volume:
    """Z-score a volume by its normal-appearing white matter

    The stripe is the brain voxels whose quantile lies within ``width`` of the quantile
    of the last histogram mode. The stripe mask is kept in ``vol.white_stripe`` and the
    background moves to ``-mean / sd`` of the stripe.
    """
    vol = vol.copy()
    _whitestripe(vol, width)
    return vol


# Predictor scaling
# -----------------


def _affine(vol, a, b):
    vol.data = a * vol.data + b
    vol.background_value = a * vol.background_value + b


def _rescale_for_predictor(vol, method):
    method = PredictorScaling(method)
    if method in (PredictorScaling.PREPROC, PredictorScaling.IGUANE):
        if vol.space == Space.MODEL:
            return
        if vol.normalization != "median":
            raise SpaceError(
                f"{method.value} scaling expects a median-normalized volume, "
                f"got normalization {vol.normalization}"
            )
        _to_model_space(vol)
    elif method == PredictorScaling.HM:
        if vol.normalization != "hm":
            raise SpaceError("hm scaling expects a histogram-matched volume")
        p1, p99 = np.percentile(_brain(vol), (1, 99))
        if not p99 > p1:
            raise DegenerateInputError("brain p1 and p99 are equal")
        a = (HM_RANGE[1] - HM_RANGE[0]) / (p99 - p1)
        _affine(vol, a, HM_RANGE[0] - a * p1)
    else:
        if vol.normalization != "ws":
            raise SpaceError("ws scaling expects a WhiteStripe-normalized volume")
        # volumes read back from disk lost their stripe mask
        stripe = vol.computed.get("white_stripe")
        if stripe is None:
            _, stripe = white_stripe(vol)
        values = vol.data[stripe]
        mean, sd = WS_STRIPE
        if not values.std() > 0:
            raise DegenerateInputError("white stripe has no intensity spread")
        a = sd / values.std()
        _affine(vol, a, mean - a * values.mean())


def rescale_for_predictor(vol: Volume, method) -> Volume:
    """Affine intensity scaling fed to predictors, per normalization method

    - ``preproc`` / ``iguane``: ``data / 500 - 1`` (median 0, background -1)
    - ``hm``: brain p1 and p99 at -0.5 and 0.5
    - ``ws``: white stripe mean 0.7 and standard deviation 0.01
    """
    vol = vol.copy()
    _rescale_for_predictor(vol, method)
    return vol


# Blocks
# ------


class HistogramMatching(Block):
    """Histogram matching on a learned :py:class:`StandardScale`

    Parameters
    ----------
    scale : StandardScale
        standard scale, see :py:func:`learn_standard_scale`
    """

    def __init__(self, scale: StandardScale, name=None):
        super().__init__(name=name)
        self.scale = scale

    def run(self, volume):
        _histogram_match(volume, self.scale)

    @property
    def citations(self):
        return super().citations + ["histogram_matching"]


class WhiteStripe(Block):
    def __init__(self, width=STRIPE_WIDTH, name=None):
        super().__init__(name=name)
        self.width = width

    def run(self, volume):
        _whitestripe(volume, self.width)

    @property
    def citations(self):
        return super().citations + ["whitestripe"]


class RescaleForPredictor(Block):
    def __init__(self, method="iguane", name=None):
        super().__init__(name=name)
        self.method = PredictorScaling(method)

    def run(self, volume):
        _rescale_for_predictor(volume, self.method)
