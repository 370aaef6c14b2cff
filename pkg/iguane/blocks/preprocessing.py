import tempfile
from pathlib import Path

import numpy as np

from iguane.console_utils import info
from iguane.core import Block, Space, Volume, brain_median
from iguane.core.volume import BACKGROUND
from iguane.errors import (
    AdapterError,
    DegenerateInputError,
    ExclusionError,
    SpaceError,
    ValidationError,
)
from iguane.io.nifti import load_volume, mask_path, stem
from iguane.tools import ToolConfig

__all__ = [
    "CropBackground",
    "MedianNormalize",
    "ToModelSpace",
    "FromModelSpace",
    "NeutralizeBackground",
    "ApplyMask",
    "crop_background",
    "median_normalize",
    "to_model_space",
    "from_model_space",
    "neutralize_background",
    "apply_mask",
    "pad_to_multiple",
    "unpad",
    "preprocess_external",
]

TARGET_DIMS = (160, 192, 160)
MEDIAN_INTENSITY = 500.0


def _check_space(vol, *spaces, operation=""):
    if vol.space not in spaces:
        expected = " or ".join(s.value for s in spaces)
        raise SpaceError(
            f"{operation} expects a volume in {expected} space, got {vol.space.value}"
        )


# Cropping
# --------


def _empty_slices(occupied, axis):
    """Number of empty slices at the low and high faces of ``axis``"""
    others = tuple(a for a in range(3) if a != axis)
    profile = occupied.any(axis=others)
    if not profile.any():
        return len(profile), len(profile)
    filled = np.flatnonzero(profile)
    return int(filled[0]), int(len(profile) - 1 - filled[-1])


def _allocate(need, low, high):
    """Split ``need`` removals between two faces with ``low`` and ``high`` empty slices

    Slices go one at a time to the face with more remaining empty slices, alternating
    (low first) on ties.
    """
    cut_low = cut_high = 0
    turn_low = True
    for _ in range(need):
        left_low, left_high = low - cut_low, high - cut_high
        if left_low <= 0 and left_high <= 0:
            return None
        if left_low > left_high or (left_low == left_high and turn_low):
            cut_low += 1
        else:
            cut_high += 1
        if left_low == left_high:
            turn_low = not turn_low
    return cut_low, cut_high


def _crop_background(vol, target_dims):
    _check_space(vol, Space.RAW, Space.PREPROCESSED, operation="crop_background")
    target_dims = tuple(int(t) for t in target_dims)
    if len(target_dims) != 3:
        raise ValidationError("target_dims must hold 3 integers")
    if any(t > n for t, n in zip(target_dims, vol.shape)):
        raise ValidationError(
            f"target dimensions {target_dims} exceed volume dimensions {vol.shape}"
        )

    occupied = (vol.data != 0) | vol.mask
    slices, lows = [], []
    for axis, (n, t) in enumerate(zip(vol.shape, target_dims)):
        low, high = _empty_slices(occupied, axis)
        cut = _allocate(n - t, low, high)
        if cut is None:
            raise ExclusionError(
                f"not enough background slices on axis {axis} to crop {n} to {t} "
                f"({low} + {high} available)"
            )
        slices.append(slice(cut[0], n - cut[1]))
        lows.append(cut[0])

    vol.data = vol.data[tuple(slices)].copy()
    vol.mask = vol.mask[tuple(slices)].copy()
    vol.affine = vol.affine.copy()
    vol.affine[:3, 3] += vol.affine[:3, :3] @ np.array(lows, dtype=float)


def crop_background(vol: Volume, target_dims=TARGET_DIMS) -> Volume:
    """Remove empty slices from the six faces until ``target_dims`` is reached

    An empty slice holds only zero intensities and no mask voxel. On each axis, slices
    are taken from the face with more empty slices first, alternating on ties.

    Parameters
    ----------
    vol : Volume
        raw or preprocessed volume
    target_dims : tuple, optional
        output dimensions, by default (160, 192, 160)

    Returns
    -------
    Volume
        cropped copy, affine origin shifted accordingly

    Raises
    ------
    ExclusionError
        if some axis lacks the background slices to reach its target
    """
    vol = vol.copy()
    _crop_background(vol, target_dims)
    return vol


# Intensity scaling
# -----------------


def _median_normalize(vol):
    _check_space(vol, Space.RAW, Space.PREPROCESSED, operation="median_normalize")
    if not vol.mask.any():
        raise DegenerateInputError("brain mask is empty")
    median = brain_median(vol)
    if not median > 0:
        raise DegenerateInputError(f"non-positive brain median ({median:.4g})")
    vol.data = vol.data / median * MEDIAN_INTENSITY
    vol.data[~vol.mask] = 0.0
    vol.space = Space.PREPROCESSED
    vol.background_value = 0.0
    vol.normalization = "median"


def median_normalize(vol: Volume) -> Volume:
    """Divide intensities by the brain median and multiply by 500, background at 0"""
    vol = vol.copy()
    _median_normalize(vol)
    return vol


def _to_model_space(vol):
    _check_space(vol, Space.PREPROCESSED, operation="to_model_space")
    vol.data = vol.data / MEDIAN_INTENSITY - 1.0
    vol.background_value = vol.background_value / MEDIAN_INTENSITY - 1.0
    vol.space = Space.MODEL


def to_model_space(vol: Volume) -> Volume:
    """data / 500 - 1: background at -1, brain median at 0"""
    vol = vol.copy()
    _to_model_space(vol)
    return vol


def _from_model_space(vol):
    _check_space(vol, Space.MODEL, operation="from_model_space")
    vol.data = (vol.data + 1.0) * MEDIAN_INTENSITY
    vol.background_value = (vol.background_value + 1.0) * MEDIAN_INTENSITY
    vol.space = Space.PREPROCESSED


def from_model_space(vol: Volume) -> Volume:
    """(data + 1) * 500, inverse of :py:func:`to_model_space`"""
    vol = vol.copy()
    _from_model_space(vol)
    return vol


def _neutralize_background(vol):
    _check_space(vol, Space.MODEL, operation="neutralize_background")
    median = brain_median(vol) if vol.mask.any() else 0.0
    vol.data[~vol.mask] = median


def neutralize_background(vol: Volume) -> Volume:
    """Set non-mask voxels to the brain median (0 in model space) before a network pass"""
    vol = vol.copy()
    _neutralize_background(vol)
    return vol


def _apply_mask(vol, mask):
    mask = np.asarray(mask).astype(bool)
    if mask.shape != vol.shape:
        raise ValidationError(
            f"mask dimensions {mask.shape} differ from volume dimensions {vol.shape}"
        )
    vol.data = np.where(mask, vol.data, vol.background_value)
    vol.mask = mask.copy()


def apply_mask(vol: Volume, mask) -> Volume:
    """Set voxels outside ``mask`` to the background value of the current space"""
    vol = vol.copy()
    _apply_mask(vol, mask)
    return vol


# Padding
# -------


def pad_to_multiple(vol: Volume, multiple=16):
    """Pad symmetrically with background so every dimension is divisible by ``multiple``

    Returns
    -------
    tuple
        padded copy and the ``((before, after),) * 3`` widths to give :py:func:`unpad`
    """
    pads = []
    for n in vol.shape:
        total = (-n) % multiple
        pads.append((total // 2, total - total // 2))
    pads = tuple(pads)

    padded = vol.copy()
    if any(sum(p) for p in pads):
        padded.data = np.pad(vol.data, pads, constant_values=vol.background_value)
        padded.mask = np.pad(vol.mask, pads, constant_values=False)
        padded.affine = vol.affine.copy()
        padded.affine[:3, 3] -= vol.affine[:3, :3] @ np.array([p[0] for p in pads], float)
    return padded, pads


def unpad(vol: Volume, pads) -> Volume:
    """Exact inverse of :py:func:`pad_to_multiple`"""
    slices = tuple(slice(b, n - a) for (b, a), n in zip(pads, vol.shape))
    out = vol.copy()
    out.data = vol.data[slices].copy()
    out.mask = vol.mask[slices].copy()
    out.affine = vol.affine.copy()
    out.affine[:3, 3] += vol.affine[:3, :3] @ np.array([p[0] for p in pads], float)
    return out


# External tools
# --------------


def preprocess_external(
    path, tool_config: ToolConfig = None, target_dims=TARGET_DIMS, work_dir=None
) -> Volume:
    """Full preprocessing of one file: external tools, then cropping and median scaling

    Skull-stripping, bias correction and rigid registration are delegated to the
    commands of ``tool_config`` (by default the one named by ``IGUANE_TOOLS``). When the
    configuration declares inputs as pre-stripped, only cropping and median
    normalization are applied. Without a mask file, the brain mask is the support of
    non-zero intensities.

    Parameters
    ----------
    path : str or Path
        input NIfTI file
    tool_config : ToolConfig, optional
        external tools, by default :py:meth:`ToolConfig.from_env`
    target_dims : tuple, optional
        cropping target, by default (160, 192, 160); None to skip cropping
    work_dir : str or Path, optional
        where intermediate files are kept when ``keep_intermediate`` is set

    Raises
    ------
    AdapterError
        if an external command fails
    ExclusionError
        if the volume cannot be cropped to ``target_dims``
    """
    tools = tool_config if tool_config is not None else ToolConfig.from_env()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")

    with tempfile.TemporaryDirectory() as tmp:
        work = Path(work_dir) if (tools.keep_intermediate and work_dir) else Path(tmp)
        work.mkdir(parents=True, exist_ok=True)
        current, mask = path, mask_path(path)

        for step, _ in tools.steps:
            output = work / f"{stem(path)}_{step}.nii.gz"
            result = tools.run(step, input=current, output=output, mask=mask)
            if not output.exists():
                raise AdapterError(
                    " ".join(result.args), result.returncode, f"{output} was not written"
                )
            if step == "skull_strip":
                mask = mask_path(output)
            elif step == "registration":
                # the skull-stripping mask lives in the native grid
                mask = mask_path(output)
            current = output
            info(f"{path.name}: {step} done")

        vol = load_volume(current, mask=mask)
        if not mask.exists():
            vol.mask = vol.data != 0

    vol.metadata["path"] = str(path)
    if target_dims is not None:
        _crop_background(vol, target_dims)
    _median_normalize(vol)
    return vol


# Blocks
# ------


class CropBackground(Block):
    """Crop empty slices down to ``target_dims``, discarding volumes that cannot be cropped

    Parameters
    ----------
    target_dims : tuple, optional
        output dimensions, by default (160, 192, 160)
    """

    def __init__(self, target_dims=TARGET_DIMS, name=None):
        super().__init__(name=name)
        self.target_dims = tuple(target_dims)

    def run(self, volume):
        try:
            _crop_background(volume, self.target_dims)
        except ExclusionError as err:
            volume.discard = True
            volume.discard_reason = f"ExclusionError: {err}"


class MedianNormalize(Block):
    def run(self, volume):
        _median_normalize(volume)


class ToModelSpace(Block):
    def run(self, volume):
        _to_model_space(volume)


class FromModelSpace(Block):
    def run(self, volume):
        _from_model_space(volume)


class NeutralizeBackground(Block):
    def run(self, volume):
        _neutralize_background(volume)


class ApplyMask(Block):
    """Apply a mask, by default the volume's own mask (restoring its background)

    Parameters
    ----------
    mask : np.ndarray, optional
        boolean mask, by default None (``volume.mask``)
    """

    def __init__(self, mask=None, name=None):
        super().__init__(name=name)
        self.mask = mask

    def run(self, volume):
        _apply_mask(volume, volume.mask if self.mask is None else self.mask)
