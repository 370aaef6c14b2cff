from copy import deepcopy
from dataclasses import dataclass
from enum import Enum

import matplotlib.pyplot as plt
import numpy as np

from iguane import utils
from iguane.errors import ValidationError


class Space(str, Enum):
    """Intensity space a :py:class:`Volume` lives in"""

    RAW = "raw"
    PREPROCESSED = "preprocessed"
    MODEL = "model_space"


BACKGROUND = {Space.RAW: 0.0, Space.PREPROCESSED: 0.0, Space.MODEL: -1.0}


@dataclass
class Volume:
    """
    Volume object containing a 3D intensity grid, its brain mask and metadata.

    This is a Python Data Class, so that most attributes described below can be used as
    keyword-arguments when instantiated.
    """

    data: np.ndarray = None
    """Voxel intensities (3D)"""

    mask: np.ndarray = None
    """Boolean brain mask, same dimensions as data (all true if not provided)"""

    voxel_size: tuple = (1.0, 1.0, 1.0)
    """Voxel size in mm"""

    space: Space = Space.RAW
    """Intensity space, one of :py:class:`Space`"""

    background_value: float = 0.0
    """Intensity of non-mask voxels in the current space"""

    normalization: str = None
    """Intensity normalization applied so far (``median``, ``hm``, ``ws``)"""

    affine: np.ndarray = None
    """Voxel to world affine (4x4), defaults to a diagonal of voxel_size"""

    metadata: dict = None
    """Volume metadata (subject_id, site_id, age, sex, diagnosis, path...)"""

    discard: bool = False
    """Whether volume has been discarded by a block"""

    computed: dict = None
    """A dictionary containing any user and block-defined attributes"""

    def __post_init__(self):
        if self.data is not None:
            self.data = np.asarray(self.data, dtype=np.float64)
            if self.data.ndim != 3:
                raise ValidationError(
                    f"volume data must be 3D, got shape {self.data.shape}"
                )
            if self.mask is None:
                self.mask = np.ones(self.data.shape, dtype=bool)
            self.mask = np.asarray(self.mask).astype(bool)
            if self.mask.shape != self.data.shape:
                raise ValidationError(
                    f"mask dimensions {self.mask.shape} differ from data dimensions {self.data.shape}"
                )
        self.space = Space(self.space)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if self.affine is None:
            self.affine = np.diag([*self.voxel_size, 1.0])
        if self.metadata is None:
            self.metadata = {}
        if self.computed is None:
            self.computed = {}

    def __setattr__(self, name, value):
        if hasattr(self, name):
            super().__setattr__(name, value)
        else:
            if "computed" in self.__dict__:
                self.computed[name] = value
            else:
                super().__setattr__(name, value)

    def __getattr__(self, name):
        if "computed" not in self.__dict__:
            raise AttributeError(name)
        if name in self.computed:
            return self.computed[name]
        raise AttributeError(f"{name} cannot be interpreted as Volume attribute")

    # deepcopy and pickling (multiprocess) go through __dict__ directly
    def __getstate__(self):
        return self.__dict__

    def __setstate__(self, state):
        self.__dict__.update(state)

    def copy(self):
        """Copy of volume object

        Returns
        -------
        Volume
            copied object
        """
        return deepcopy(self)

    def __copy__(self):
        return self.copy()

    @property
    def shape(self):
        """Volume.data shape"""
        return self.data.shape

    @property
    def brain(self):
        """Intensities of mask voxels"""
        return self.data[self.mask]

    @property
    def subject_id(self):
        return self.metadata.get("subject_id")

    @property
    def site_id(self):
        return self.metadata.get("site_id")

    def writeto(self, path, provenance=None):
        """Write volume (and mask sidecar) as NIfTI

        Parameters
        ----------
        path : str or Path
            destination ``.nii.gz`` file
        provenance : dict, optional
            ``cfg`` and ``seed`` stored in the header description, by default None
        """
        from iguane.io.nifti import save_volume

        save_volume(self, path, provenance)

    def show(self, axis=2, index=None, ax=None, cmap="Greys_r", contrast=0.01, **kwargs):
        """Show a slice of the volume

        Parameters
        ----------
        axis : int, optional
            axis orthogonal to the slice, by default 2
        index : int, optional
            slice index, by default the middle slice
        ax : Axes, optional
            matplotlib Axes in which to plot, by default None
        cmap : str, optional
            matplotlib colormap, by default "Greys_r"
        contrast : float, optional
            fraction of intensities clipped on each side, by default 0.01
        """
        if ax is None:
            ax = plt.figure(figsize=(5, 5)).add_subplot(111)
        if index is None:
            index = self.shape[axis] // 2
        section = np.take(self.data, index, axis=axis)
        ax.imshow(
            utils.z_scale(section, contrast).T, cmap=cmap, origin="lower", **kwargs
        )
        ax.axis("off")
        return ax


def brain_median(vol: Volume) -> float:
    """Median intensity over mask voxels"""
    if not vol.mask.any():
        return float("nan")
    return float(np.median(vol.data[vol.mask]))
