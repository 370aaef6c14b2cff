from functools import partial
from pathlib import Path

import numpy as np

from iguane.core import Block, Volume
from iguane.io.nifti import save_volume, stem

__all__ = ["Apply", "Get", "WriteTo"]


class Apply(Block):
    """Apply a function to a volume.

    Parameters
    ----------
    function : callable
        function to apply of the form callable(volume) -> None
    """

    def __init__(self, function: callable, name: str = None):
        super().__init__(name=name)
        self.function = function

    def run(self, volume):
        self.function(volume)


class Get(Block):
    def __init__(self, *attributes, name: str = "get", arrays: bool = False, **getters):
        """Retrieve and store properties from a :py:class:`~iguane.Volume`.

        Volumes loaded from paths by a :py:class:`~iguane.Sequence` are dropped after
        processing; this block retains what is needed from each of them. After the
        sequence, ``values`` maps every requested name to a list with one entry per
        volume that reached the block.

        Parameters
        ----------
        *attributes: str
            names of volume attributes (``"metadata:key"`` reads a metadata entry)
        name : str, optional
            name of the block, by default "get"
        arrays : bool, optional
            whether to convert each list of values to a numpy array, by default False
        **getters: function
            name and functions of the form callable(volume) -> value

        Example
        -------
        .. code-block:: python

            get = Get("i", "subject_id", age="metadata:age")
        """
        super().__init__(name=name)
        new_getters = {}

        def get_from_metadata(volume, key=None):
            return volume.metadata.get(key)

        def get(volume, key=None):
            return getattr(volume, key)

        for attr in attributes:
            if attr.startswith("metadata:"):
                key = attr.split("metadata:")[-1]
                new_getters[key] = partial(get_from_metadata, key=key)
            else:
                new_getters[attr] = partial(get, key=attr)

        for key, getter in getters.items():
            if isinstance(getter, str) and getter.startswith("metadata:"):
                getters[key] = partial(get_from_metadata, key=getter.split("metadata:")[-1])

        getters.update(new_getters)
        self.getters = getters
        self.values = {name: [] for name in getters.keys()}
        self.arrays = arrays
        self._data_block = True

    def run(self, volume: Volume):
        for name, get in self.getters.items():
            self.values[name].append(get(volume))

    def terminate(self):
        if self.arrays:
            for key, value in self.values.items():
                self.values[key] = np.array(value)

    def __getitem__(self, key):
        return self.values[key]

    def __getattr__(self, key):
        if key != "getters" and key in self.getters.keys():
            return self.values[key]
        else:
            raise AttributeError(key)


class WriteTo(Block):
    def __init__(self, destination, label=None, provenance=None, overwrite=True, name=None):
        """Write volume (and mask sidecar) to NIfTI

        Files go to ``{destination}/{site_id}/{subject_id}.nii.gz`` when both are known,
        ``{destination}/{original stem}.nii.gz`` otherwise. The written path is stored
        in ``volume.output_path``.

        Parameters
        ----------
        destination : str
            destination folder (folder and parents created if not existing)
        label : str, optional
            appended to the file name as ``{name}_{label}.nii.gz``, by default None
        provenance : dict, optional
            ``cfg`` hash and ``seed`` recorded in the NIfTI header, by default None
        overwrite : bool, optional
            whether to overwrite existing files, by default True
        name : str, optional
            name of the block, by default None
        """
        super().__init__(name=name)
        self.destination = Path(destination)
        self.label = label
        self.provenance = provenance
        self.overwrite = overwrite
        self.files = []

    def path(self, volume) -> Path:
        if volume.site_id not in (None, "") and volume.subject_id not in (None, ""):
            folder, name = self.destination / str(volume.site_id), str(volume.subject_id)
        else:
            folder, name = self.destination, stem(volume.metadata.get("path", "volume"))
        if self.label:
            name = f"{name}_{self.label}"
        return folder / f"{name}.nii.gz"

    def run(self, volume):
        path = self.path(volume)
        if path in self.files:
            raise FileExistsError(f"{path} was already written by this block")
        if path.exists() and not self.overwrite:
            raise FileExistsError(f"{path} already exists")
        save_volume(volume, path, self.provenance)
        volume.output_path = str(path)
        self.files.append(path)
