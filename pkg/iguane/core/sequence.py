from collections import OrderedDict
from functools import partial
from pathlib import Path

import multiprocess as mp
import numpy as np
from tabulate import tabulate

from iguane.citations import citations as default_citations
from iguane.console_utils import progress, warning
from iguane.core.volume import Volume
from iguane.errors import ConfigError, IguaneError


def _default_loader(path):
    from iguane.io.nifti import load_volume

    return load_volume(path)


def _load(item, loader):
    """Load a path (or pass a Volume through), turning per-row failures into a discard"""
    if isinstance(item, Volume):
        return item
    try:
        return loader(item)
    except ConfigError:
        raise
    except (IguaneError, OSError) as err:
        volume = Volume(metadata={"path": str(item)}, discard=True)
        volume.discard_block = "loader"
        volume.discard_reason = f"{type(err).__name__}: {err}"
        return volume


def _run_block(block, volume):
    """Run a block on a volume, turning per-row failures into a discard"""
    try:
        block._run(volume)
    except ConfigError:
        raise
    except IguaneError as err:
        volume.discard = True
        volume.discard_reason = f"{type(err).__name__}: {err}"
    if volume.discard:
        volume.discard_block = type(block).__name__
        if "discard_reason" not in volume.computed:
            volume.discard_reason = ""


class Sequence:
    def __init__(self, blocks, name=None):
        """A sequence of :py:class:`Block` objects to sequentially process volumes

        Parameters
        ----------
        blocks : list
            list of :py:class:`Block` objects
        name : str, optional
            name of the sequence, by default None
        """
        self.name = name
        self.volumes = []
        self.blocks_dict = None
        self.blocks = blocks

        self.n_processed_volumes = None
        self.last_volume = None
        self.discards = {}
        self.reasons = {}

    def __getattr__(self, item):
        if item == "blocks_dict":
            raise AttributeError(item)
        try:
            return self.blocks_dict[item]
        except KeyError:
            raise AttributeError(item)

    @property
    def blocks(self):
        """list of :py:class:`Block` objects"""
        return list(self.blocks_dict.values())

    @blocks.setter
    def blocks(self, blocks):
        self.blocks_dict = OrderedDict(
            {
                block.name if block.name is not None else "block{}".format(i): block
                for i, block in enumerate(blocks)
            }
        )

    def _set_blocks_in_sequence(self, in_sequence):
        for b in self.blocks:
            b.in_sequence = in_sequence

    def run(self, volumes, terminate=True, show_progress=True, loader=None):
        """Run the sequence

        Parameters
        ----------
        volumes : list, str, :py:class:`Volume`
            :py:class:`Volume` object or path (single or as a list) to be processed by the sequence
        terminate : bool, optional
            whether to run :py:class:`Sequence.terminate` at the end of the sequence, by default True
        show_progress : bool, optional
            whether to show a progress bar, by default True
        loader : callable, optional
            function loading a path into a :py:class:`Volume`, by default
            :py:func:`iguane.io.load_volume`
        """
        if loader is None:
            loader = _default_loader
        self._set_blocks_in_sequence(True)
        self.volumes = (
            volumes if not isinstance(volumes, (str, Path, Volume)) else [volumes]
        )
        if self.volumes is None or len(self.volumes) == 0:
            raise ValueError("No volumes to process")

        self.progress = progress(show_progress, desc=self.name, unit="volumes")

        self.n_processed_volumes = 0
        self.discards = {}
        self.reasons = {}
        self._run(loader=loader)

        if terminate:
            self.terminate()

        for block_name, discarded in self.discards.items():
            warning(
                f"{block_name} discarded volume{'s' if len(discarded)>1 else ''} {', '.join(discarded)}"
            )

    def _run(self, loader):
        for i, item in enumerate(self.progress(self.volumes, total=len(self.volumes))):
            volume = _load(item, loader)
            volume.i = i
            self.last_volume = volume

            if volume.discard:
                self._add_discard(volume)
            else:
                for block in self.blocks:
                    _run_block(block, volume)
                    if volume.discard:
                        self._add_discard(volume)
                        break

            self.n_processed_volumes += 1

    def terminate(self):
        """Run the :py:class:`Block.terminate` method of all blocks"""
        for block in self.blocks:
            block.terminate()
        self._set_blocks_in_sequence(False)

    def __str__(self):
        total = self.processing_time
        rows = [
            [
                i,
                block.name,
                block.__class__.__name__,
                f"{block.processing_time:.3f} s ({(block.processing_time/total if total else 0)*100:.0f}%)",
            ]
            for i, block in enumerate(self.blocks)
        ]
        headers = ["index", "name", "type", "processing"]

        return tabulate(rows, headers, tablefmt="fancy_grid")

    def __repr__(self) -> str:
        return self.__str__()

    @property
    def processing_time(self):
        """Total processing time of the sequence last run"""
        return np.sum([block.processing_time for block in self.blocks])

    def __getitem__(self, item):
        return self.blocks[item]

    def _add_discard(self, volume):
        block_name = volume.computed.get("discard_block", "unknown")
        i = volume.i
        self.discards.setdefault(block_name, []).append(str(i))
        self.reasons[i] = (block_name, volume.computed.get("discard_reason", ""))

    def citations(self):
        """Return the citations of the sequence

        Returns
        -------
        tuple
            an acknowledgment sentence (LaTeX) and the BibTeX entries
        """
        names = []
        for block in self.blocks:
            names += block.citations
        names = sorted(set(names))

        citation_dict = {
            name: name if name[0] == "@" else default_citations[name] for name in names
        }

        tex_citep = ", ".join(
            [f"{name} \\citep{{{name}}}" for name in citation_dict if name != "iguane"]
        )
        tex = (
            f"This research made use of \\textsf{{iguane}} \\citep{{iguane}} and its "
            f"dependencies ({tex_citep})."
        )

        return tex, "\n\n".join(citation_dict.values())


class SequenceParallel(Sequence):
    """
    A multi-process :py:class:`Sequence` of blocks to be executed in parallel.

    The data_blocks allow blocks carrying large amount of data to be run sequentially
    so that they are not copied from one process to another.

    Parameters
    ----------
    blocks : list
        A list of blocks to be executed in parallel.
    data_blocks : list, optional
        A list of blocks run in the main process on each volume returned by the workers.
    name : str, optional
        A name for the sequence.
    workers : int, optional
        number of worker processes, by default the number of CPUs
    """

    def __init__(self, blocks, data_blocks=None, name="", workers=None):
        super().__init__(blocks, name=name)
        self.workers = workers
        if data_blocks is None:
            self.data = None
            self._has_data = False
        else:
            self.data = Sequence(data_blocks)
            self._has_data = True

    def check_data_blocks(self):
        bad_blocks = sorted({b.__class__.__name__ for b in self.blocks if b._data_block})
        if len(bad_blocks) > 0:
            raise ConfigError(
                f"Data blocks [{', '.join(bad_blocks)}] cannot be used in SequenceParallel, "
                "consider using the data_blocks kwargs"
            )

    def _run(self, loader):
        self.check_data_blocks()

        n = len(self.volumes)
        items = list(enumerate(self.volumes))

        with mp.Pool(processes=self.workers) as pool:
            for volume in self.progress(
                pool.imap(partial(_run_all, blocks=self.blocks, loader=loader), items),
                total=n,
            ):
                self.last_volume = volume
                if not volume.discard and self._has_data:
                    for block in self.data.blocks:
                        _run_block(block, volume)
                        if volume.discard:
                            break
                if volume.discard:
                    self._add_discard(volume)
                self.n_processed_volumes += 1

    def terminate(self):
        if self._has_data:
            self.data.terminate()
        self._set_blocks_in_sequence(False)


def _run_all(item_i, blocks=None, loader=None):
    i, item = item_i
    volume = _load(item, loader)
    volume.i = i

    for block in blocks:
        if volume.discard:
            return volume
        _run_block(block, volume)

    return volume
