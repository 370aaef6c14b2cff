from time import time

from iguane.console_utils import warning
from iguane.core.volume import Volume


class Block(object):
    """Single unit of processing acting on the :py:class:`~iguane.Volume` object

    Reading, processing and writing :py:class:`~iguane.Volume` attributes. When placed in
    a sequence, it goes through two steps:

        1. :py:meth:`~iguane.Block.run` on each volume fed to the :py:class:`~iguane.Sequence`
        2. :py:meth:`~iguane.Block.terminate` called after the :py:class:`~iguane.Sequence` is terminated

    Parameters
    ----------
    name : str, optional
        name of the block, by default None

    All iguane blocks must be child of this parent class
    """

    def __init__(self, name=None, verbose=False):
        self.name = name
        self.processing_time = 0
        self.runs = 0
        self.in_sequence = False
        self.verbose = verbose

        # blocks holding data accumulated over volumes cannot run in worker processes
        self._data_block = False

    def _run(self, volume: Volume):
        t0 = time()
        if not isinstance(volume, Volume):
            raise TypeError("block must be run on a Volume")
        self.run(volume)
        self.processing_time += time() - t0
        self.runs += 1

    def run(self, volume: Volume):
        """Running on a volume (must be overwritten when subclassed)

        Parameters
        ----------
        volume : iguane.Volume
            volume to be processed
        """
        raise NotImplementedError()

    def terminate(self):
        """Method called after block's :py:class:`~iguane.Sequence` is finished (if any)"""
        pass

    @property
    def citations(self) -> list:
        """
        Returns a list of the packages and methods used by the block.

        Returns
        -------
        list
            keys of :py:data:`iguane.citations.citations`
        """
        return ["iguane", "numpy", "scipy"]

    def __call__(self, volume):
        volume_copy = volume.copy()
        self.run(volume_copy)
        if volume_copy.discard:
            warning(f"{self.__class__.__name__} discarded Volume")
        return volume_copy
