from iguane.blocks.preprocessing import (
    _from_model_space,
    _to_model_space,
    pad_to_multiple,
    unpad,
)
from iguane.core import Block, Space
from iguane.networks import ParameterSet, generator_forward

__all__ = ["Harmonize"]


class Harmonize(Block):
    """Translate a volume into the reference site with a forward generator

    Preprocessed volumes go to model space, are padded to a multiple of 16 (or of
    the generator's down-sampling factor), translated with negative values clipped,
    unpadded and brought back to the preprocessed scale. Model-space volumes stay in
    model space.

    Parameters
    ----------
    generator : ParameterSet
        forward generator parameters
    multiple : int, optional
        padding multiple, by default 16
    """

    def __init__(self, generator: ParameterSet, multiple=16, device=None, name=None):
        super().__init__(name=name)
        self.generator = generator
        self.multiple = max(int(multiple), 2**generator.spec.levels)
        self.device = device
        self._module = None

    @property
    def module(self):
        if self._module is None:
            self._module = self.generator.to_module(self.device)
            self._module.eval()
        return self._module

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_module"] = None
        return state

    def run(self, volume):
        model_space = volume.space == Space.MODEL
        if not model_space:
            _to_model_space(volume)
        padded, pads = pad_to_multiple(volume, self.multiple)
        translated = unpad(generator_forward(self.module, padded, inference=True), pads)
        volume.data = translated.data
        volume.mask = translated.mask
        if not model_space:
            _from_model_space(volume)
        volume.harmonized = True

    @property
    def citations(self):
        return super().citations + ["torch", "cyclegan"]
