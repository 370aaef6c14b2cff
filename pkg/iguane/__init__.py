from iguane import config

CONFIG = config.ConfigManager()

from importlib.metadata import PackageNotFoundError, version

from iguane.core import Block, Sequence, SequenceParallel, Space, Volume
from iguane.io import Manifest, load_volume, save_volume
from iguane.phantom import example_volume
from iguane.tools import ToolConfig

try:
    __version__ = version("iguane")
except PackageNotFoundError:
    __version__ = "0.1.0"
