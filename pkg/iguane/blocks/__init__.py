from iguane.core.block import Block

from .preprocessing import *
from .normalization import *
from .utils import *
from .harmonization import *
