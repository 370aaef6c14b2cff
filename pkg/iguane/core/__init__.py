from .volume import Space, Volume, brain_median
from .block import Block
from .sequence import Sequence, SequenceParallel
