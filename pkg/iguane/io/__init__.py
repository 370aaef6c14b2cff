import pandas as pd

pd.options.mode.chained_assignment = None  # default='warn'

from .manifest import COLUMNS, Manifest
from .nifti import get_files, load_volume, mask_path, save_volume
