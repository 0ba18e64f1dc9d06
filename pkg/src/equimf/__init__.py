"""Joint discrete-continuous MeanFlow generation of attributed geometric graphs."""
from .backbone import EquiMF, ModelConfig, conditioning_mode_wiring
from .bridge import TimePair, noise_batch, noise_categorical, noise_coordinates, sample_time_pair
from .errors import (BadConfig, CorruptCheckpoint, DegenerateTime, EquiMFError, InvalidGraph,
                     NonFinite, TooLarge, UnknownState, Unsatisfiable)
from .graph import Batch, Graph, validate, zero_center
from .sampler import SampleConfig, distort_time, make_grid, sample
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
