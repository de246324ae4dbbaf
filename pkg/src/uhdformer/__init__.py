"""Two-space image restoration network on a small numpy autodiff engine."""

from .errors import (ChannelIndexError, CompatibilityError, ConfigError, ContractError, FormatError,
                     NumericalError, ShapeError, SizeError, UHDFError)
from .metrics import psnr, ssim
from .model import (ABLATIONS, UHDformer, UHDformerConfig, build_model, load_checkpoint,
                    model_from_checkpoint, param_count, save_checkpoint)
from .rng import Rng, substream
from .tensor import Tape, Tensor, grad_check
from .training import DegradationSpec, TrainConfig, evaluate, restore, train

__version__ = "0.1.0"
