"""Heart rate from low-resolution face video with pruned spatio-temporal networks."""

from .errors import (ConfigurationError, ContractViolation, FormatError, NumericError,
                     TruncatedFileError)
from .metrics import MetricsReport, compute_metrics, pearson_r
from .models import EnhancerConfig, ModelParams, RecoveryConfig, init_params
from .pipeline import infer
from .pruning import SparsityMask, connection_sensitivity, prune
from .signal import RppgSignal, estimate_hr, power_spectrum
from .synth import SynthConfig, generate_dataset, generate_pulse_clip
from .training import TrainConfig, fit
from .video import RoiBox, VideoClip, read_clip, write_clip

__version__ = "0.1.0"
