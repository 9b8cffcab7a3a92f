"""Self-supervised score-based reconstruction of undersampled multi-coil MRI.

A Bayesian unrolled network is fitted to pairs of measurements of the same
object, its sampled outputs serve as centers for multi-scale denoising score
matching, and the learned score drives conditional annealed Langevin
sampling of the image given new k-space data.
"""

from .bcnn import BayesianUnrolledNet
from .exceptions import ConvergenceError, DimensionError, FormatError
from .io import RunConfig
from .mri import CoilSensitivities, MultiCoilKSpace, PairedMeasurement, SamplingMask
from .sampler import SamplerConfig
from .score import NoiseConditionalScoreNet, NoiseSchedule, make_schedule

__version__ = "0.1.0"

__all__ = [
    "BayesianUnrolledNet", "CoilSensitivities", "ConvergenceError", "DimensionError",
    "FormatError", "MultiCoilKSpace", "NoiseConditionalScoreNet", "NoiseSchedule",
    "PairedMeasurement", "RunConfig", "SamplerConfig", "SamplingMask", "make_schedule",
]
