"""Single-exposure light-field acquisition with a coded aperture and an event camera.

Simulation of the frame/event measurement, analytic recovery of the coded
images, linear light-field reconstruction, and schedule search.
"""

from .aperture import ApertureSchedule, ScheduleSeed, binarize, half_aperture_schedule, random_schedule, validate
from .equivalence import recover_images
from .errors import (ConfigError, DomainError, EventLFError, IncompleteCycle, MissingView, SegmentationError,
                     ShapeError, SingularError, SizeError)
from .harness import ExperimentConfig, run_experiment, segment_stream, tau_sweep
from .lfcore import LightField, load_lightfield, psnr, quality_report, save_lightfield, ssim, synth_scene
from .patopt import EventBudget, OptConfig, anneal
from .recon import ReconConfig, cg_recon, image_only_recon, least_norm_recon, recon_from_measurement
from .sensor import EventStream, Measurement, SensorConfig, TimingConfig, simulate_event_stream, simulate_exposure

__version__ = "0.1.0"
