"""ardlab: a desk-scale laboratory for autoregressive distillation.

An analytic Gaussian-mixture diffusion teacher with closed-form scores
feeds a miniature block-causal transformer student.  Everything runs on
a CPU in seconds to minutes: trajectory generation, distillation
training, KV-cached sampling, and the measurement instruments
(attention reports, FLOPs accounting, exposure-bias curves, MMD).
"""

from .analysis import (ArchDims, AttentionReport, DIT_XL2, ExposureCurve,
                       FlopsBreakdown, MetricReport, attention_report,
                       exposure_harness, flops_model, metric_report, mmd2,
                       mmd2_jackknife, param_count)
from .checkpoint import load_tensors, save_tensors
from .config import (ExperimentConfig, build_schedule, build_teacher,
                     load_experiment, load_mixture, save_experiment,
                     validate_experiment)
from .dataset import TrajectoryDataset, load_dataset, save_dataset
from .errors import (ArdError, CacheStateError, ConfigError,
                     DegenerateMaskError, GraphError, LoadError, NumericError,
                     RangeError, RefusalError, ShapeError, UnknownClassError)
from .sampling import (SampleResult, SamplerConfig, manipulate, sample,
                       samples_to_dataset, write_pgm)
from .student import (KVCache, MaskOption, PredictionTarget, StudentConfig,
                      allowed_blocks, build_mask, forward_step, forward_train,
                      init_params, load_student, param_shapes, save_student,
                      target_transform)
from .teacher import (GaussianMixtureTeacher, PRESETS, Trajectory,
                      TrajectoryGrid, VPSchedule, generate_dataset,
                      make_blobs8, make_gmm2d, make_preset, record_seed,
                      solve_trajectories, solve_trajectory, tweedie_x0)
from .tensor import Tape, Tensor
from .training import (AdamState, TrainConfig, TrainResult, TrajectoryBatch,
                       adam_init, adam_step, adaptive_balance, ard_loss,
                       clip_grads, disc_forward, discriminator_loss, ema_init,
                       ema_update, init_disc_params, make_x0_targets,
                       step_loss, train)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
