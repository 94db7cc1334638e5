"""Generative zero-shot learning with dual-space and OOD batch distillation."""

from . import errors
from .data import Batch, GzslDataset, SyntheticSpec, load_feature_file, make_synthetic, save_dataset
from .feature_gen import GaussianOracleGenerator, WganGpGenerator, build_wgan, fg_train_step
from .id2sd import (
    StudentModel,
    TeacherModel,
    build_student,
    build_teacher,
    loss_be,
    loss_cls,
    loss_id,
    loss_kl,
    pretrain_teacher,
)
from .nn import Adam, Mlp, freeze, input_gradient, load_checkpoint, parameter_hash, save_checkpoint
from .o2dbd import LearnableSigmoid, OodProjector, OodScorer, build_projector, loss_od, ood_score, project_student
from .pipeline import (
    RunReport,
    TrainConfig,
    TwoStageModel,
    evaluate_gzsl,
    gzsl_metrics,
    harmonic_mean,
    infer,
    run_experiment,
    train_d3gzsl,
    train_two_stage,
)
from .tensor import Tape, Tensor, backward, fresh_tape, no_grad

__version__ = "0.1.0"
