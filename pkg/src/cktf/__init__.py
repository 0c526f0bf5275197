"""Contrastive knowledge transfer between CNNs, on a small numpy autodiff engine."""

from .contrastive import (
    CKTWeights,
    CriticParams,
    MemoryBank,
    bank_update,
    critic_f,
    l_ckt,
    l_mckt,
    l_pckt,
    nce_loss,
    sample_negatives,
)
from .config import ExperimentConfig, load_config, parse_arch
from .data import BatchStream, Dataset, load_raw_binary, make_synthetic, next_batch, save_raw_binary
from .errors import (
    CKTFError,
    ConfigError,
    DegenerateInputError,
    FormatError,
    ParameterError,
    ShapeError,
    SpecError,
    UsageError,
)
from .gradcheck import finite_diff_check
from .losses import LossBreakdown, LossConfig, cross_entropy, kd_kl, total_loss
from .mapping import LayerMapping, MappingStrategy, cosine_score, map_layers
from .models import (
    Model,
    ModelSpec,
    ModuleOutputs,
    StageSpec,
    build_cnn,
    forward_with_taps,
    freeze,
    load_model,
    save_model,
)
from .optim import SGD, TrainingSchedule, lr_at_epoch, sgd_step
from .projection import EmbeddingBatch, HeadSet, ProjectionHead, make_heads, pool_and_flatten, project
from .tensor import Tensor
from .train import MetricsRecord, RunResult, evaluate, fit_linear, fit_supervised, run_distillation

__version__ = "0.1.0"
