"""Block-wise causal masked diffusion language modeling lab."""

from .kernel import FLOAT32, FLOAT64, Precision, Tensor, grad_check
from .masks import MaskMatrix, MaskPair, build_masks
from .model import ModelConfig, ModelParams, StreamState, flops_estimate, forward, init_params
from .objective import LossWeights, diffusion_loss, elbo_sequential_oracle, oa_arm_enumeration
from .sampler import GenerationPlan, KVCache, generate_sequential, generate_strided, sample_token
from .schedule import (
    BlockPlan,
    CurriculumState,
    apply_partial_shuffle,
    identity_plan,
    make_plan_from_tau,
    progressive_perm_count,
    sample_masking_order,
    sample_sbp_stream_count,
    strided_permutation,
)
from .trainer import TrainConfig, TrainMetrics, load_checkpoint, save_checkpoint, train_step

__version__ = "0.1.0"
