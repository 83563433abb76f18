from .config import MICRO_CONFIG, ModelConfig
from .network import (
    ContractError,
    KVCacheWindow,
    OrderingError,
    PoseModel,
    StreamingSession,
    band_causal_mask,
    cholesky_factors,
    covariance_matrices,
    headset_pose_features,
    patchify,
    world_transform,
)
from .checkpoint import file_hash, load_checkpoint, save_checkpoint
from .profile import (
    CostRow,
    format_table,
    fusion_cost,
    linear_cost,
    model_table,
    multiview_attention_table,
    norm_cost,
    table_csv,
    temporal_attention_table,
    totals,
)
