from .checkpoint import CheckpointError, load_model, save_model
from .dit import (
    ForwardResult,
    SparseDiT,
    SparseDiTConfig,
    ada_ln_modulate,
    init_params,
    param_count,
    param_shapes,
    qk_normalize,
)
from .embed import image_positions, patchify, text_positions, timestep_features, unpatchify
from .flops import block_flops_per_token, model_flops, moe_flops_per_token
from .moe import MoEOutput, RouterDecision, RoutingConfigError, moe_forward, top_k_indices
