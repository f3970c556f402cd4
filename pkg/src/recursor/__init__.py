"""Desk-scale engine for recursive transformers with per-token depth.

Parameter-shared model construction, token-level depth routing,
recursion-aware KV caching, early-exit decoding with adaptive thresholds,
serving simulation, and analytic cost accounting, all in float64 numpy.
"""

from .costs import (count_params, forward_flops, kv_bytes, preset_spec,
                    routed_flops, suggest_max_batch)
from .decoding import (AssignedDepthPolicy, ConfidencePolicy, DecodeSession,
                       FillMode, FixedDepthPolicy, GreedySampler, NucleusSampler,
                       TopKSampler, calibrate_threshold, decode, oracle_decode)
from .errors import (CacheModeError, ConfigError, NumericError,
                     SequenceLengthError)
from .kvcache import CacheMode, KVCacheBank, relative_costs
from .model import (ModelSpec, ModelWeights, ShareStrategy, forward, init_model,
                    layer_index_map, unroll_weights, unrolled_layers)
from .relax import (InitMethod, LoraDelta, NormInit, attach_lora_svd,
                    attach_lora_zero, init_looped, init_lora_svd, relax_model)
from .routing import (Router, RouterConfig, RouterKind, capacity_schedule,
                      evaluate_router, expert_choice_default, expert_choice_select,
                      mor_forward, token_choice_assign, token_choice_default)
from .scheduler import (LinearCost, MeasuredCost, Request, bundled_scenario,
                        random_scenario, schedule_cdb, schedule_csb,
                        schedule_vanilla, throughput_report)
from .tensor import CacheUnderrunError, Tensor, no_grad
from .threshold import AdaptiveThreshold, estimate_threshold, fit_beta_moments
from .training import (AdamW, CosineLR, ExitMode, KdMode, LossSchedule,
                       TrapezoidLR, exit_loss, kd_dyna_map, train_loop,
                       train_step, trainable_parameters)

__version__ = "0.1.0"
