"""Analytic parameter, FLOPs, and KV-byte accounting.

Linear layers cost 2 x weights per token; attention costs QK^T plus the
value weighting over the causal lower triangle only; normalization and
activation costs are omitted.  Capacity-dependent routing scales each
recursion group by its surviving token count, and the KV mode sets the
key length seen at each depth.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .kvcache import CacheMode
from .model import ModelSpec, ShareStrategy
from .routing import capacity_schedule


def preset_spec(name: str, n_recursions: int = 1,
                share: ShareStrategy = None) -> ModelSpec:
    """Named trunk configurations at published scales."""
    presets = {
        "360m": dict(n_layers=32, d_model=960, n_heads=15, n_kv_heads=5,
                     d_head=64, d_inter=2560, vocab_size=49152, context_len=2048),
        "tiny": dict(n_layers=4, d_model=64, n_heads=4, n_kv_heads=2,
                     d_head=16, d_inter=128, vocab_size=259, context_len=256),
    }
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; have {sorted(presets)}")
    if share is None:
        share = ShareStrategy.NONE if n_recursions == 1 else ShareStrategy.CYCLE
    return ModelSpec(n_recursions=n_recursions, share=share, **presets[name])


def _per_layer_params(spec: ModelSpec) -> int:
    d, h, kv, dh, it = spec.d_model, spec.n_heads, spec.n_kv_heads, spec.d_head, spec.d_inter
    attn = d * h * dh + 2 * d * kv * dh + h * dh * d
    ffn = 3 * d * it
    norms = 2 * d
    return attn + ffn + norms


@dataclass(frozen=True)
class ParamCounts:
    embedding: int
    non_embedding: int            # full unrolled depth, the compute-side count
    unique_non_embedding: int     # what sharing actually stores
    per_layer: int


def count_params(spec: ModelSpec) -> ParamCounts:
    per_layer = _per_layer_params(spec)
    emb = spec.vocab_size * spec.d_model
    if not spec.tie_embeddings:
        emb *= 2
    return ParamCounts(
        embedding=emb,
        non_embedding=spec.n_layers * per_layer + spec.d_model,
        unique_non_embedding=spec.n_unique * per_layer + spec.d_model,
        per_layer=per_layer,
    )


@dataclass(frozen=True)
class FlopsBreakdown:
    linear: float
    attention: float
    head: float
    router: float
    total: float
    per_token: float
    effective_lengths: tuple      # surviving tokens per recursion group


def _layer_linear_flops(spec: ModelSpec) -> int:
    # matrices only: norms are excluded from the count above as well
    return 2 * (_per_layer_params(spec) - 2 * spec.d_model)


def forward_flops(spec: ModelSpec, seq_len: int, capacities=None,
                  kv_mode: CacheMode = CacheMode.RECURSION_WISE,
                  include_head: bool = True, include_router: bool = False,
                  lora_rank: int = 0) -> FlopsBreakdown:
    """Forward-pass FLOPs for one sequence.

    `capacities` gives the surviving token count per recursion group
    (defaults to all tokens at every depth).  Perfectly balanced top-1
    routing is modelled by the linear schedule from capacity_schedule.
    """
    T = seq_len
    if T < 1:
        raise ConfigError("seq_len must be positive")
    nr = spec.n_recursions
    if capacities is None:
        caps = [T] * nr
    else:
        caps = [int(c) for c in capacities]
        if len(caps) != nr:
            raise ConfigError(f"need {nr} capacity entries, got {len(caps)}")
        if any(not 0 <= c <= T for c in caps):
            raise ConfigError("capacities must lie in [0, seq_len]")

    lin_layer = _layer_linear_flops(spec)
    hdh2 = 2 * spec.n_heads * spec.d_head

    def attn_flops(k_active: int) -> float:
        if kv_mode is CacheMode.RECURSION_WISE:
            return hdh2 * k_active * (k_active + 1)
        # full-length keys: per-depth storage or shared depth-1 reads
        return hdh2 * k_active * (T + 1)

    per_depth_layers = spec.block_size
    linear = 0.0
    attention = 0.0
    for r in range(1, nr + 1):
        k = caps[r - 1]
        linear += lin_layer * per_depth_layers * k
        attention += attn_flops(k) * per_depth_layers
    if spec.share.is_middle:
        linear += 2 * lin_layer * T
        attention += 2 * hdh2 * T * (T + 1)

    head = 2.0 * spec.d_model * spec.vocab_size * T if include_head else 0.0
    router = 0.0
    if include_router:
        router = sum(2.0 * spec.d_model * caps[r - 1] for r in range(1, nr + 1))
    if lora_rank:
        for r in range(1, nr + 1):
            k = caps[r - 1]
            dims = [(spec.d_model, spec.n_heads * spec.d_head),
                    (spec.d_model, spec.n_kv_heads * spec.d_head),
                    (spec.d_model, spec.n_kv_heads * spec.d_head),
                    (spec.n_heads * spec.d_head, spec.d_model),
                    (spec.d_model, spec.d_inter), (spec.d_model, spec.d_inter),
                    (spec.d_inter, spec.d_model)]
            linear += sum(2.0 * lora_rank * (a + b) for a, b in dims) \
                * per_depth_layers * k

    total = linear + attention + head + router
    return FlopsBreakdown(linear, attention, head, router, total, total / T,
                          tuple(caps))


def routed_flops(spec: ModelSpec, seq_len: int,
                 kv_mode: CacheMode = CacheMode.RECURSION_WISE,
                 include_head: bool = True) -> FlopsBreakdown:
    """Forward FLOPs under the linear capacity schedule."""
    caps = capacity_schedule(spec.n_recursions, seq_len)
    return forward_flops(spec, seq_len, caps, kv_mode, include_head)


def kv_bytes(spec: ModelSpec, seq_len: int, mode: CacheMode,
             bytes_per_element: int = 2, capacities=None) -> int:
    """Total key/value cache bytes for one sequence.

    Per unrolled layer: 2 (keys and values) x n_kv_heads x d_head x the
    effective stored length at that layer's depth.
    """
    T = seq_len
    nr = spec.n_recursions
    if capacities is None:
        capacities = capacity_schedule(nr, T) if mode is CacheMode.RECURSION_WISE \
            else [T] * nr

    def stored(depth: int) -> int:
        if mode is CacheMode.PER_DEPTH:
            return T
        if mode is CacheMode.RECURSION_WISE:
            return int(capacities[depth - 1])
        return T if depth == 1 else 0

    row = 2 * spec.n_kv_heads * spec.d_head * bytes_per_element
    total = sum(stored(r) for r in range(1, nr + 1)) * spec.block_size * row
    if spec.share.is_middle:
        total += 2 * T * row
    return total


def suggest_max_batch(budget_bytes: int, spec: ModelSpec, seq_len: int,
                      mode: CacheMode, bytes_per_element: int = 2,
                      param_bytes_per_element: int = 2) -> int:
    """Sequences that fit: (budget - stored params) / per-sequence cache."""
    counts = count_params(spec)
    param_bytes = (counts.embedding + counts.unique_non_embedding) * param_bytes_per_element
    per_seq = kv_bytes(spec, seq_len, mode, bytes_per_element)
    free = budget_bytes - param_bytes
    if free <= 0 or per_seq == 0:
        return 0
    return int(free // per_seq)
