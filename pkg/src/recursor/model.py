"""Parameter-shared decoder models with a recursion-block layout.

A model is an L-layer pre-norm transformer (RMSNorm, grouped-query
attention with rotary positions, SiLU-gated FFN) whose layers may be tied
according to a sharing strategy.  The unrolled depth always stays L; tying
only changes which unique parameter block each unrolled layer reads.  The
unrolled layers are partitioned into n_recursions equal groups, and the
group boundaries are the only places a token may stop early.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as tt
from .errors import ConfigError, SequenceLengthError


class ShareStrategy(Enum):
    NONE = "none"
    CYCLE = "cycle"
    SEQUENCE = "sequence"
    MIDDLE_CYCLE = "middle_cycle"
    MIDDLE_SEQUENCE = "middle_sequence"

    @property
    def is_middle(self) -> bool:
        return self in (ShareStrategy.MIDDLE_CYCLE, ShareStrategy.MIDDLE_SEQUENCE)


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int
    n_recursions: int
    share: ShareStrategy = ShareStrategy.NONE
    d_model: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 16
    d_inter: int = 128
    vocab_size: int = 259
    context_len: int = 256
    tie_embeddings: bool = True

    def __post_init__(self):
        L, nr = self.n_layers, self.n_recursions
        if L < 1 or nr < 1:
            raise ConfigError("n_layers and n_recursions must be positive")
        if self.share is ShareStrategy.NONE:
            if nr != 1:
                raise ConfigError("share=none requires n_recursions=1")
        elif self.share.is_middle:
            if L < 3:
                raise ConfigError("middle strategies need n_layers >= 3")
            if (L - 2) % nr != 0:
                raise ConfigError(
                    f"n_recursions={nr} must divide n_layers-2={L - 2} for middle strategies")
        else:
            if L % nr != 0:
                raise ConfigError(f"n_recursions={nr} must divide n_layers={L}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError("n_heads must be a multiple of n_kv_heads")
        if self.d_head % 2 != 0:
            raise ConfigError("d_head must be even for rotary embeddings")
        for name in ("d_model", "d_inter", "vocab_size", "context_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def block_size(self) -> int:
        """Unrolled layers per recursion group (middle region only for middle strategies)."""
        if self.share.is_middle:
            return (self.n_layers - 2) // self.n_recursions
        return self.n_layers // self.n_recursions

    @property
    def n_unique(self) -> int:
        if self.share is ShareStrategy.NONE:
            return self.n_layers
        if self.share.is_middle:
            return self.block_size + 2
        return self.n_layers // self.n_recursions


def layer_index_map(spec: ModelSpec, ell: int) -> int:
    """Unique parameter block read by unrolled layer `ell`.

    Cycle repeats the whole block per recursion; sequence repeats each
    unique layer n_recursions times in place.  Middle variants keep the
    first and last layers untied and apply the rule to the interior.
    """
    L, nr = spec.n_layers, spec.n_recursions
    if not 0 <= ell < L:
        raise ConfigError(f"layer index {ell} outside [0, {L})")
    s = spec.share
    if s is ShareStrategy.NONE:
        return ell
    if s is ShareStrategy.CYCLE:
        return ell % (L // nr)
    if s is ShareStrategy.SEQUENCE:
        return ell // nr
    # middle variants: block 0 and block n_unique-1 are the untied ends
    if ell == 0:
        return 0
    if ell == L - 1:
        return spec.n_unique - 1
    if s is ShareStrategy.MIDDLE_CYCLE:
        return (ell - 1) % spec.block_size + 1
    return (ell - 1) // nr + 1


@dataclass(frozen=True)
class Layer:
    """One unrolled layer: which block it reads and where its caches live."""
    ell: int
    uid: int
    depth: int           # 1-based recursion group
    rep: int             # how many earlier unrolled layers read the same block
    key: tuple           # cache stream id, shared across depths for tied layers


def unrolled_layers(spec: ModelSpec) -> list:
    layers = []
    seen = {}

    def rep_of(uid: int) -> int:
        r = seen.get(uid, 0)
        seen[uid] = r + 1
        return r

    if spec.share.is_middle:
        layers.append(Layer(0, 0, 1, rep_of(0), ("first",)))
        for ell in range(1, spec.n_layers - 1):
            depth = (ell - 1) // spec.block_size + 1
            uid = layer_index_map(spec, ell)
            layers.append(Layer(ell, uid, depth, rep_of(uid),
                                ("mid", (ell - 1) % spec.block_size)))
        last_uid = spec.n_unique - 1
        layers.append(Layer(spec.n_layers - 1, last_uid, spec.n_recursions,
                            rep_of(last_uid), ("last",)))
    else:
        for ell in range(spec.n_layers):
            depth = ell // spec.block_size + 1
            uid = layer_index_map(spec, ell)
            layers.append(Layer(ell, uid, depth, rep_of(uid),
                                ("mid", ell % spec.block_size)))
    return layers


def depth_layers(spec: ModelSpec, depth: int) -> list:
    """Layers of one recursion group, excluding the untied ends."""
    return [l for l in unrolled_layers(spec) if l.depth == depth and l.key[0] == "mid"]


BLOCK_PARAM_NAMES = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")
LORA_PROJECTIONS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


class ModelWeights:
    """Named parameter store; insertion order fixes the checkpoint layout."""

    def __init__(self, spec: ModelSpec, params: dict):
        self.spec = spec
        self.params = params       # name -> Tensor, insertion-ordered
        self.adapters = {}         # (depth, uid, proj) -> LoraDelta-like with .A/.B/.rank

    def block(self, uid: int) -> dict:
        return {n: self.params[f"blocks.{uid}.{n}"] for n in BLOCK_PARAM_NAMES}

    def head_matrix(self) -> tt.Tensor:
        if self.spec.tie_embeddings:
            return tt.transpose(self.params["embedding"])
        return self.params["head"]

    def named_parameters(self) -> dict:
        return dict(self.params)

    def adapter(self, rep: int, uid: int, proj: str):
        return self.adapters.get((rep, uid, proj))


def init_model(spec: ModelSpec, seed: int = 0, scale: float = 0.02) -> ModelWeights:
    g = tt.rng(seed)
    p = {}
    p["embedding"] = tt.randn(g, (spec.vocab_size, spec.d_model), scale, requires_grad=True)
    for uid in range(spec.n_unique):
        pre = f"blocks.{uid}."
        p[pre + "attn_norm"] = tt.ones(spec.d_model, requires_grad=True)
        p[pre + "wq"] = tt.randn(g, (spec.d_model, spec.n_heads * spec.d_head), scale, requires_grad=True)
        p[pre + "wk"] = tt.randn(g, (spec.d_model, spec.n_kv_heads * spec.d_head), scale, requires_grad=True)
        p[pre + "wv"] = tt.randn(g, (spec.d_model, spec.n_kv_heads * spec.d_head), scale, requires_grad=True)
        p[pre + "wo"] = tt.randn(g, (spec.n_heads * spec.d_head, spec.d_model), scale, requires_grad=True)
        p[pre + "ffn_norm"] = tt.ones(spec.d_model, requires_grad=True)
        p[pre + "w_gate"] = tt.randn(g, (spec.d_model, spec.d_inter), scale, requires_grad=True)
        p[pre + "w_up"] = tt.randn(g, (spec.d_model, spec.d_inter), scale, requires_grad=True)
        p[pre + "w_down"] = tt.randn(g, (spec.d_inter, spec.d_model), scale, requires_grad=True)
    p["final_norm"] = tt.ones(spec.d_model, requires_grad=True)
    if not spec.tie_embeddings:
        p["head"] = tt.randn(g, (spec.d_model, spec.vocab_size), scale, requires_grad=True)
    return ModelWeights(spec, p)


def linear(x, w, delta=None) -> tt.Tensor:
    """x @ w plus an optional low-rank delta (x @ A^T) @ B^T."""
    out = tt.matmul(x, w)
    if delta is not None and delta.rank > 0:
        out = tt.add(out, tt.matmul(tt.matmul(x, tt.transpose(delta.A)), tt.transpose(delta.B)))
    return out


def self_attention_hook(layer: Layer, k, v, positions):
    """Plain full-sequence attention: fresh keys only, no cache."""
    return k, v, positions


def apply_layer(weights: ModelWeights, layer: Layer, x, positions, attend=self_attention_hook):
    """One pre-norm transformer layer; `attend` supplies the key/value context."""
    spec = weights.spec
    b = weights.block(layer.uid)
    d = lambda proj: weights.adapter(layer.rep, layer.uid, proj)
    T = x.shape[0]

    xa = tt.rmsnorm(x, b["attn_norm"])
    q = tt.reshape(linear(xa, b["wq"], d("wq")), (T, spec.n_heads, spec.d_head))
    k = tt.reshape(linear(xa, b["wk"], d("wk")), (T, spec.n_kv_heads, spec.d_head))
    v = tt.reshape(linear(xa, b["wv"], d("wv")), (T, spec.n_kv_heads, spec.d_head))
    K, V, kpos = attend(layer, k, v, positions)
    ctx = tt.attention(q, K, V, positions, kpos)
    h = tt.add(x, linear(tt.reshape(ctx, (T, spec.n_heads * spec.d_head)), b["wo"], d("wo")))

    hf = tt.rmsnorm(h, b["ffn_norm"])
    gate = tt.silu(linear(hf, b["w_gate"], d("w_gate")))
    up = linear(hf, b["w_up"], d("w_up"))
    return tt.add(h, linear(tt.mul(gate, up), b["w_down"], d("w_down")))


def embed(weights: ModelWeights, token_ids) -> tt.Tensor:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weights.spec.vocab_size):
        raise ConfigError("token id outside the vocabulary")
    return tt.embedding(weights.params["embedding"], ids)


def final_logits(weights: ModelWeights, hidden) -> tt.Tensor:
    """Final RMSNorm then the (possibly tied) output head."""
    return tt.matmul(tt.rmsnorm(hidden, weights.params["final_norm"]), weights.head_matrix())


@dataclass
class ForwardResult:
    logits: tt.Tensor
    boundary_states: list        # raw state after each recursion group, length n_recursions
    exit_logits: list            # per-depth head outputs if requested, else None
    final_hidden: tt.Tensor      # state entering the final norm

    def __iter__(self):
        yield self.logits
        yield self.boundary_states


def forward(weights: ModelWeights, token_ids, positions=None, attend=self_attention_hook,
            want_exit_logits: bool = False) -> ForwardResult:
    """Full-depth forward over one token sequence.

    Exit logits at depth r are what the head would see if every token
    stopped after recursion group r; for middle strategies that includes a
    pass through the untied last layer.  The final-depth entry is the same
    tensor as `logits`, not a recomputation.
    """
    spec = weights.spec
    ids = np.asarray(token_ids, dtype=np.int64)
    if positions is None:
        positions = np.arange(len(ids))
    positions = np.asarray(positions, dtype=np.int64)
    if len(ids) > spec.context_len or (positions.size and positions.max() >= spec.context_len):
        raise SequenceLengthError(
            f"sequence of length {len(ids)} exceeds context_len={spec.context_len}")

    layers = unrolled_layers(spec)
    x = embed(weights, ids)
    if spec.share.is_middle:
        x = apply_layer(weights, layers[0], x, positions, attend)

    boundary_states = []
    for depth in range(1, spec.n_recursions + 1):
        for layer in layers:
            if layer.depth == depth and layer.key[0] == "mid":
                x = apply_layer(weights, layer, x, positions, attend)
        boundary_states.append(x)

    if spec.share.is_middle:
        final_hidden = apply_layer(weights, layers[-1], x, positions, attend)
    else:
        final_hidden = x
    logits = final_logits(weights, final_hidden)

    exit_logits = None
    if want_exit_logits:
        exit_logits = []
        for r, state in enumerate(boundary_states, start=1):
            if r == spec.n_recursions:
                exit_logits.append(logits)
            elif spec.share.is_middle:
                exited = apply_layer(weights, layers[-1], state, positions, attend)
                exit_logits.append(final_logits(weights, exited))
            else:
                exit_logits.append(final_logits(weights, state))
    return ForwardResult(logits, boundary_states, exit_logits, final_hidden)


def unroll_weights(weights: ModelWeights) -> ModelWeights:
    """Materialize the tying: an untied L-layer model with copied blocks.

    The copy traverses layers in the same order with equal parameter
    values, so its forward pass is bitwise identical to the tied model.
    Low-rank adapters are folded into the copied matrices.
    """
    spec = weights.spec
    flat = ModelSpec(
        n_layers=spec.n_layers, n_recursions=1, share=ShareStrategy.NONE,
        d_model=spec.d_model, n_heads=spec.n_heads, n_kv_heads=spec.n_kv_heads,
        d_head=spec.d_head, d_inter=spec.d_inter, vocab_size=spec.vocab_size,
        context_len=spec.context_len, tie_embeddings=spec.tie_embeddings)
    p = {"embedding": tt.Tensor(weights.params["embedding"].data.copy(), requires_grad=True)}
    layers = unrolled_layers(spec)
    for ell in range(spec.n_layers):
        uid = layer_index_map(spec, ell)
        for name in BLOCK_PARAM_NAMES:
            src = weights.params[f"blocks.{uid}.{name}"]
            value = src.data.copy()
            delta = weights.adapter(layers[ell].rep, uid, name)
            if delta is not None and delta.rank > 0:
                value = value + (delta.B.data @ delta.A.data).T
            p[f"blocks.{ell}.{name}"] = tt.Tensor(value, requires_grad=True)
    p["final_norm"] = tt.Tensor(weights.params["final_norm"].data.copy(), requires_grad=True)
    if not spec.tie_embeddings:
        p["head"] = tt.Tensor(weights.params["head"].data.copy(), requires_grad=True)
    return ModelWeights(flat, p)
