"""Autoregressive decoding with per-token early exit.

A token is processed through recursion groups until an exit policy stops
it; the logits at the exit depth emit the next token.  Exited tokens leave
holes in the deeper caches.  Three repair modes:

  PARALLEL    exited tokens wait on a pending list and ride along with the
              next token that goes deeper, so their deep keys are computed
              from their true hidden states, just later and batched
  STATE_COPY  deeper keys are projected immediately from the frozen exit
              state, skipping the deep attention and FFN evolution
  NONE        holes stay; deeper attention simply skips those positions

Prefill always runs the prompt at full depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as tt
from .errors import ConfigError, SequenceLengthError
from .kvcache import CacheMode, KVCacheBank
from .model import (ModelWeights, apply_layer, depth_layers, embed, final_logits,
                    forward, linear, unrolled_layers)

EXIT_RUN_CAP = 32      # forced flush after this many consecutive early exits


class FillMode(Enum):
    PARALLEL = "parallel"
    STATE_COPY = "state_copy"
    NONE = "none"


# ---- samplers ----


class GreedySampler:
    def __call__(self, logits: np.ndarray) -> int:
        return int(np.argmax(logits))


class TopKSampler:
    def __init__(self, k: int, temperature: float = 1.0, seed: int = 0):
        if k < 1:
            raise ConfigError("top-k needs k >= 1")
        if temperature <= 0:
            raise ConfigError("temperature must be positive")
        self.k = k
        self.temperature = temperature
        self.rng = np.random.default_rng(seed)

    def __call__(self, logits: np.ndarray) -> int:
        z = np.asarray(logits, dtype=np.float64) / self.temperature
        keep = np.argsort(-z, kind="stable")[: self.k]
        p = np.exp(z[keep] - z[keep].max())
        p /= p.sum()
        return int(keep[self.rng.choice(keep.size, p=p)])


class NucleusSampler:
    """Smallest-probability-mass sampling: keep the top tokens covering top_p."""

    def __init__(self, top_p: float, temperature: float = 1.0, seed: int = 0):
        if not 0 < top_p <= 1:
            raise ConfigError("top_p must lie in (0, 1]")
        if temperature <= 0:
            raise ConfigError("temperature must be positive")
        self.top_p = top_p
        self.temperature = temperature
        self.rng = np.random.default_rng(seed)

    def __call__(self, logits: np.ndarray) -> int:
        z = np.asarray(logits, dtype=np.float64) / self.temperature
        order = np.argsort(-z, kind="stable")
        p = np.exp(z[order] - z[order].max())
        p /= p.sum()
        cut = int(np.searchsorted(np.cumsum(p), self.top_p) + 1)
        keep = order[:cut]
        pk = p[:cut] / p[:cut].sum()
        return int(keep[self.rng.choice(cut, p=pk)])


# ---- exit policies ----


class FixedDepthPolicy:
    """Every token exits at the same depth."""

    def __init__(self, depth: int):
        if depth < 1:
            raise ConfigError("exit depth must be >= 1")
        self.depth = depth

    def wants_exit(self, step_index: int, depth: int, confidence: float) -> bool:
        return depth >= self.depth


class ConfidencePolicy:
    """Exit once the top softmax probability reaches a threshold.

    `threshold` may be a float or any object with a `threshold` attribute,
    so an adaptive estimator can be dropped in directly.
    """

    def __init__(self, threshold):
        self.threshold = threshold

    @property
    def value(self) -> float:
        return float(getattr(self.threshold, "threshold", self.threshold))

    def wants_exit(self, step_index: int, depth: int, confidence: float) -> bool:
        return confidence >= self.value


class AssignedDepthPolicy:
    """Exit depths fixed per decode step, e.g. replaying oracle depths."""

    def __init__(self, depths):
        self.depths = [int(d) for d in depths]

    def wants_exit(self, step_index: int, depth: int, confidence: float) -> bool:
        if step_index >= len(self.depths):
            return False
        return depth >= self.depths[step_index]


# ---- session ----


@dataclass
class ExitTrace:
    position: int
    token_id: int              # token emitted by this step
    exit_depth: int
    confidences: list          # top softmax probability at each depth reached
    depth_argmax: list         # head argmax at each depth reached
    pending_after: int         # early-exited tokens awaiting deep fill


@dataclass
class _Pending:
    position: int
    state: np.ndarray          # hidden state at exit, before any deep group
    filled_depth: int


@dataclass
class DecodeResult:
    tokens: list
    traces: list
    forced_flushes: int
    cache_stats: dict
    session: "DecodeSession" = field(repr=False, default=None)

    @property
    def mean_exit_depth(self) -> float:
        if not self.traces:
            return 0.0
        return float(np.mean([t.exit_depth for t in self.traces]))


class DecodeSession:
    """Single-sequence decode state: caches, pending exits, counters."""

    def __init__(self, weights: ModelWeights, cache_mode: CacheMode = CacheMode.RECURSION_WISE,
                 fill_mode: FillMode = FillMode.PARALLEL, share_inactive: bool = False,
                 exit_run_cap: int = EXIT_RUN_CAP):
        self.weights = weights
        self.spec = weights.spec
        self.cache_mode = cache_mode
        # shared deep reads make both repair modes redundant
        if cache_mode is CacheMode.RECURSIVE_SHARE or share_inactive:
            fill_mode = FillMode.NONE
        self.fill_mode = fill_mode
        self.exit_run_cap = exit_run_cap
        self.slot = 0
        self.layers = unrolled_layers(self.spec)
        self.banks = {}
        for layer in self.layers:
            if layer.key in self.banks:
                continue
            if layer.key[0] == "mid":
                self.banks[layer.key] = KVCacheBank(cache_mode, self.spec.n_recursions,
                                                    share_inactive)
            else:
                self.banks[layer.key] = KVCacheBank(CacheMode.RECURSION_WISE, 1)
        self.pending = []
        self.forced_flushes = 0

    def _bank_depth(self, layer) -> int:
        return layer.depth if layer.key[0] == "mid" else 1

    def _commit_hook(self, layer, k, v, positions):
        bank = self.banks[layer.key]
        d = self._bank_depth(layer)
        if bank.writes_at(d):
            for i, p in enumerate(positions):
                bank.append(d, self.slot, int(p), k.data[i], v.data[i])
            K, V, kpos = bank.gather(d, self.slot, int(positions.max()))
            return tt.Tensor(K), tt.Tensor(V), kpos
        K, V, kpos = bank.gather(d, self.slot, int(positions.max()))
        return tt.Tensor(K), tt.Tensor(V), kpos

    def _probe_hook(self, layer, k, v, positions):
        """Gather past context and splice in the fresh keys without storing them."""
        bank = self.banks[layer.key]
        d = self._bank_depth(layer)
        K, V, kpos = bank.gather(d, self.slot, int(positions.max()))
        Kt = tt.concat_rows([tt.Tensor(K), k]) if kpos.size else k
        Vt = tt.concat_rows([tt.Tensor(V), v]) if kpos.size else v
        return Kt, Vt, np.concatenate([kpos, positions])

    def prefill(self, prompt_ids) -> np.ndarray:
        """Run the prompt at full depth, filling every cache stream."""
        ids = np.asarray(prompt_ids, dtype=np.int64)
        if ids.size == 0:
            raise ConfigError("prompt must contain at least one token")
        with tt.no_grad():
            out = forward(self.weights, ids, attend=self._commit_hook)
        return out.logits.data[-1].copy()

    def _exit_logits(self, h, position: int, commit: bool) -> np.ndarray:
        """Head view of a state stopping here; commits last-layer keys on exit."""
        if self.spec.share.is_middle:
            hook = self._commit_hook if commit else self._probe_hook
            h = apply_layer(self.weights, self.layers[-1], h,
                            np.asarray([position]), hook)
        return final_logits(self.weights, h).data[0]

    def _run_depth(self, r: int, h, position: int):
        """Apply recursion group r to the current token plus pendings needing it."""
        riders = [p for p in self.pending if p.filled_depth < r] \
            if self.fill_mode is FillMode.PARALLEL else []
        if riders:
            x = tt.Tensor(np.vstack([np.stack([p.state for p in riders]), h.data]))
            positions = np.asarray([p.position for p in riders] + [position])
        else:
            x = h
            positions = np.asarray([position])
        for layer in depth_layers(self.spec, r):
            x = apply_layer(self.weights, layer, x, positions, self._commit_hook)
        for i, p in enumerate(riders):
            p.state = x.data[i].copy()
            p.filled_depth = r
        return tt.Tensor(x.data[-1:])

    def _project_fill(self, h_exit: np.ndarray, position: int, exit_depth: int):
        """State-copy repair: deep keys projected from the frozen exit state."""
        x = tt.Tensor(h_exit.reshape(1, -1))
        spec = self.spec
        for r in range(exit_depth + 1, spec.n_recursions + 1):
            for layer in depth_layers(spec, r):
                bank = self.banks[layer.key]
                if not bank.writes_at(r):
                    continue
                b = self.weights.block(layer.uid)
                d = lambda proj: self.weights.adapter(layer.rep, layer.uid, proj)
                xa = tt.rmsnorm(x, b["attn_norm"])
                k = linear(xa, b["wk"], d("wk")).data.reshape(
                    spec.n_kv_heads, spec.d_head)
                v = linear(xa, b["wv"], d("wv")).data.reshape(
                    spec.n_kv_heads, spec.d_head)
                bank.append(r, self.slot, position, k, v)

    def flush(self):
        """Complete every pending token's remaining depths in one batched sweep."""
        if not self.pending:
            return
        with tt.no_grad():
            for r in range(2, self.spec.n_recursions + 1):
                riders = [p for p in self.pending if p.filled_depth < r]
                if not riders:
                    continue
                x = tt.Tensor(np.stack([p.state for p in riders]))
                positions = np.asarray([p.position for p in riders])
                for layer in depth_layers(self.spec, r):
                    x = apply_layer(self.weights, layer, x, positions, self._commit_hook)
                for i, p in enumerate(riders):
                    p.state = x.data[i].copy()
                    p.filled_depth = r
        self.pending = []
        self.forced_flushes += 1

    def step(self, token_id: int, position: int, policy, step_index: int,
             sampler) -> tuple:
        """Process one placed token, returning (next_token_id, trace)."""
        if position >= self.spec.context_len:
            raise SequenceLengthError(
                f"position {position} outside context_len={self.spec.context_len}")
        nr = self.spec.n_recursions
        with tt.no_grad():
            h = embed(self.weights, [token_id])
            if self.spec.share.is_middle:
                h = apply_layer(self.weights, self.layers[0], h,
                                np.asarray([position]), self._commit_hook)
            confidences, argmaxes = [], []
            exit_depth = nr
            logits_row = None
            for r in range(1, nr + 1):
                h = self._run_depth(r, h, position)
                commit = r == nr
                logits_row = self._exit_logits(h, position, commit=commit)
                p = np.exp(logits_row - logits_row.max())
                confidences.append(float(p.max() / p.sum()))
                argmaxes.append(int(np.argmax(logits_row)))
                if not commit and policy.wants_exit(step_index, r, confidences[-1]):
                    if self.spec.share.is_middle:
                        self._exit_logits(h, position, commit=True)
                    exit_depth = r
                    break

            if exit_depth < nr:
                if self.fill_mode is FillMode.STATE_COPY:
                    self._project_fill(h.data[0], position, exit_depth)
                elif self.fill_mode is FillMode.PARALLEL:
                    self.pending.append(_Pending(position, h.data[0].copy(), exit_depth))
                    if len(self.pending) >= self.exit_run_cap:
                        self.flush()
            else:
                self.pending = [p for p in self.pending if p.filled_depth < nr]

        next_id = sampler(logits_row)
        trace = ExitTrace(position, next_id, exit_depth, confidences, argmaxes,
                          len(self.pending))
        return next_id, trace

    def cache_stats(self) -> dict:
        per_depth = {}
        for key, bank in self.banks.items():
            if key[0] != "mid":
                continue
            for d in range(1, bank.n_depths + 1):
                per_depth[d] = per_depth.get(d, 0) + bank.entry_count(depth=d)
        return {
            "entries_per_depth": per_depth,
            "total_bytes": sum(b.total_bytes() for b in self.banks.values()),
            "reads": sum(b.reads for b in self.banks.values()),
            "writes": sum(b.writes for b in self.banks.values()),
        }


def decode(weights: ModelWeights, prompt_ids, n_new: int, policy=None, sampler=None,
           cache_mode: CacheMode = CacheMode.RECURSION_WISE,
           fill_mode: FillMode = FillMode.PARALLEL, share_inactive: bool = False,
           stop_token: int = None, exit_run_cap: int = EXIT_RUN_CAP) -> DecodeResult:
    """Generate up to n_new tokens after a prompt.

    The first token comes from the full-depth prefill; the exit policy
    applies to every later step.  The final emitted token is never placed
    back into the caches.
    """
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    if n_new < 1:
        raise ConfigError("n_new must be >= 1")
    if prompt.size + n_new - 1 > weights.spec.context_len:
        raise SequenceLengthError(
            f"prompt of {prompt.size} plus {n_new} new tokens exceeds "
            f"context_len={weights.spec.context_len}")
    if policy is None:
        policy = FixedDepthPolicy(weights.spec.n_recursions)
    if sampler is None:
        sampler = GreedySampler()

    session = DecodeSession(weights, cache_mode, fill_mode, share_inactive, exit_run_cap)
    logits = session.prefill(prompt)
    tokens = [int(sampler(logits))]
    traces = []
    for i in range(n_new - 1):
        if stop_token is not None and tokens[-1] == stop_token:
            break
        next_id, trace = session.step(tokens[-1], int(prompt.size) + i, policy, i, sampler)
        tokens.append(int(next_id))
        traces.append(trace)
    return DecodeResult(tokens, traces, session.forced_flushes,
                        session.cache_stats(), session)


@dataclass
class OracleResult:
    replay: DecodeResult       # early-exit run at the oracle depths
    reference: DecodeResult    # the full-depth run that defined them
    depths: list


def oracle_decode(weights: ModelWeights, prompt_ids, n_new: int,
                  cache_mode: CacheMode = CacheMode.RECURSION_WISE,
                  fill_mode: FillMode = FillMode.PARALLEL,
                  share_inactive: bool = False) -> OracleResult:
    """Two-phase oracle exit under greedy decoding.

    Phase one decodes at full depth and records, per step, the smallest
    depth whose argmax already equals the final one.  Phase two replays
    generation exiting at exactly those depths.
    """
    reference = decode(weights, prompt_ids, n_new,
                       policy=FixedDepthPolicy(weights.spec.n_recursions),
                       sampler=GreedySampler(), cache_mode=cache_mode,
                       fill_mode=fill_mode, share_inactive=share_inactive)
    depths = []
    for t in reference.traces:
        final = t.depth_argmax[-1]
        depths.append(next(d for d, a in enumerate(t.depth_argmax, 1) if a == final))
    replay = decode(weights, prompt_ids, n_new, policy=AssignedDepthPolicy(depths),
                    sampler=GreedySampler(), cache_mode=cache_mode,
                    fill_mode=fill_mode, share_inactive=share_inactive)
    return OracleResult(replay, reference, depths)


def calibrate_threshold(weights: ModelWeights, prompts, n_new: int, adaptive,
                        cache_mode: CacheMode = CacheMode.RECURSION_WISE):
    """Feed full-depth decode confidences into an adaptive threshold estimator.

    Every non-final depth contributes one observation: its confidence,
    labelled by whether its argmax matches the full-depth token.
    """
    for prompt in prompts:
        result = decode(weights, prompt, n_new,
                        policy=FixedDepthPolicy(weights.spec.n_recursions),
                        sampler=GreedySampler(), cache_mode=cache_mode)
        for t in result.traces:
            final = t.depth_argmax[-1]
            for d in range(len(t.depth_argmax) - 1):
                adaptive.observe(t.confidences[d], t.depth_argmax[d] == final)
    adaptive.fit()
    return adaptive
