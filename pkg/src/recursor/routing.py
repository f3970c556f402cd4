"""Per-token recursion-depth routing.

Two router families.  Expert-choice runs one scorer per recursion step and
keeps the top-k scoring tokens among those still active, with capacities
shrinking linearly over depth, so the surviving sets are nested.  Token-
choice scores once at entry and commits each token to a depth with a top-1
decision; tokens assigned depth i traverse steps 1..i.

The gate multiplier applied to block outputs is alpha * G(score); top-k
membership, auxiliary targets, and the 0.5 inference threshold all use the
raw G(score) in (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as tt
from .errors import ConfigError
from .model import (ModelWeights, apply_layer, depth_layers, embed, final_logits,
                    self_attention_hook, unrolled_layers)


class RouterKind(Enum):
    EXPERT_CHOICE = "expert_choice"
    TOKEN_CHOICE = "token_choice"


class Activation(Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    SOFTMAX = "softmax"


class RouterArch(Enum):
    LINEAR = "linear"
    MLP = "mlp"
    WIDE_MLP = "wide_mlp"


class AuxMode(Enum):
    AUX_LOSS = "aux_loss"
    AUX_ROUTER = "aux_router"
    NONE = "none"


class BalanceMode(Enum):
    BALANCE_LOSS = "balance_loss"
    LOSS_FREE = "loss_free"
    NONE = "none"


@dataclass(frozen=True)
class RouterConfig:
    kind: RouterKind
    activation: Activation
    arch: RouterArch = RouterArch.LINEAR
    alpha: float = 1.0                    # scale applied after the activation
    aux_mode: AuxMode = AuxMode.NONE      # expert-choice only
    balance_mode: BalanceMode = BalanceMode.NONE  # token-choice only
    aux_coeff: float = 0.001
    balance_coeff: float = 0.1
    z_coeff: float = 0.0
    bias_update_rate: float = 0.001       # loss-free balancing step size
    capacities: tuple = None              # per-step fractions, default linear

    def __post_init__(self):
        if self.kind is RouterKind.EXPERT_CHOICE:
            if self.balance_mode is not BalanceMode.NONE:
                raise ConfigError("balance_mode applies to the token-choice router only")
            if self.activation is Activation.SOFTMAX:
                raise ConfigError("softmax activation needs the token-choice router")
        else:
            if self.aux_mode is not AuxMode.NONE:
                raise ConfigError("aux_mode applies to the expert-choice router only")
        if self.capacities is not None:
            if abs(self.capacities[0] - 1.0) > 1e-12:
                raise ConfigError("first-step capacity fraction must be 1")
            if any(not 0 < c <= 1 for c in self.capacities):
                raise ConfigError("capacity fractions must lie in (0, 1]")
            if any(b > a for a, b in zip(self.capacities, self.capacities[1:])):
                raise ConfigError("capacity fractions must be non-increasing")


def expert_choice_default() -> RouterConfig:
    return RouterConfig(kind=RouterKind.EXPERT_CHOICE, activation=Activation.SIGMOID,
                        arch=RouterArch.LINEAR, alpha=0.1, aux_mode=AuxMode.AUX_LOSS,
                        aux_coeff=0.001)


def token_choice_default() -> RouterConfig:
    return RouterConfig(kind=RouterKind.TOKEN_CHOICE, activation=Activation.SOFTMAX,
                        arch=RouterArch.LINEAR, alpha=1.0,
                        balance_mode=BalanceMode.BALANCE_LOSS, balance_coeff=0.1,
                        z_coeff=0.001)


class Router:
    """Router parameters plus non-trainable balancing state."""

    def __init__(self, config: RouterConfig, d_model: int, n_recursions: int, seed: int = 0):
        self.config = config
        self.n_recursions = n_recursions
        self.params = {}
        g = np.random.default_rng(seed)
        hidden = {RouterArch.LINEAR: 0, RouterArch.MLP: d_model,
                  RouterArch.WIDE_MLP: 4 * d_model}[config.arch]

        def make_head(prefix: str, n_out: int):
            if hidden:
                self.params[f"{prefix}.w0"] = tt.Tensor(
                    g.normal(0.0, 0.02, (d_model, hidden)), requires_grad=True)
                self.params[f"{prefix}.w1"] = tt.Tensor(
                    g.normal(0.0, 0.02, (hidden, n_out)), requires_grad=True)
            else:
                self.params[f"{prefix}.w0"] = tt.Tensor(
                    g.normal(0.0, 0.02, (d_model, n_out)), requires_grad=True)

        if config.kind is RouterKind.EXPERT_CHOICE:
            for r in range(1, n_recursions + 1):
                make_head(f"router.step{r}", 1)
                if config.aux_mode is AuxMode.AUX_ROUTER:
                    make_head(f"aux_router.step{r}", 1)
        else:
            make_head("router", n_recursions)
        # selection bias for loss-free balancing; never touches stored gates
        self.biases = np.zeros(n_recursions)

    def _head(self, prefix: str, h) -> tt.Tensor:
        if f"{prefix}.w1" in self.params:
            mid = tt.gelu(tt.matmul(h, self.params[f"{prefix}.w0"]))
            return tt.matmul(mid, self.params[f"{prefix}.w1"])
        return tt.matmul(h, self.params[f"{prefix}.w0"])

    def _activate(self, logits: tt.Tensor) -> tt.Tensor:
        act = self.config.activation
        if act is Activation.SIGMOID:
            return tt.sigmoid(logits)
        if act is Activation.TANH:
            return tt.tanh(logits)
        return tt.softmax(logits, axis=-1)

    def step_scores(self, h, r: int) -> tt.Tensor:
        """Expert-choice selection scores G for recursion step r, shape [T, 1]."""
        return self._activate(self._head(f"router.step{r}", h))

    def aux_scores(self, h, r: int) -> tt.Tensor:
        """Auxiliary router prediction on a detached hidden state."""
        hd = h.detach() if isinstance(h, tt.Tensor) else tt.Tensor(h)
        return self._activate(self._head(f"aux_router.step{r}", hd))

    def tc_logits(self, h) -> tt.Tensor:
        """Token-choice pre-activation logits over depths, shape [T, n_recursions]."""
        return self._head("router", h)

    def named_parameters(self) -> dict:
        return dict(self.params)


# ---- selection primitives ----


def capacity_schedule(n_recursions: int, n_tokens: int, fractions=None) -> list:
    """Tokens kept per step; the default shrinks linearly to 1/n_recursions.

    k_r = floor(T * (n_r - r + 1) / n_r), so step 1 always keeps everything.
    """
    if fractions is not None:
        return [int(np.floor(n_tokens * f)) for f in fractions]
    n = n_recursions
    return [int(np.floor(n_tokens * (n - r + 1) / n)) for r in range(1, n + 1)]


def expert_choice_select(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k highest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    k = max(0, min(int(k), scores.size))
    mask = np.zeros(scores.size, dtype=bool)
    if k:
        order = np.argsort(-scores, kind="stable")
        mask[order[:k]] = True
    return mask


def token_choice_assign(gates: np.ndarray, biases: np.ndarray = None) -> np.ndarray:
    """1-based depth per token by top-1 over gates (+ selection-only biases)."""
    gates = np.asarray(gates, dtype=np.float64)
    scores = gates if biases is None else gates + np.asarray(biases)
    return scores.argmax(axis=-1) + 1


def threshold_select(scores: np.ndarray, k: int, threshold: float = 0.5) -> np.ndarray:
    """Inference-time expert choice: scores above threshold, top-k if none pass."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    mask = scores > threshold
    if not mask.any():
        return expert_choice_select(scores, min(1, k))
    return mask


# ---- balancing terms ----


def aux_bce_loss(scores, mask) -> tt.Tensor:
    """Binary cross entropy pushing top-k scores to 1 and the rest to 0."""
    return tt.bce(tt.reshape(scores, (-1,)), np.asarray(mask, dtype=np.float64))


def balancing_loss(gates, depths: np.ndarray, n_recursions: int) -> tt.Tensor:
    """sum_i f_i P_i with f_i the scaled assignment counts, P_i mean gate mass."""
    depths = np.asarray(depths)
    T = depths.size
    counts = np.bincount(depths - 1, minlength=n_recursions).astype(np.float64)
    f = counts * n_recursions / T
    p = tt.tmean(gates, axis=0)
    return tt.tsum(tt.mul_const(p, f))


def loss_free_update(counts: np.ndarray, biases: np.ndarray, rate: float) -> np.ndarray:
    """Nudge selection biases toward uniform load; sign(0) moves nothing."""
    counts = np.asarray(counts, dtype=np.float64)
    err = counts.mean() - counts
    return np.asarray(biases, dtype=np.float64) + rate * np.sign(err)


def z_loss(logits) -> tt.Tensor:
    """Mean squared log-partition of router logits, keeps them small."""
    return tt.tmean(tt.power(tt.logsumexp(logits, axis=-1), 2.0))


# ---- routed forward ----


@dataclass
class RoutedResult:
    logits: tt.Tensor                 # [T, vocab] per-token output at its exit depth
    depths: np.ndarray                # 1-based exit depth per token
    selection: np.ndarray             # [n_recursions, T] active mask per step
    step_scores: list                 # expert-choice: Tensor [k_prev, 1] per step
    step_masks: list                  # expert-choice: np top-k mask over active tokens
    aux_step_scores: list             # aux-router scores per step, or empty
    gates: tt.Tensor = None           # token-choice: [T, n_recursions] activations
    router_logits: tt.Tensor = None   # token-choice: pre-activation logits
    counts: np.ndarray = None         # token-choice: assignment histogram


def _step_hooks(weights, kv_mode: str, saved: dict):
    """Attention-context factories for routed steps.

    saved maps cache stream key -> (k Tensor, v Tensor, positions) captured
    at step 1, used by recursive-share and hybrid modes.
    """
    def first_step(layer, k, v, positions):
        saved[layer.key] = (k, v, positions)
        return k, v, positions

    def fresh(layer, k, v, positions):
        return k, v, positions

    def shared(layer, k, v, positions):
        return saved[layer.key]

    def hybrid(layer, k, v, positions):
        k1, v1, pos1 = saved[layer.key]
        stale = ~np.isin(pos1, positions)
        merged_pos = np.concatenate([positions, pos1[stale]])
        order = np.argsort(merged_pos, kind="stable")
        K = tt.index_rows(tt.concat_rows([k, tt.index_rows(k1, np.where(stale)[0])]), order)
        V = tt.index_rows(tt.concat_rows([v, tt.index_rows(v1, np.where(stale)[0])]), order)
        return K, V, merged_pos[order]

    if kv_mode == "recursive_share":
        return first_step, shared
    if kv_mode == "hybrid":
        return first_step, hybrid
    return first_step, fresh


def mor_forward(weights: ModelWeights, router: Router, token_ids, positions=None,
                kv_mode: str = "recursion_wise", inference: bool = False) -> RoutedResult:
    """One routed pass over a full sequence.

    Expert-choice applies H <- gate * block(H) + H on surviving tokens and
    leaves the rest untouched; token-choice applies H <- gate * block(H),
    adding the entry state as a residual only on a token's final step.
    During training, expert-choice selects by capacity top-k; at inference
    it thresholds at 0.5 (aux router scores if one was trained).
    """
    spec = weights.spec
    if kv_mode not in ("recursion_wise", "recursive_share", "hybrid"):
        raise ConfigError(f"unknown kv_mode {kv_mode!r}")
    ids = np.asarray(token_ids, dtype=np.int64)
    T = ids.size
    if positions is None:
        positions = np.arange(T)
    positions = np.asarray(positions, dtype=np.int64)

    layers = unrolled_layers(spec)
    nr = spec.n_recursions
    x = embed(weights, ids)
    if spec.share.is_middle:
        x = apply_layer(weights, layers[0], x, positions, self_attention_hook)

    saved = {}
    first_hook, deep_hook = _step_hooks(weights, kv_mode, saved)
    caps = capacity_schedule(nr, T, router.config.capacities)
    selection = np.zeros((nr, T), dtype=bool)
    result = RoutedResult(None, None, selection, [], [], [])

    if router.config.kind is RouterKind.EXPERT_CHOICE:
        h = x
        active = np.arange(T)
        depths = np.zeros(T, dtype=np.int64)
        for r in range(1, nr + 1):
            h_active = tt.index_rows(h, active)
            scores = router.step_scores(h_active, r)
            result.step_scores.append(scores)
            if router.config.aux_mode is AuxMode.AUX_ROUTER:
                result.aux_step_scores.append(router.aux_scores(h_active, r))

            if inference:
                sel_scores = (result.aux_step_scores[-1] if result.aux_step_scores
                              else scores).data.reshape(-1)
                local = threshold_select(sel_scores, caps[r - 1]) if r > 1 else \
                    np.ones(active.size, dtype=bool)
            else:
                local = expert_choice_select(scores.data.reshape(-1), caps[r - 1])
            result.step_masks.append(local)
            chosen = active[local]
            selection[r - 1, chosen] = True
            depths[chosen] = r

            hook = first_hook if r == 1 else deep_hook
            h_sel = tt.index_rows(h, chosen)
            out = h_sel
            for layer in depth_layers(spec, r):
                out = apply_layer(weights, layer, out, positions[chosen], hook)
            gate = tt.mul_const(tt.index_rows(scores, np.where(local)[0]),
                                router.config.alpha)
            h = tt.add(h, tt.scatter_rows(tt.mul(gate, out), chosen, T))
            active = chosen
            if active.size == 0:
                break
        result.depths = depths
        final = h
    else:
        logits_rt = router.tc_logits(x)
        gates = router._activate(logits_rt)
        biases = router.biases if router.config.balance_mode is BalanceMode.LOSS_FREE else None
        depths = token_choice_assign(gates.data, biases)
        result.router_logits = logits_rt
        result.gates = gates
        result.depths = depths
        result.counts = np.bincount(depths - 1, minlength=nr).astype(np.int64)

        h = x
        entry = x
        for r in range(1, nr + 1):
            chosen = np.where(depths >= r)[0]
            selection[r - 1, chosen] = True
            if chosen.size == 0:
                break
            hook = first_hook if r == 1 else deep_hook
            h_sel = tt.index_rows(h, chosen)
            out = h_sel
            for layer in depth_layers(spec, r):
                out = apply_layer(weights, layer, out, positions[chosen], hook)
            gate = tt.mul_const(tt.take_column(tt.index_rows(gates, chosen), r - 1),
                                router.config.alpha)
            new = tt.mul(gate, out)
            ending = depths[chosen] == r
            if ending.any():
                end_idx = np.where(ending)[0]
                new = tt.add(new, tt.scatter_rows(
                    tt.index_rows(tt.index_rows(entry, chosen), end_idx),
                    end_idx, chosen.size))
            keep = np.ones((T, 1))
            keep[chosen] = 0.0
            h = tt.add(tt.mul_const(h, keep), tt.scatter_rows(new, chosen, T))
        final = h

    if spec.share.is_middle:
        final = apply_layer(weights, layers[-1], final, positions, self_attention_hook)
    result.logits = final_logits(weights, final)
    return result


# ---- metrics ----


def dead_token_ratio(final_step_masks: np.ndarray) -> float:
    """Fraction of positions never selected at the last step across samples.

    Input is [n_samples, seq_len] booleans; a position is dead when no
    sample selected it, which flags positional bias in the router.
    """
    m = np.asarray(final_step_masks, dtype=bool)
    if m.ndim == 1:
        m = m[None, :]
    return float(1.0 - m.any(axis=0).mean())


def max_violation(counts: np.ndarray) -> float:
    """(max load - mean load) / mean load over depth assignment counts."""
    counts = np.asarray(counts, dtype=np.float64)
    mean = counts.mean()
    if mean == 0:
        return 0.0
    return float((counts.max() - mean) / mean)


def selection_entropy(probs: np.ndarray) -> float:
    """Natural-log entropy of the mean per-depth selection probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim > 1:
        p = p.mean(axis=0)
    p = p / p.sum()
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def score_histogram_overlap(a, b, bins: int = 50, lo: float = 0.0,
                            hi: float = 1.0) -> float:
    """Shared probability mass of two score samples on a common binning.

    0 means fully separated populations, 1 means indistinguishable.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    edges = np.linspace(lo, hi, bins + 1)
    ha, _ = np.histogram(a, bins=edges)
    hb, _ = np.histogram(b, bins=edges)
    return float(np.minimum(ha / a.size, hb / b.size).sum())


def sampling_accuracy(predicted_mask: np.ndarray, trained_mask: np.ndarray) -> float:
    """Agreement between inference-time selection and training top-k membership."""
    a = np.asarray(predicted_mask, dtype=bool).reshape(-1)
    b = np.asarray(trained_mask, dtype=bool).reshape(-1)
    if a.size != b.size:
        raise ValueError("mask lengths differ")
    return float((a == b).mean())


def evaluate_router(weights, router: Router, sequences,
                    kv_mode: str = "recursion_wise") -> dict:
    """Routing-quality metrics over a batch of token sequences.

    Histogram inputs come from the final recursion step: the scores of
    tokens still in the running, split by whether top-k kept them.
    Sampling accuracy compares threshold-based inference selection with
    the training-time top-k on the same inputs.
    """
    nr = router.n_recursions
    sel_scores, unsel_scores = [], []
    final_masks = []
    counts = np.zeros(nr)
    agreement = []
    with tt.no_grad():
        for row in sequences:
            rr = mor_forward(weights, router, row, kv_mode=kv_mode)
            counts += np.bincount(rr.depths - 1, minlength=nr)
            final_masks.append(rr.selection[-1])
            if router.config.kind is RouterKind.EXPERT_CHOICE and rr.step_scores:
                scores = rr.step_scores[-1].data.reshape(-1)
                mask = rr.step_masks[-1]
                sel_scores.extend(scores[mask])
                unsel_scores.extend(scores[~mask])
                ri = mor_forward(weights, router, row, kv_mode=kv_mode, inference=True)
                agreement.append(float((rr.selection[1:] == ri.selection[1:]).mean()))
    out = {
        "dead_token_ratio": dead_token_ratio(np.stack(final_masks)),
        "max_violation": max_violation(counts),
        "entropy": selection_entropy(counts / counts.sum()),
        "depth_counts": counts.tolist(),
        "selected_scores": np.asarray(sel_scores),
        "unselected_scores": np.asarray(unsel_scores),
    }
    if sel_scores and unsel_scores:
        out["overlap"] = score_histogram_overlap(sel_scores, unsel_scores)
    if agreement:
        out["sampling_accuracy"] = float(np.mean(agreement))
    return out


def trace_records(result: RoutedResult, sample_id: int) -> list:
    """Per-token routing records: scores while active, selection flags, depth."""
    T = result.selection.shape[1]
    records = []
    if result.gates is not None:
        score_rows = result.gates.data
        for t in range(T):
            records.append({
                "sample_id": sample_id, "token_index": t,
                "scores": [float(s) for s in score_rows[t]],
                "selected": [bool(b) for b in result.selection[:, t]],
                "depth": int(result.depths[t]),
            })
        return records

    per_token_scores = [[] for _ in range(T)]
    active = np.arange(T)
    for scores, local in zip(result.step_scores, result.step_masks):
        flat = scores.data.reshape(-1)
        for idx, tok in enumerate(active):
            per_token_scores[tok].append(float(flat[idx]))
        active = active[local]
    for t in range(T):
        records.append({
            "sample_id": sample_id, "token_index": t,
            "scores": per_token_scores[t],
            "selected": [bool(b) for b in result.selection[:, t]],
            "depth": int(result.depths[t]),
        })
    return records
