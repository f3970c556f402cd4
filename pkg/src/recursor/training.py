"""Loss schedules, distillation, optimizer, and the step loop.

Scaled for toy corpora: the point is that losses compose correctly and
the routers separate, not throughput.  All math stays in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as tt
from .errors import ConfigError, NumericError
from .model import (ModelWeights, apply_layer, embed, final_logits, forward,
                    unrolled_layers)
from .routing import (AuxMode, BalanceMode, Router, RouterKind, aux_bce_loss,
                      balancing_loss, loss_free_update, max_violation,
                      mor_forward, z_loss)


class ExitMode(Enum):
    SINGLE = "single"
    WEIGHTED_AVG = "weighted_avg"
    UNWEIGHTED_AVG = "unweighted_avg"
    AGGRESSIVE = "aggressive"


class KdMode(Enum):
    NONE = "none"
    FORWARD_KL = "forward_kl"
    LAYERWISE_DYNA = "layerwise_dyna"


@dataclass(frozen=True)
class LossSchedule:
    mode: ExitMode = ExitMode.SINGLE
    aggressive_coeff: float = 0.1
    kd: KdMode = KdMode.NONE
    kd_coeff: float = 1.0

    def __post_init__(self):
        if self.aggressive_coeff < 0 or self.kd_coeff < 0:
            raise ConfigError("loss coefficients must be non-negative")


def exit_coefficients(mode: ExitMode, n_depths: int, aggressive_coeff: float = 0.1) -> list:
    """Per-depth weights on the intermediate-exit losses.

    The averaging modes normalize to sum 1; aggressive keeps the final
    output at full weight and scales the rest down uniformly.
    """
    if n_depths < 1:
        raise ConfigError("need at least one depth")
    if mode is ExitMode.SINGLE:
        return [0.0] * (n_depths - 1) + [1.0]
    if mode is ExitMode.WEIGHTED_AVG:
        total = n_depths * (n_depths + 1) / 2
        return [i / total for i in range(1, n_depths + 1)]
    if mode is ExitMode.UNWEIGHTED_AVG:
        return [1.0 / n_depths] * n_depths
    return [aggressive_coeff] * (n_depths - 1) + [1.0]


def exit_loss(per_depth_logits, targets, schedule: LossSchedule):
    """Weighted sum of per-depth cross entropies, optional self-distillation.

    Self-distillation pushes each intermediate distribution toward the
    detached final one with a forward KL term.
    """
    n = len(per_depth_logits)
    coeffs = exit_coefficients(schedule.mode, n, schedule.aggressive_coeff)
    targets = np.asarray(targets, dtype=np.int64)
    parts = {}
    total = None
    for i, logits in enumerate(per_depth_logits):
        ce = tt.cross_entropy(logits, targets)
        parts[f"ce_depth{i + 1}"] = float(ce.data)
        term = tt.mul_const(ce, coeffs[i])
        total = term if total is None else tt.add(total, term)
    if schedule.kd is KdMode.FORWARD_KL and n > 1:
        teacher = per_depth_logits[-1].data
        kl_sum = None
        for logits in per_depth_logits[:-1]:
            kl = tt.forward_kl(teacher, logits)
            kl_sum = kl if kl_sum is None else tt.add(kl_sum, kl)
        kd = tt.mul_const(kl_sum, schedule.kd_coeff / (n - 1))
        parts["kd"] = float(kd.data)
        total = tt.add(total, kd)
    return total, parts


# ---- layerwise distillation mapping ----


def _pair_mse(shallow: np.ndarray, deep: np.ndarray) -> np.ndarray:
    """cost[i, j] = mean squared difference between shallow i and deep j."""
    ns, nd = len(shallow), len(deep)
    cost = np.empty((ns, nd))
    for i in range(ns):
        for j in range(nd):
            cost[i, j] = np.mean((shallow[i] - deep[j]) ** 2)
    return cost


def kd_dyna_map(shallow_hiddens, deep_hiddens) -> list:
    """Monotone shallow-to-deep layer assignment minimizing total MSE.

    Returns 1-based deep indices m with m[0] <= m[1] <= ...; among equal-
    cost assignments the lexicographically smallest wins.
    """
    shallow = [np.asarray(h.data if isinstance(h, tt.Tensor) else h) for h in shallow_hiddens]
    deep = [np.asarray(h.data if isinstance(h, tt.Tensor) else h) for h in deep_hiddens]
    ns, nd = len(shallow), len(deep)
    if ns == 0 or nd == 0:
        raise ConfigError("both hidden stacks must be non-empty")
    if ns > nd:
        raise ConfigError(f"cannot map {ns} shallow layers into {nd} deep layers monotonically")
    cost = _pair_mse(shallow, deep)

    # suffix[i][j]: best cost of assigning shallow i.. given m[i] = j
    suffix = np.empty((ns, nd))
    suffix[ns - 1] = cost[ns - 1]
    for i in range(ns - 2, -1, -1):
        best_tail = np.minimum.accumulate(suffix[i + 1][::-1])[::-1]
        suffix[i] = cost[i] + best_tail
    mapping = []
    j_min = 0
    for i in range(ns):
        j = j_min + int(np.argmin(suffix[i][j_min:]))   # argmin takes the first minimum
        mapping.append(j + 1)
        j_min = j
    return mapping


def kd_dyna_loss(shallow_hiddens, deep_hiddens):
    """Mean MSE over the mapped layer pairs; the deep side is the teacher."""
    mapping = kd_dyna_map(shallow_hiddens, deep_hiddens)
    total = None
    for i, j in enumerate(mapping):
        s = shallow_hiddens[i]
        if not isinstance(s, tt.Tensor):
            s = tt.Tensor(s)
        d = deep_hiddens[j - 1]
        d = d.data if isinstance(d, tt.Tensor) else np.asarray(d)
        diff = tt.add_const(s, -d)
        term = tt.tmean(tt.mul(diff, diff))
        total = term if total is None else tt.add(total, term)
    return tt.mul_const(total, 1.0 / len(mapping)), mapping


def layer_hiddens(weights: ModelWeights, token_ids) -> list:
    """Hidden state after every unrolled layer; the distillation teacher view."""
    ids = np.asarray(token_ids, dtype=np.int64)
    positions = np.arange(ids.size)
    x = embed(weights, ids)
    out = []
    for layer in unrolled_layers(weights.spec):
        x = apply_layer(weights, layer, x, positions)
        out.append(x)
    return out


# ---- optimizer ----


class CosineLR:
    def __init__(self, base: float, total_steps: int, warmup: int = 0):
        self.base = base
        self.total = max(total_steps, 1)
        self.warmup = warmup

    def __call__(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.base * (step + 1) / self.warmup
        frac = min((step - self.warmup) / max(self.total - self.warmup, 1), 1.0)
        return self.base * 0.5 * (1 + math.cos(math.pi * frac))


class TrapezoidLR:
    """Linear warmup, flat plateau, linear cooldown to zero."""

    def __init__(self, base: float, warmup: int, plateau: int, cooldown: int):
        self.base = base
        self.warmup = warmup
        self.plateau = plateau
        self.cooldown = cooldown

    def __call__(self, step: int) -> float:
        if step < self.warmup:
            return self.base * (step + 1) / max(self.warmup, 1)
        if step < self.warmup + self.plateau:
            return self.base
        done = step - self.warmup - self.plateau
        if done >= self.cooldown:
            return 0.0
        return self.base * (1 - done / self.cooldown)


class AdamW:
    """Decoupled weight decay, global-norm clipping, optional LR schedule.

    Decay applies to matrices only; vectors (norm gains, biases) are
    exempt, as is anything listed in no_decay.
    """

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.1,
                 clip_norm: float = 1.0, schedule=None):
        self.params = dict(params)
        self.base_lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.schedule = schedule
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad ** 2))
        return math.sqrt(total)

    @property
    def lr(self) -> float:
        if self.schedule is not None:
            return self.schedule(self.step_count)
        return self.base_lr

    def step(self) -> float:
        norm = self.grad_norm()
        scale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        lr = self.lr
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = (p.grad if p.grad is not None else np.zeros_like(p.data)) * scale
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name}")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** t)
            vhat = self.v[name] / (1 - b2 ** t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
            if p.data.ndim >= 2 and self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
        return norm


# ---- the step ----


def router_loss_terms(router: Router, routed, parts: dict):
    """Auxiliary objectives configured on the router; returns a Tensor or None."""
    cfg = router.config
    total = None

    def accumulate(term, name, coeff):
        nonlocal total
        scaled = tt.mul_const(term, coeff)
        parts[name] = float(scaled.data)
        total = scaled if total is None else tt.add(total, scaled)

    if cfg.kind is RouterKind.EXPERT_CHOICE and cfg.aux_mode is not AuxMode.NONE:
        scores = routed.aux_step_scores if cfg.aux_mode is AuxMode.AUX_ROUTER \
            else routed.step_scores
        bce_sum = None
        for s, mask in zip(scores, routed.step_masks):
            term = aux_bce_loss(s, mask)
            bce_sum = term if bce_sum is None else tt.add(bce_sum, term)
        accumulate(bce_sum, "aux", cfg.aux_coeff)
    if cfg.kind is RouterKind.TOKEN_CHOICE:
        if cfg.balance_mode is BalanceMode.BALANCE_LOSS:
            accumulate(balancing_loss(routed.gates, routed.depths, router.n_recursions),
                       "balance", cfg.balance_coeff)
        if cfg.z_coeff:
            accumulate(z_loss(routed.router_logits), "z", cfg.z_coeff)
    return total


def train_step(weights: ModelWeights, batch: np.ndarray, optim: AdamW,
               schedule: LossSchedule = None, router: Router = None,
               kv_mode: str = "recursion_wise", teacher: ModelWeights = None) -> dict:
    """One optimizer update on a [B, T+1] batch of token ids.

    Without a router this is (optionally multi-exit) language modelling;
    with one, the routed forward's per-token exit logits carry the LM loss
    and the router's auxiliary objectives are added on top.
    """
    if schedule is None:
        schedule = LossSchedule()
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 2 or batch.shape[1] < 2:
        raise ConfigError("batch must be [B, T+1] with T >= 1")
    optim.zero_grad()

    B = batch.shape[0]
    total = None
    parts_sum = {}
    counts_sum = np.zeros(router.n_recursions if router else 1)
    maxvio_vals = []
    for b in range(B):
        ids, targets = batch[b, :-1], batch[b, 1:]
        parts = {}
        if router is None:
            need_exits = schedule.mode is not ExitMode.SINGLE or schedule.kd is KdMode.FORWARD_KL
            fr = forward(weights, ids, want_exit_logits=need_exits)
            logits_list = fr.exit_logits if need_exits else [fr.logits]
            loss, parts = exit_loss(logits_list, targets, schedule)
            if schedule.kd is KdMode.LAYERWISE_DYNA:
                if teacher is None:
                    raise ConfigError("layerwise distillation needs a teacher model")
                with tt.no_grad():
                    deep = [h.data for h in layer_hiddens(teacher, ids)]
                kd, _ = kd_dyna_loss(fr.boundary_states, deep)
                kd = tt.mul_const(kd, schedule.kd_coeff)
                parts["kd"] = float(kd.data)
                loss = tt.add(loss, kd)
        else:
            routed = mor_forward(weights, router, ids, kv_mode=kv_mode)
            loss = tt.cross_entropy(routed.logits, targets)
            parts["lm"] = float(loss.data)
            extra = router_loss_terms(router, routed, parts)
            if extra is not None:
                loss = tt.add(loss, extra)
            counts_sum += np.bincount(routed.depths - 1, minlength=router.n_recursions)
            maxvio_vals.append(max_violation(
                np.bincount(routed.depths - 1, minlength=router.n_recursions)))
        total = loss if total is None else tt.add(total, loss)
        for k, v in parts.items():
            parts_sum[k] = parts_sum.get(k, 0.0) + v / B

    total = tt.mul_const(total, 1.0 / B)
    if not np.isfinite(total.data):
        raise NumericError(
            f"non-finite loss at optimizer step {optim.step_count}: {parts_sum}")
    total.backward()
    grad_norm = optim.step()

    if router is not None and router.config.balance_mode is BalanceMode.LOSS_FREE:
        router.biases = loss_free_update(counts_sum, router.biases,
                                         router.config.bias_update_rate)

    metrics = {"step": optim.step_count, "loss": float(total.data),
               "grad_norm": grad_norm, "lr": optim.lr, **parts_sum}
    if router is not None:
        metrics["depth_counts"] = counts_sum.tolist()
        metrics["max_violation"] = float(np.mean(maxvio_vals)) if maxvio_vals else 0.0
    return metrics


def trainable_parameters(weights: ModelWeights, router: Router = None,
                         adapters_only: bool = False) -> dict:
    """Named tensors the optimizer should touch."""
    params = {}
    if not adapters_only:
        params.update(weights.named_parameters())
    for (rep, uid, proj), delta in weights.adapters.items():
        if delta.rank > 0:
            params[f"lora.{rep}.{uid}.{proj}.A"] = delta.A
            params[f"lora.{rep}.{uid}.{proj}.B"] = delta.B
    if router is not None:
        params.update(router.named_parameters())
    return params


def train_loop(weights: ModelWeights, batches, optim: AdamW,
               schedule: LossSchedule = None, router: Router = None,
               kv_mode: str = "recursion_wise", teacher: ModelWeights = None,
               on_step=None) -> list:
    """Run train_step over an iterable of batches, collecting metrics."""
    history = []
    for batch in batches:
        metrics = train_step(weights, batch, optim, schedule, router, kv_mode, teacher)
        history.append(metrics)
        if on_step is not None:
            on_step(metrics)
    return history
