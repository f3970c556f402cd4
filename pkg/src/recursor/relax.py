"""Turning an untied model into a tied one, and relaxing the tie back.

Looped initialization builds the shared blocks of a tied model from an
untied source.  Relaxation then attaches one low-rank delta per projection
and per repetition of each shared block, initialized from the truncated
SVD of the residual between the source layer at that repetition and the
shared weight.  At full rank the deltas reconstruct the source exactly;
at rank zero they vanish and the model is the plain tied one.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as tt
from .errors import ConfigError
from .model import (LORA_PROJECTIONS, BLOCK_PARAM_NAMES, ModelSpec, ModelWeights,
                    ShareStrategy, unrolled_layers)


class InitMethod(Enum):
    STEPWISE = "stepwise"
    AVERAGE = "average"
    LOWER = "lower"
    RANDOM = "random"


class NormInit(Enum):
    AVERAGE = "average"
    CHOICE = "choice"
    ZERO = "zero"


@dataclass
class LoraDelta:
    """Low-rank additive delta; A is [rank, in], B is [out, rank].

    The effective update to a weight stored [in, out] is (B @ A)^T, applied
    as (x @ A^T) @ B^T with unit scale.  rank 0 means no delta at all.
    """
    A: tt.Tensor
    B: tt.Tensor
    rank: int


def init_lora_svd(w_source, w_tied, rank: int, generator=None) -> LoraDelta:
    """Delta factors from the truncated SVD of (source - tied).

    Weights are in the model's [in, out] layout.  B takes U_r Sigma_r and A
    takes V_r^T of the residual viewed [out, in].  An elementwise-identical
    pair falls back to the standard zero start: Gaussian A, zero B, so the
    delta contributes nothing until trained.
    """
    ws = w_source.data if isinstance(w_source, tt.Tensor) else np.asarray(w_source)
    wt = w_tied.data if isinstance(w_tied, tt.Tensor) else np.asarray(w_tied)
    if ws.shape != wt.shape:
        raise ConfigError(f"shape mismatch {ws.shape} vs {wt.shape} for low-rank init")
    n_in, n_out = ws.shape
    rank = int(rank)
    if rank < 0:
        raise ConfigError("rank must be >= 0")
    rank = min(rank, n_in, n_out)
    if rank == 0:
        return LoraDelta(tt.Tensor(np.zeros((0, n_in)), requires_grad=True),
                         tt.Tensor(np.zeros((n_out, 0)), requires_grad=True), 0)

    residual = (ws - wt).T  # [out, in]
    if not residual.any():
        if generator is None:
            generator = np.random.default_rng(0)
        a = generator.normal(0.0, 1.0 / np.sqrt(n_in), size=(rank, n_in))
        return LoraDelta(tt.Tensor(a, requires_grad=True),
                         tt.Tensor(np.zeros((n_out, rank)), requires_grad=True), rank)

    u, s, vt = np.linalg.svd(residual, full_matrices=False)
    b = u[:, :rank] * s[:rank]
    a = vt[:rank, :]
    return LoraDelta(tt.Tensor(a, requires_grad=True),
                     tt.Tensor(b, requires_grad=True), rank)


def delta_matrix(delta: LoraDelta) -> np.ndarray:
    """The dense [in, out] update the delta represents."""
    if delta.rank == 0:
        return np.zeros((delta.A.shape[1], delta.B.shape[0]))
    return (delta.B.data @ delta.A.data).T


def _stepwise_indices(lo: int, hi: int, count: int) -> list:
    """`count` source indices spread over [lo, hi], endpoints always included.

    Interior picks round to the nearest integer (banker's rounding on .5).
    """
    if count == 1:
        return [lo]
    span = hi - lo
    return [lo + round(j * span / (count - 1)) for j in range(count)]


def _tied_groups(spec: ModelSpec) -> dict:
    """uid -> ordered list of source layer indices that collapse into it."""
    groups = {}
    for layer in unrolled_layers(spec):
        groups.setdefault(layer.uid, []).append(layer.ell)
    return groups


def _chosen_source(spec: ModelSpec, method: InitMethod) -> dict:
    """uid -> the single source layer a selecting method reads, or None."""
    if method is InitMethod.LOWER:
        return {uid: ells[0] for uid, ells in _tied_groups(spec).items()}
    if method is not InitMethod.STEPWISE:
        return {uid: ells[0] for uid, ells in _tied_groups(spec).items()}

    chosen = {}
    if spec.share.is_middle:
        chosen[0] = 0
        chosen[spec.n_unique - 1] = spec.n_layers - 1
        picks = _stepwise_indices(1, spec.n_layers - 2, spec.block_size)
        for j, src in enumerate(picks):
            chosen[j + 1] = src
    else:
        picks = _stepwise_indices(0, spec.n_layers - 1, spec.n_unique)
        for uid, src in enumerate(picks):
            chosen[uid] = src
    return chosen


def init_looped(source: ModelWeights, spec: ModelSpec, method: InitMethod = InitMethod.AVERAGE,
                norm_init: NormInit = NormInit.AVERAGE, seed: int = 0) -> ModelWeights:
    """Build tied weights for `spec` from an untied source of the same dims.

    Average takes the elementwise mean of each tied group; stepwise picks
    evenly spaced source layers with the ends fixed; lower takes the lowest
    layers; random ignores the source.  Norm weights follow norm_init, with
    average falling back to the chosen layer if the group variance blows up.
    """
    src_spec = source.spec
    if src_spec.share is not ShareStrategy.NONE:
        raise ConfigError("looped init needs an untied source model")
    if spec.share is ShareStrategy.NONE:
        raise ConfigError("looped init needs a tying strategy on the target")
    for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_head",
                 "d_inter", "vocab_size"):
        if getattr(src_spec, name) != getattr(spec, name):
            raise ConfigError(f"source and target disagree on {name}")

    g = np.random.default_rng(seed)
    groups = _tied_groups(spec)
    chosen = _chosen_source(spec, method)
    matrix_names = [n for n in BLOCK_PARAM_NAMES if "norm" not in n]

    p = {"embedding": tt.Tensor(source.params["embedding"].data.copy(), requires_grad=True)}
    for uid in range(spec.n_unique):
        ells = groups[uid]
        for name in BLOCK_PARAM_NAMES:
            stack = np.stack([source.params[f"blocks.{e}.{name}"].data for e in ells])
            if name in matrix_names:
                if len(ells) == 1:
                    value = stack[0].copy()
                elif method is InitMethod.AVERAGE:
                    value = stack.mean(axis=0)
                elif method is InitMethod.RANDOM:
                    value = g.normal(0.0, 0.02, size=stack[0].shape)
                else:
                    value = source.params[f"blocks.{chosen[uid]}.{name}"].data.copy()
            else:
                if norm_init is NormInit.ZERO:
                    value = np.zeros_like(stack[0])
                elif norm_init is NormInit.CHOICE or len(ells) == 1:
                    value = source.params[f"blocks.{chosen[uid]}.{name}"].data.copy()
                else:
                    value = stack.mean(axis=0)
                    # a wildly spread group makes the mean meaningless
                    if stack.var(axis=0).max() > 1.0:
                        value = source.params[f"blocks.{chosen[uid]}.{name}"].data.copy()
            p[f"blocks.{uid}.{name}"] = tt.Tensor(value, requires_grad=True)

    p["final_norm"] = tt.Tensor(source.params["final_norm"].data.copy(), requires_grad=True)
    if not spec.tie_embeddings:
        if src_spec.tie_embeddings:
            p["head"] = tt.Tensor(source.params["embedding"].data.T.copy(), requires_grad=True)
        else:
            p["head"] = tt.Tensor(source.params["head"].data.copy(), requires_grad=True)
    return ModelWeights(spec, p)


def resolve_ranks(rank, default=0) -> dict:
    """Normalize a shared int or per-projection dict into proj -> rank."""
    if isinstance(rank, dict):
        unknown = set(rank) - set(LORA_PROJECTIONS)
        if unknown:
            raise ConfigError(f"unknown projection names {sorted(unknown)}")
        return {proj: int(rank.get(proj, default)) for proj in LORA_PROJECTIONS}
    return {proj: int(rank) for proj in LORA_PROJECTIONS}


def attach_lora_svd(weights: ModelWeights, source: ModelWeights, rank, seed: int = 0):
    """One delta per (repetition, shared block, projection), SVD-initialized.

    The residual for repetition i of block uid is taken against the source
    layer that occupies that unrolled position.  Untied first/last layers
    of middle strategies are exact copies and get no delta.
    """
    ranks = resolve_ranks(rank)
    g = np.random.default_rng(seed)
    groups = _tied_groups(weights.spec)
    for layer in unrolled_layers(weights.spec):
        if len(groups[layer.uid]) == 1:
            continue
        for proj in LORA_PROJECTIONS:
            src = source.params[f"blocks.{layer.ell}.{proj}"]
            tied = weights.params[f"blocks.{layer.uid}.{proj}"]
            weights.adapters[(layer.rep, layer.uid, proj)] = init_lora_svd(
                src, tied, ranks[proj], g)
    return weights


def attach_lora_zero(weights: ModelWeights, rank, seed: int = 0):
    """Fresh zero-start deltas for training a relaxed model from scratch."""
    ranks = resolve_ranks(rank)
    g = np.random.default_rng(seed)
    groups = _tied_groups(weights.spec)
    for layer in unrolled_layers(weights.spec):
        if len(groups[layer.uid]) == 1:
            continue
        for proj in LORA_PROJECTIONS:
            tied = weights.params[f"blocks.{layer.uid}.{proj}"]
            weights.adapters[(layer.rep, layer.uid, proj)] = init_lora_svd(
                tied, tied, ranks[proj], g)
    return weights


def relax_model(source: ModelWeights, spec: ModelSpec, rank,
                method: InitMethod = InitMethod.AVERAGE,
                norm_init: NormInit = NormInit.AVERAGE, seed: int = 0) -> ModelWeights:
    """Looped init plus SVD deltas in one step."""
    tied = init_looped(source, spec, method, norm_init, seed)
    return attach_lora_svd(tied, source, rank, seed)
