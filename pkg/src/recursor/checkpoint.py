"""Checkpoint format: a manifest plus one flat float64 payload.

`manifest.json` records the model shape, router configuration, and the
name/shape/offset of every tensor; `weights.bin` holds their values
little-endian in manifest order.  Adapter tensors are named
lora.<rep>.<uid>.<proj>.<A|B>.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import tensor as tt
from .errors import ConfigError
from .model import ModelSpec, ModelWeights, ShareStrategy
from .relax import LoraDelta
from .routing import (Activation, AuxMode, BalanceMode, Router, RouterArch,
                      RouterConfig, RouterKind)

FORMAT = "recursor-checkpoint"
VERSION = 1
DTYPE = "<f8"

_SPEC_FIELDS = ("n_layers", "n_recursions", "d_model", "n_heads", "n_kv_heads",
                "d_head", "d_inter", "vocab_size", "context_len", "tie_embeddings")


def spec_to_dict(spec: ModelSpec) -> dict:
    d = {name: getattr(spec, name) for name in _SPEC_FIELDS}
    d["share"] = spec.share.value
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    share = ShareStrategy(d.pop("share", "none"))
    unknown = set(d) - set(_SPEC_FIELDS)
    if unknown:
        raise ConfigError(f"unknown model fields: {sorted(unknown)}")
    return ModelSpec(share=share, **d)


def router_config_to_dict(config: RouterConfig) -> dict:
    return {
        "kind": config.kind.value, "activation": config.activation.value,
        "arch": config.arch.value, "alpha": config.alpha,
        "aux_mode": config.aux_mode.value, "balance_mode": config.balance_mode.value,
        "aux_coeff": config.aux_coeff, "balance_coeff": config.balance_coeff,
        "z_coeff": config.z_coeff, "bias_update_rate": config.bias_update_rate,
        "capacities": list(config.capacities) if config.capacities else None,
    }


def router_config_from_dict(d: dict) -> RouterConfig:
    d = dict(d)
    caps = d.pop("capacities", None)
    return RouterConfig(
        kind=RouterKind(d.pop("kind")),
        activation=Activation(d.pop("activation")),
        arch=RouterArch(d.pop("arch", "linear")),
        aux_mode=AuxMode(d.pop("aux_mode", "none")),
        balance_mode=BalanceMode(d.pop("balance_mode", "none")),
        capacities=tuple(caps) if caps else None,
        **d,
    )


def _all_tensors(weights: ModelWeights, router: Router = None) -> dict:
    out = dict(weights.params)
    for (rep, uid, proj) in sorted(weights.adapters):
        delta = weights.adapters[(rep, uid, proj)]
        out[f"lora.{rep}.{uid}.{proj}.A"] = delta.A
        out[f"lora.{rep}.{uid}.{proj}.B"] = delta.B
    if router is not None:
        out.update(router.params)
        out["router.biases"] = tt.Tensor(router.biases)
    return out


def save_checkpoint(directory, weights: ModelWeights, router: Router = None,
                    step: int = 0, meta: dict = None):
    os.makedirs(directory, exist_ok=True)
    tensors = _all_tensors(weights, router)
    entries = []
    offset = 0
    with open(os.path.join(directory, "weights.bin"), "wb") as f:
        for name, t in tensors.items():
            data = np.ascontiguousarray(t.data, dtype=DTYPE)
            f.write(data.tobytes())
            entries.append({"name": name, "shape": list(t.data.shape),
                            "offset": offset, "size": int(data.size)})
            offset += data.size
    manifest = {
        "format": FORMAT, "version": VERSION, "dtype": DTYPE, "step": step,
        "spec": spec_to_dict(weights.spec),
        "router": router_config_to_dict(router.config) if router else None,
        "router_recursions": router.n_recursions if router else None,
        "tensors": entries,
        "meta": meta or {},
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_checkpoint(directory) -> tuple:
    """Returns (weights, router_or_None, manifest)."""
    mpath = os.path.join(directory, "manifest.json")
    if not os.path.exists(mpath):
        raise ConfigError(f"no manifest at {mpath}")
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT:
        raise ConfigError(f"not a {FORMAT} directory: {directory}")
    flat = np.fromfile(os.path.join(directory, "weights.bin"), dtype=DTYPE)

    values = {}
    for e in manifest["tensors"]:
        chunk = flat[e["offset"]: e["offset"] + e["size"]]
        if chunk.size != e["size"]:
            raise ConfigError(f"weights.bin truncated at tensor {e['name']}")
        values[e["name"]] = chunk.reshape(e["shape"]).astype(np.float64)

    spec = spec_from_dict(manifest["spec"])
    params = {}
    adapters = {}
    router_values = {}
    for name, arr in values.items():
        if name.startswith("lora."):
            _, rep, uid, proj, part = name.split(".")
            key = (int(rep), int(uid), proj)
            adapters.setdefault(key, {})[part] = arr
        elif name.startswith("router") or name.startswith("aux_router"):
            router_values[name] = arr
        else:
            params[name] = tt.Tensor(arr, requires_grad=True)
    weights = ModelWeights(spec, params)
    for key, parts in adapters.items():
        a, b = parts["A"], parts["B"]
        weights.adapters[key] = LoraDelta(
            tt.Tensor(a, requires_grad=True), tt.Tensor(b, requires_grad=True),
            rank=a.shape[0])

    router = None
    if manifest.get("router"):
        config = router_config_from_dict(manifest["router"])
        router = Router(config, spec.d_model, manifest["router_recursions"])
        for name, arr in router_values.items():
            if name == "router.biases":
                router.biases = arr.copy()
            else:
                router.params[name] = tt.Tensor(arr, requires_grad=True)
    return weights, router, manifest
