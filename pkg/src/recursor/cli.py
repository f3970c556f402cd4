"""Command-line entry points: train, decode, simulate, flops.

Exit codes: 0 success, 2 configuration problem, 3 numeric failure.  The
environment variable RECURSOR_SEED overrides any configured seed.  Every
output file starts with a header carrying the config hash and seed.
"""

from __future__ import annotations

import functools
import hashlib
import json
import os
import sys

import click
import numpy as np

from . import data as datalib
from . import report
from .checkpoint import (load_checkpoint, router_config_from_dict, save_checkpoint,
                         spec_from_dict, spec_to_dict)
from .costs import count_params, forward_flops, kv_bytes, preset_spec
from .decoding import (ConfidencePolicy, FillMode, FixedDepthPolicy,
                       GreedySampler, NucleusSampler, TopKSampler,
                       decode as run_decode, oracle_decode)
from .errors import ConfigError, NumericError
from .kvcache import CacheMode
from .model import ShareStrategy, init_model
from .routing import Router, RouterKind, capacity_schedule, evaluate_router
from .scheduler import SCHEDULERS, load_scenario, throughput_report, write_timeline
from .threshold import AdaptiveThreshold
from .training import (AdamW, CosineLR, ExitMode, KdMode, LossSchedule,
                       TrapezoidLR, train_loop, trainable_parameters)


def config_hash(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def resolve_seed(configured) -> int:
    env = os.environ.get("RECURSOR_SEED")
    return int(env) if env else int(configured)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, FileNotFoundError, json.JSONDecodeError, KeyError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)
        except NumericError as e:
            click.echo(f"numeric failure: {e}", err=True)
            sys.exit(3)
    return wrapper


@click.group()
def main():
    """Recursive-transformer engine with per-token depth routing."""


# ---- train ----


def _build_schedule(cfg: dict) -> LossSchedule:
    return LossSchedule(
        mode=ExitMode(cfg.get("mode", "single")),
        aggressive_coeff=cfg.get("aggressive_coeff", 0.1),
        kd=KdMode(cfg.get("kd", "none")),
        kd_coeff=cfg.get("kd_coeff", 1.0),
    )


def _build_lr(cfg, base_lr: float, steps: int):
    if not cfg:
        return None
    kind = cfg.get("kind")
    if kind == "cosine":
        return CosineLR(base_lr, steps, cfg.get("warmup", 0))
    if kind == "trapezoid":
        return TrapezoidLR(base_lr, cfg.get("warmup", 0), cfg.get("plateau", steps),
                           cfg.get("cooldown", 0))
    raise ConfigError(f"unknown lr schedule {kind!r}")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default=None, help="Output directory override.")
@guarded
def train(config_path, out_dir):
    """Train from a JSON config; writes metrics, figures, and a checkpoint."""
    with open(config_path) as f:
        cfg = json.load(f)
    spec = spec_from_dict(cfg["model"])
    seed = resolve_seed(cfg.get("seed", 0))
    chash = config_hash(cfg)
    out_dir = out_dir or cfg.get("out_dir", "run")
    os.makedirs(out_dir, exist_ok=True)

    router = None
    if cfg.get("router"):
        rcfg = router_config_from_dict(cfg["router"])
        router = Router(rcfg, spec.d_model, spec.n_recursions, seed + 1)
    kv_mode = cfg.get("kv_mode", "recursion_wise")
    if kv_mode not in ("recursion_wise", "recursive_share", "hybrid"):
        raise ConfigError(f"unknown kv_mode {kv_mode!r}")
    schedule = _build_schedule(cfg.get("schedule", {}))

    weights = init_model(spec, seed)
    dcfg = dict(cfg.get("data", {"task": "copy", "n_samples": 256}))
    task = dcfg.pop("task")
    n_samples = dcfg.pop("n_samples", 256)
    corpus = datalib.make_corpus(task, seed + 2, n_samples, **dcfg)

    steps = int(cfg.get("steps", 100))
    batch_size = int(cfg.get("batch_size", 8))
    lr = float(cfg.get("lr", 1e-3))
    optim = AdamW(trainable_parameters(weights, router), lr=lr,
                  schedule=_build_lr(cfg.get("lr_schedule"), lr, steps))

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    with open(metrics_path, "w") as mf:
        mf.write(json.dumps({"kind": "header", "config_hash": chash, "seed": seed}) + "\n")
        history = train_loop(
            weights, datalib.batches(corpus, batch_size, steps, seed + 3), optim,
            schedule, router, kv_mode,
            on_step=lambda m: mf.write(json.dumps(m) + "\n"))

    save_checkpoint(os.path.join(out_dir, "checkpoint"), weights, router,
                    step=steps, meta={"config_hash": chash, "seed": seed})
    report.save_loss_curves(history, os.path.join(out_dir, "loss.png"))
    if router is not None:
        eval_corpus = datalib.make_corpus(task, seed + 4, min(16, n_samples), **dcfg)
        stats = evaluate_router(weights, router, [row[:-1] for row in eval_corpus],
                                kv_mode)
        if router.config.kind is RouterKind.EXPERT_CHOICE and "overlap" in stats:
            report.save_router_histogram(stats["selected_scores"],
                                         stats["unselected_scores"],
                                         os.path.join(out_dir, "router_scores.png"))
        with open(os.path.join(out_dir, "router_metrics.json"), "w") as f:
            json.dump({"config_hash": chash, "seed": seed,
                       **{k: v for k, v in stats.items()
                          if not isinstance(v, np.ndarray)}}, f, indent=2)
            f.write("\n")
    click.echo(f"trained {steps} steps; final loss {history[-1]['loss']:.4f}; "
               f"artifacts in {out_dir}")


# ---- decode ----


def _parse_exit(flag: str, n_recursions: int):
    if flag == "none":
        return "policy", FixedDepthPolicy(n_recursions)
    if flag == "oracle":
        return "oracle", None
    kind, _, arg = flag.partition(":")
    if kind == "static":
        depth = int(arg)
        if not 1 <= depth <= n_recursions:
            raise ConfigError(f"static exit depth must lie in 1..{n_recursions}")
        return "policy", FixedDepthPolicy(depth)
    if kind == "confidence":
        lam = float(arg)
        if not 0 <= lam <= 1:
            raise ConfigError("confidence threshold must lie in [0, 1]")
        return "policy", ConfidencePolicy(lam)
    raise ConfigError(f"unknown exit policy {flag!r}")


def _parse_sampler(flag: str, seed: int):
    if flag == "greedy":
        return GreedySampler()
    kind, _, arg = flag.partition(":")
    if kind == "topk":
        return TopKSampler(int(arg), seed=seed)
    if kind == "nucleus":
        return NucleusSampler(float(arg), seed=seed)
    raise ConfigError(f"unknown sampler {flag!r}")


@main.command(name="decode")
@click.option("--checkpoint", "ckpt_dir", required=True, type=click.Path())
@click.option("--prompt-file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n-new", default=32, show_default=True)
@click.option("--exit", "exit_flag", default="none", show_default=True,
              help="none | oracle | confidence:<lambda> | static:<depth>")
@click.option("--sampler", "sampler_flag", default="greedy", show_default=True,
              help="greedy | topk:<k> | nucleus:<p>")
@click.option("--adaptive-threshold", is_flag=True,
              help="Calibrate a confidence threshold on a slice of the prompts.")
@click.option("--cache-mode", default="recursion_wise", show_default=True,
              type=click.Choice([m.value for m in CacheMode]))
@click.option("--fill-mode", default="parallel", show_default=True,
              type=click.Choice([m.value for m in FillMode]))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", default="decode_out", show_default=True)
@guarded
def decode_cmd(ckpt_dir, prompt_file, n_new, exit_flag, sampler_flag,
               adaptive_threshold, cache_mode, fill_mode, seed, out_dir):
    """Generate from a checkpoint, writing tokens and exit traces."""
    weights, _, manifest = load_checkpoint(ckpt_dir)
    nr = weights.spec.n_recursions
    seed = resolve_seed(seed)
    chash = config_hash({"spec": manifest["spec"], "router": manifest.get("router"),
                         "step": manifest.get("step")})
    cache = CacheMode(cache_mode)
    fill = FillMode(fill_mode)
    sampler = _parse_sampler(sampler_flag, seed)

    with open(prompt_file) as f:
        prompts = [datalib.encode(line.rstrip("\n"), add_eos=False)
                   for line in f if line.strip()]
    if not prompts:
        raise ConfigError("prompt file contains no prompts")

    os.makedirs(out_dir, exist_ok=True)
    mode, policy = _parse_exit(exit_flag, nr)

    adaptive = None
    lambda_history = []
    if adaptive_threshold:
        adaptive = AdaptiveThreshold()
        n_cal = adaptive.calibration_size(len(prompts))
        mode, policy = "policy", ConfidencePolicy(adaptive)

    results = []
    for i, prompt in enumerate(prompts):
        if adaptive is not None and i < n_cal:
            res = run_decode(weights, prompt, n_new, FixedDepthPolicy(nr),
                             GreedySampler(), cache, fill)
            for t in res.traces:
                final = t.depth_argmax[-1]
                for d in range(len(t.depth_argmax) - 1):
                    adaptive.observe(t.confidences[d], t.depth_argmax[d] == final)
            adaptive.fit()
        elif mode == "oracle":
            res = oracle_decode(weights, prompt, n_new, cache, fill).replay
        else:
            res = run_decode(weights, prompt, n_new, policy, sampler, cache, fill)
        results.append(res)
        if adaptive is not None:
            lambda_history.append({"sequence": i, "threshold": adaptive.threshold,
                                   "calibrating": i < n_cal,
                                   "observations": adaptive.n_observations})

    header = {"kind": "header", "config_hash": chash, "seed": seed,
              "n_recursions": nr}
    with open(os.path.join(out_dir, "tokens.txt"), "w") as f:
        f.write(f"# config_hash={chash} seed={seed}\n")
        for res in results:
            f.write(" ".join(str(t) for t in res.tokens) + "\n")
    with open(os.path.join(out_dir, "trace.jsonl"), "w") as f:
        f.write(json.dumps(header) + "\n")
        for i, res in enumerate(results):
            for t in res.traces:
                f.write(json.dumps({
                    "sequence": i, "position": t.position, "token": t.token_id,
                    "exit_depth": t.exit_depth, "confidences": t.confidences,
                    "pending_after": t.pending_after}) + "\n")
    if lambda_history:
        with open(os.path.join(out_dir, "lambda_history.jsonl"), "w") as f:
            f.write(json.dumps(header) + "\n")
            for rec in lambda_history:
                f.write(json.dumps(rec) + "\n")
    all_traces = [t for res in results for t in res.traces]
    if all_traces:
        report.save_exit_confidence_figure(
            all_traces, os.path.join(out_dir, "confidences.png"))
        report.save_depth_histogram([t.exit_depth for t in all_traces], nr,
                                    os.path.join(out_dir, "exit_depths.png"))
    mean_depth = float(np.mean([t.exit_depth for t in all_traces])) if all_traces else nr
    click.echo(f"decoded {len(results)} sequences; mean exit depth {mean_depth:.2f}; "
               f"artifacts in {out_dir}")


# ---- simulate ----


def _requests_from_trace_file(path):
    sequences = {}
    n_stages = None
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            if rec.get("kind") == "header":
                n_stages = rec.get("n_recursions")
                continue
            sequences.setdefault(rec["sequence"], []).append(rec["exit_depth"])
    if not sequences:
        return [], n_stages
    from .scheduler import Request
    requests = [Request(i, 0.0, len(d), tuple(d))
                for i, d in sorted(sequences.items())]
    if n_stages is None:
        n_stages = max(max(r.exit_depths) for r in requests)
    return requests, n_stages


@main.command()
@click.option("--scenario", "scenario_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--trace", "trace_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", default="all", show_default=True,
              type=click.Choice(["all", "vanilla", "csb", "cdb"]))
@click.option("--max-batch", default=None, type=int,
              help="Override the scenario's batch size.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", default="simulate_out", show_default=True)
@guarded
def simulate(scenario_path, trace_path, mode, max_batch, seed, out_dir):
    """Run the serving simulators over a scenario or a replayed decode trace."""
    if (scenario_path is None) == (trace_path is None):
        raise ConfigError("give exactly one of --scenario or --trace")
    if scenario_path:
        requests, batch, stages = load_scenario(scenario_path)
        with open(scenario_path) as f:
            chash = config_hash(json.load(f))
    else:
        requests, stages = _requests_from_trace_file(trace_path)
        batch = 32
        chash = config_hash({"trace": trace_path, "n_stages": stages})
    if max_batch is not None:
        batch = max_batch
    seed = resolve_seed(seed)

    os.makedirs(out_dir, exist_ok=True)
    modes = ["vanilla", "csb", "cdb"] if mode == "all" else [mode]
    report_path = os.path.join(out_dir, "report.jsonl")
    with open(report_path, "w") as f:
        f.write(json.dumps({"kind": "header", "config_hash": chash, "seed": seed,
                            "max_batch": batch, "n_stages": stages}) + "\n")
        for m in modes:
            tl = SCHEDULERS[m](requests, batch, stages or 1)
            write_timeline(os.path.join(out_dir, f"timeline_{m}.jsonl"), tl)
            if tl.events:
                report.save_timeline_figure(
                    tl, os.path.join(out_dir, f"timeline_{m}.png"))
            rep = throughput_report(tl)
            f.write(json.dumps(rep) + "\n")
            click.echo(f"{m}: finish={rep['finish']:g} "
                       f"tokens/tick={rep['tokens_per_tick']:.3f} "
                       f"utilization={rep['slot_utilization']:.3f}")


# ---- flops ----


@main.command()
@click.option("--preset", default="360m", show_default=True,
              type=click.Choice(["360m", "tiny"]))
@click.option("--recursions", default=1, show_default=True)
@click.option("--share", default=None,
              type=click.Choice([s.value for s in ShareStrategy]))
@click.option("--seq-len", default=2048, show_default=True)
@click.option("--kv-mode", default="recursion_wise", show_default=True,
              type=click.Choice([m.value for m in CacheMode]))
@click.option("--capacity", default="linear", show_default=True,
              type=click.Choice(["linear", "full"]))
@click.option("--no-head", is_flag=True, help="Exclude the output head.")
@click.option("--seed", default=0, show_default=True)
@guarded
def flops(preset, recursions, share, seq_len, kv_mode, capacity, no_head, seed):
    """Print the parameter, FLOPs, and KV-byte breakdown for a configuration."""
    share_enum = ShareStrategy(share) if share else None
    spec = preset_spec(preset, recursions, share_enum)
    seed = resolve_seed(seed)
    chash = config_hash({"preset": preset, "spec": spec_to_dict(spec),
                         "seq_len": seq_len, "kv_mode": kv_mode,
                         "capacity": capacity, "head": not no_head})
    mode = CacheMode(kv_mode)
    caps = capacity_schedule(spec.n_recursions, seq_len) if capacity == "linear" \
        else [seq_len] * spec.n_recursions
    fb = forward_flops(spec, seq_len, caps, mode, include_head=not no_head)
    pc = count_params(spec)

    click.echo(f"# config_hash={chash} seed={seed}")
    click.echo(f"params.embedding={pc.embedding}")
    click.echo(f"params.non_embedding={pc.non_embedding}")
    click.echo(f"params.unique_non_embedding={pc.unique_non_embedding}")
    click.echo(f"flops.linear={fb.linear:.6e}")
    click.echo(f"flops.attention={fb.attention:.6e}")
    click.echo(f"flops.head={fb.head:.6e}")
    click.echo(f"flops.total={fb.total:.6e}")
    click.echo(f"flops.per_token={fb.per_token:.6e}")
    click.echo(f"kv.bytes={kv_bytes(spec, seq_len, mode)}")
    click.echo(f"capacities={list(fb.effective_lengths)}")


if __name__ == "__main__":
    main()
