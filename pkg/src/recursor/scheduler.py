"""Discrete-event simulation of serving strategies.

Three schedulers over the same request model:

  vanilla   batch-at-a-time; the next batch waits until every sequence in
            the current one has generated all its tokens
  csb       slots refill with queued requests the moment a sequence
            completes, but all slots still march through stages in lockstep
  cdb       every occupied slot advances one (token, stage) unit per tick,
            so tokens at different depths share a batch; early-exited
            tokens vacate their remaining stages and slots refill FIFO

Time is a float accumulated from per-event costs; with the default unit
cost table each event is exactly one tick.  Vanilla and csb always run
every token through all stages; only cdb consumes per-token exit depths.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Request:
    id: int
    arrival: float
    n_tokens: int
    exit_depths: tuple = None     # per-token depths; None means full depth

    def __post_init__(self):
        if self.n_tokens < 1:
            raise ValueError("a request must generate at least one token")
        if self.arrival < 0:
            raise ValueError("arrival must be non-negative")
        if self.exit_depths is not None:
            object.__setattr__(self, "exit_depths", tuple(int(d) for d in self.exit_depths))
            if len(self.exit_depths) != self.n_tokens:
                raise ValueError("exit_depths length must equal n_tokens")
            if any(d < 1 for d in self.exit_depths):
                raise ValueError("exit depths must be >= 1")


class LinearCost:
    """Stage cost base + per_token * width; unit ticks by default."""

    def __init__(self, base: float = 1.0, per_token: float = 0.0,
                 head_base: float = 0.0):
        if base < 0 or per_token < 0 or head_base < 0:
            raise ValueError("costs must be non-negative")
        self.base = base
        self.per_token = per_token
        self.head_base = head_base

    def stage_cost(self, width: int) -> float:
        return self.base + self.per_token * width

    def head_cost(self, width: int) -> float:
        return self.head_base


class MeasuredCost:
    """Stage cost from a width -> cost table, nearest lower width wins."""

    def __init__(self, table: dict, head_base: float = 0.0):
        widths = sorted(table)
        if not widths or widths[0] < 1:
            raise ValueError("cost table needs entries for width >= 1")
        costs = [table[w] for w in widths]
        if any(b < a for a, b in zip(costs, costs[1:])):
            raise ValueError("stage cost must be non-decreasing in width")
        self.widths = widths
        self.costs = costs
        self.head_base = head_base

    def stage_cost(self, width: int) -> float:
        i = int(np.searchsorted(self.widths, width, side="right")) - 1
        return self.costs[max(i, 0)]

    def head_cost(self, width: int) -> float:
        return self.head_base


@dataclass
class Timeline:
    mode: str
    max_batch: int
    n_stages: int
    events: list = field(default_factory=list)
    completions: dict = field(default_factory=dict)
    arrivals: dict = field(default_factory=dict)
    finish: float = 0.0
    total_tokens: int = 0
    processed_tokens: int = 0
    slot_time: float = 0.0        # sum of width x event cost
    busy_time: float = 0.0        # sum of event costs


def _event(tl: Timeline, t0: float, cost: float, width: int, kind: str,
           stage=None, units=None):
    tl.events.append({"t0": t0, "t1": t0 + cost, "width": width, "kind": kind,
                      "stage": stage, **({"units": units} if units is not None else {})})
    tl.slot_time += width * cost
    tl.busy_time += cost
    return t0 + cost


def _queue(requests) -> deque:
    ids = [r.id for r in requests]
    if len(set(ids)) != len(ids):
        raise ValueError("request ids must be unique")
    return deque(sorted(requests, key=lambda r: (r.arrival, r.id)))


def schedule_vanilla(requests, max_batch: int, n_stages: int, cost=None,
                     record_units: bool = False) -> Timeline:
    cost = cost or LinearCost()
    tl = Timeline("vanilla", max_batch, n_stages)
    tl.total_tokens = sum(r.n_tokens for r in requests)
    tl.arrivals = {r.id: r.arrival for r in requests}
    q = _queue(requests)
    t = 0.0
    while q:
        if q[0].arrival > t:
            t = q[0].arrival
        batch = []
        while q and q[0].arrival <= t and len(batch) < max_batch:
            batch.append(q.popleft())
        for tok in range(1, max(r.n_tokens for r in batch) + 1):
            working = [r for r in batch if r.n_tokens >= tok]
            for stage in range(1, n_stages + 1):
                units = [(r.id, tok, stage) for r in working] if record_units else None
                t = _event(tl, t, cost.stage_cost(len(working)), len(working),
                           "stage", stage, units)
            for r in working:
                if tok == r.n_tokens:
                    tl.completions[r.id] = t
            tl.processed_tokens += len(working)
    tl.finish = t
    return tl


def schedule_csb(requests, max_batch: int, n_stages: int, cost=None,
                 record_units: bool = False) -> Timeline:
    cost = cost or LinearCost()
    tl = Timeline("csb", max_batch, n_stages)
    tl.total_tokens = sum(r.n_tokens for r in requests)
    tl.arrivals = {r.id: r.arrival for r in requests}
    q = _queue(requests)
    t = 0.0
    slots = []                    # [request, tokens_done]
    while q or slots:
        while q and q[0].arrival <= t and len(slots) < max_batch:
            slots.append([q.popleft(), 0])
        if not slots:
            t = q[0].arrival
            continue
        w = len(slots)
        for stage in range(1, n_stages + 1):
            units = [(s[0].id, s[1] + 1, stage) for s in slots] if record_units else None
            t = _event(tl, t, cost.stage_cost(w), w, "stage", stage, units)
        for s in slots:
            s[1] += 1
            if s[1] == s[0].n_tokens:
                tl.completions[s[0].id] = t
        tl.processed_tokens += w
        slots = [s for s in slots if s[1] < s[0].n_tokens]
    tl.finish = t
    return tl


def schedule_cdb(requests, max_batch: int, n_stages: int, cost=None,
                 record_units: bool = False) -> Timeline:
    cost = cost or LinearCost()
    for r in requests:
        if r.exit_depths is not None and any(d > n_stages for d in r.exit_depths):
            raise ValueError(f"request {r.id} has an exit depth beyond {n_stages} stages")
    tl = Timeline("cdb", max_batch, n_stages)
    tl.total_tokens = sum(r.n_tokens for r in requests)
    tl.arrivals = {r.id: r.arrival for r in requests}
    q = _queue(requests)
    t = 0.0
    slots = []                    # [request, token_index, stage]
    head_backlog = 0
    while q or slots:
        while q and q[0].arrival <= t and len(slots) < max_batch:
            slots.append([q.popleft(), 0, 1])
        if not slots:
            t = q[0].arrival
            continue
        w = len(slots)
        units = [(s[0].id, s[1] + 1, s[2]) for s in slots] if record_units else None
        t = _event(tl, t, cost.stage_cost(w), w, "mixed", None, units)
        kept = []
        for s in slots:
            r, tok, stage = s
            depth = r.exit_depths[tok] if r.exit_depths is not None else n_stages
            if stage >= depth:
                tl.processed_tokens += 1
                head_backlog += 1
                s[1] += 1
                s[2] = 1
                if s[1] == r.n_tokens:
                    tl.completions[r.id] = t
                    continue
            else:
                s[2] += 1
            kept.append(s)
        slots = kept
        while head_backlog >= max_batch and cost.head_cost(max_batch) > 0:
            t = _event(tl, t, cost.head_cost(max_batch), max_batch, "head")
            head_backlog -= max_batch
    if head_backlog and cost.head_cost(head_backlog) > 0:
        t = _event(tl, t, cost.head_cost(head_backlog), head_backlog, "head")
    tl.finish = t
    return tl


SCHEDULERS = {"vanilla": schedule_vanilla, "csb": schedule_csb, "cdb": schedule_cdb}


def throughput_report(tl: Timeline) -> dict:
    """Aggregate serving metrics for a completed timeline."""
    latencies = [tl.completions[i] - tl.arrivals[i] for i in tl.completions]
    return {
        "mode": tl.mode,
        "finish": tl.finish,
        "tokens_per_tick": tl.processed_tokens / tl.finish if tl.finish else 0.0,
        "mean_latency": float(np.mean(latencies)) if latencies else 0.0,
        "p95_latency": float(np.percentile(latencies, 95)) if latencies else 0.0,
        "slot_utilization": tl.slot_time / (tl.max_batch * tl.busy_time)
        if tl.busy_time else 0.0,
        "completed": len(tl.completions),
        "processed_tokens": tl.processed_tokens,
    }


def bundled_scenario() -> tuple:
    """Two waves of 16 single-token requests, one tick apart, 3 stages.

    Batch-at-a-time serving takes 6 ticks (two sequential 3-stage
    batches); depth-mixed batching overlaps the waves and takes 4.
    """
    requests = [Request(i, 0.0, 1) for i in range(16)]
    requests += [Request(16 + i, 1.0, 1) for i in range(16)]
    return requests, 32, 3


def random_scenario(seed: int, n_requests: int = 100, n_stages: int = 3,
                    max_batch: int = 32, mean_tokens: float = 8.0,
                    sd_tokens: float = 3.0, arrival_span: float = 10.0,
                    with_exits: bool = True) -> tuple:
    g = np.random.default_rng(seed)
    requests = []
    for i in range(n_requests):
        n_tok = max(1, int(round(g.normal(mean_tokens, sd_tokens))))
        depths = tuple(int(d) for d in g.integers(1, n_stages + 1, n_tok)) \
            if with_exits else None
        arrival = float(g.integers(0, max(1, int(arrival_span)) + 1))
        requests.append(Request(i, arrival, n_tok, depths))
    return requests, max_batch, n_stages


def requests_from_traces(per_sequence_traces, arrivals=None) -> list:
    """Turn decode exit traces into replayable requests.

    Each inner list covers one decoded sequence; the token count is the
    number of traced steps and the depths are the observed exit depths.
    """
    requests = []
    for i, traces in enumerate(per_sequence_traces):
        if not traces:
            raise ValueError(f"sequence {i} has no traced steps to replay")
        arrival = 0.0 if arrivals is None else float(arrivals[i])
        requests.append(Request(i, arrival, len(traces),
                                tuple(t.exit_depth for t in traces)))
    return requests


def save_scenario(path, requests, max_batch: int, n_stages: int):
    payload = {
        "max_batch": max_batch,
        "n_stages": n_stages,
        "requests": [
            {"id": r.id, "arrival": r.arrival, "n_tokens": r.n_tokens,
             "exit_depths": list(r.exit_depths) if r.exit_depths is not None else None}
            for r in requests
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def load_scenario(path) -> tuple:
    with open(path) as f:
        payload = json.load(f)
    requests = [
        Request(r["id"], float(r["arrival"]), int(r["n_tokens"]),
                tuple(r["exit_depths"]) if r.get("exit_depths") else None)
        for r in payload["requests"]
    ]
    return requests, int(payload["max_batch"]), int(payload["n_stages"])


def write_timeline(path, tl: Timeline):
    """One JSON record per event, then one summary record."""
    with open(path, "w") as f:
        for e in tl.events:
            f.write(json.dumps(e) + "\n")
        f.write(json.dumps({"kind": "summary", **throughput_report(tl)}) + "\n")
