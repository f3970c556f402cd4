"""Key/value storage for decode, organized by recursion depth.

One bank serves one attention layer position across all recursion depths.
Depth here is the 1-based recursion group; slot distinguishes concurrent
sequences.  Keys are stored before rotary rotation together with their
absolute positions, so gathers can re-rotate exactly.

Modes:
  PER_DEPTH        every depth stores every token (the untied baseline)
  RECURSION_WISE   a depth stores only tokens that actually ran it
  RECURSIVE_SHARE  only depth 1 stores; deeper reads are redirected to it

RECURSION_WISE can additionally backfill unselected positions from depth 1
(`share_inactive`), which mirrors training-time hybrid sharing.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import CacheModeError


class CacheMode(Enum):
    PER_DEPTH = "per_depth"
    RECURSION_WISE = "recursion_wise"
    RECURSIVE_SHARE = "recursive_share"


class KVCacheBank:
    def __init__(self, mode: CacheMode, n_depths: int, share_inactive: bool = False):
        if share_inactive and mode is not CacheMode.RECURSION_WISE:
            raise CacheModeError("share_inactive only applies to recursion-wise banks")
        self.mode = mode
        self.n_depths = n_depths
        self.share_inactive = share_inactive
        self._store = {}          # (depth, slot) -> {"pos": [int], "k": [arr], "v": [arr]}
        self.reads = 0            # gathered entries, an empirical IO counter
        self.writes = 0

    def _check_depth(self, depth: int):
        if not 1 <= depth <= self.n_depths:
            raise CacheModeError(f"depth {depth} outside 1..{self.n_depths}")

    def writes_at(self, depth: int) -> bool:
        """Whether this bank accepts appends at the given depth."""
        self._check_depth(depth)
        return self.mode is not CacheMode.RECURSIVE_SHARE or depth == 1

    def append(self, depth: int, slot: int, position: int, k: np.ndarray, v: np.ndarray):
        """Store one token's key/value at a depth.  Positions must strictly increase."""
        if not self.writes_at(depth):
            raise CacheModeError(
                f"recursive-share bank stores depth 1 only, got write at depth {depth}")
        cell = self._store.setdefault((depth, slot), {"pos": [], "k": [], "v": []})
        if cell["pos"] and position <= cell["pos"][-1]:
            raise ValueError(
                f"append position {position} not after {cell['pos'][-1]} at depth {depth}")
        cell["pos"].append(int(position))
        cell["k"].append(np.asarray(k, dtype=np.float64))
        cell["v"].append(np.asarray(v, dtype=np.float64))
        self.writes += 1

    def _cell(self, depth: int, slot: int) -> dict:
        return self._store.get((depth, slot), {"pos": [], "k": [], "v": []})

    def gather(self, depth: int, slot: int, query_position: int):
        """All stored entries with position <= query_position, in position order.

        Returns (keys [n, ...], values [n, ...], positions [n]).  Deeper
        reads on a recursive-share bank come from depth 1; a recursion-wise
        bank with share_inactive fills positions missing at this depth from
        depth 1.
        """
        self._check_depth(depth)
        read_depth = 1 if self.mode is CacheMode.RECURSIVE_SHARE else depth
        cell = self._cell(read_depth, slot)
        pos = cell["pos"]
        ks = cell["k"]
        vs = cell["v"]

        if self.share_inactive and depth > 1:
            base = self._cell(1, slot)
            own = set(pos)
            merged = [(p, k, v) for p, k, v in zip(pos, ks, vs)]
            merged += [(p, k, v) for p, k, v in zip(base["pos"], base["k"], base["v"])
                       if p not in own]
            merged.sort(key=lambda e: e[0])
            pos = [e[0] for e in merged]
            ks = [e[1] for e in merged]
            vs = [e[2] for e in merged]

        n = 0
        while n < len(pos) and pos[n] <= query_position:
            n += 1
        self.reads += n
        if n == 0:
            return (np.zeros((0,)), np.zeros((0,)), np.zeros(0, dtype=np.int64))
        return (np.stack(ks[:n]), np.stack(vs[:n]), np.asarray(pos[:n], dtype=np.int64))

    def entry_count(self, depth: int = None, slot: int = None) -> int:
        total = 0
        for (d, s), cell in self._store.items():
            if depth is not None and d != depth:
                continue
            if slot is not None and s != slot:
                continue
            total += len(cell["pos"])
        return total

    def total_bytes(self) -> int:
        """Bytes held by stored keys and values."""
        total = 0
        for cell in self._store.values():
            total += sum(k.nbytes for k in cell["k"])
            total += sum(v.nbytes for v in cell["v"])
        return total

    def positions(self, depth: int, slot: int) -> list:
        return list(self._cell(depth, slot)["pos"])

    def entries(self, depth: int, slot: int):
        """Raw (positions, keys, values) without the read counter side effect."""
        cell = self._cell(depth, slot)
        if not cell["pos"]:
            return (np.zeros(0, dtype=np.int64), np.zeros((0,)), np.zeros((0,)))
        return (np.asarray(cell["pos"], dtype=np.int64),
                np.stack(cell["k"]), np.stack(cell["v"]))


def relative_costs(mode: CacheMode, n_recursions: int, k: int, n_ctx: int) -> dict:
    """Memory, IO, and attention-FLOPs ratios against the per-depth baseline.

    `k` is the per-depth selected-token count under routing; the per-depth
    baseline stores and reads every token at every depth.
    """
    if n_ctx < 1 or n_recursions < 1:
        raise ValueError("n_ctx and n_recursions must be positive")
    if mode is CacheMode.PER_DEPTH:
        return {"memory": 1.0, "io": 1.0, "attention": 1.0}
    if mode is CacheMode.RECURSION_WISE:
        frac = (n_recursions + 1) / (2 * n_recursions)
        return {"memory": frac, "io": frac, "attention": (k / n_ctx) ** 2}
    return {"memory": 1.0 / n_recursions, "io": 1.0, "attention": k / n_ctx}
