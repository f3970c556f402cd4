"""Adaptive confidence thresholds for early exit.

Calibrates on a small slice of traffic decoded at full depth.  Each
observed confidence is labelled by whether exiting there would have
reproduced the full-depth token.  Both populations get a Beta fit by
method of moments, and the threshold is the smallest confidence whose
posterior probability of being safe reaches the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GRID_STEP = 1e-4
_EPS = 1e-6


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float


def log_beta_pdf(x: float, a: float, b: float) -> float:
    """Log density of Beta(a, b) with explicit edge conventions.

    Density 0 outside [0, 1].  At the endpoints the (a-1) and (b-1)
    powers decide between 0, a finite limit, and divergence.
    """
    if a <= 0 or b <= 0:
        raise ValueError("beta parameters must be positive")
    if x < 0 or x > 1:
        return -math.inf
    log_norm = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    if x == 0:
        if a < 1:
            return math.inf
        if a == 1:
            return log_norm
        return -math.inf
    if x == 1:
        if b < 1:
            return math.inf
        if b == 1:
            return log_norm
        return -math.inf
    return (a - 1) * math.log(x) + (b - 1) * math.log(1 - x) + log_norm


def fit_beta_moments(samples) -> BetaParams:
    """Method-of-moments Beta fit; None when under two samples.

    Uses the biased variance.  Degenerate samples (all equal) get a very
    concentrated fit; over-dispersed ones clamp to a near-flat fit rather
    than failing.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        return None
    if x.min() < 0 or x.max() > 1:
        raise ValueError("confidences must lie in [0, 1]")
    m = float(np.clip(x.mean(), _EPS, 1 - _EPS))
    v = float(x.var())
    if v < 1e-12:
        conc = 1e6
    else:
        conc = m * (1 - m) / v - 1
        if conc <= 0:
            conc = _EPS
    return BetaParams(m * conc, (1 - m) * conc)


def posterior_safe(lam: float, pos: BetaParams, neg: BetaParams,
                   prior: float = 0.5) -> float:
    """P(safe | confidence = lam) under the two-component mixture."""
    lp = math.log(prior) + log_beta_pdf(lam, pos.a, pos.b)
    ln = math.log(1 - prior) + log_beta_pdf(lam, neg.a, neg.b)
    if math.isinf(lp) and math.isinf(ln):
        if lp > 0 and ln > 0:
            return prior
        if lp > 0:
            return 1.0
        if ln > 0:
            return 0.0
        return prior                       # both densities vanish
    if math.isinf(lp):
        return 1.0 if lp > 0 else 0.0
    if math.isinf(ln):
        return 0.0 if ln > 0 else 1.0
    return 1.0 / (1.0 + math.exp(ln - lp))


@dataclass(frozen=True)
class ThresholdFit:
    threshold: float
    reached: bool          # False when no grid point meets the target
    deferred: bool         # True when a population was too small to fit
    pos: BetaParams = None
    neg: BetaParams = None
    n_pos: int = 0
    n_neg: int = 0


def estimate_threshold(pos: BetaParams, neg: BetaParams, target: float,
                       prior: float = 0.5) -> tuple:
    """Smallest grid confidence whose safe-posterior reaches the target.

    Scans [0, 1] at GRID_STEP resolution, skipping points where both
    densities vanish (the posterior is 0/0 there; only the endpoints can
    do this).  Returns (threshold, reached); an unreachable target
    degrades to threshold 1.0, which disables exit.
    """
    n = int(round(1.0 / GRID_STEP)) + 1
    for i in range(n):
        lam = i * GRID_STEP
        lp = log_beta_pdf(lam, pos.a, pos.b)
        ln = log_beta_pdf(lam, neg.a, neg.b)
        if lp == -math.inf and ln == -math.inf:
            continue
        if posterior_safe(lam, pos, neg, prior) >= target:
            return lam, True
    return 1.0, False


class AdaptiveThreshold:
    """Accumulates calibration observations and produces a threshold."""

    def __init__(self, target: float = 0.4, default_threshold: float = 0.9,
                 budget: float = 0.03):
        if not 0 < target < 1:
            raise ValueError("target must lie in (0, 1)")
        self.target = target
        self.default_threshold = default_threshold
        self.budget = budget
        self._pos = []
        self._neg = []
        self.fit_result = None

    def calibration_size(self, n_requests: int) -> int:
        return max(1, int(math.ceil(self.budget * n_requests)))

    def observe(self, confidence: float, exit_matches: bool):
        (self._pos if exit_matches else self._neg).append(float(confidence))

    @property
    def n_observations(self) -> int:
        return len(self._pos) + len(self._neg)

    def fit(self) -> ThresholdFit:
        pos = fit_beta_moments(self._pos)
        neg = fit_beta_moments(self._neg)
        if pos is None or neg is None:
            self.fit_result = ThresholdFit(self.default_threshold, False, True,
                                           pos, neg, len(self._pos), len(self._neg))
            return self.fit_result
        thr, reached = estimate_threshold(pos, neg, self.target)
        self.fit_result = ThresholdFit(thr, reached, False, pos, neg,
                                       len(self._pos), len(self._neg))
        return self.fit_result

    @property
    def threshold(self) -> float:
        if self.fit_result is None:
            return self.default_threshold
        return self.fit_result.threshold
