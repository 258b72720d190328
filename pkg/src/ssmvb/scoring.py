"""Proper scoring rules, positively oriented (larger is better)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .predictive import PredictiveDensity

TWCRPS_GRID = 2001
CS_LEVELS = (0.10, 0.20, 0.80, 0.90)
SCORE_COLUMNS = ("ls", "cs10", "cs20", "cs80", "cs90", "crps", "twcrps", "is")


@dataclass(frozen=True)
class Region:
    """Tail region A: ``lower`` is {y < threshold}, ``upper`` is {y > threshold}."""
    kind: str
    threshold: float

    def __post_init__(self) -> None:
        if self.kind not in ("lower", "upper"):
            raise ValueError("region kind must be 'lower' or 'upper'")
        if not np.isfinite(self.threshold):
            raise ValueError("region threshold must be finite")

    def contains(self, y: float) -> bool:
        return y < self.threshold if self.kind == "lower" else y > self.threshold

    def mass(self, pd: PredictiveDensity) -> float:
        if self.kind == "lower":
            return float(pd.cdf(self.threshold)[0])
        return float(pd.sf(self.threshold)[0])


def tail_regions(y_window: np.ndarray, levels=CS_LEVELS) -> list[Region]:
    """Regions bounded by empirical quantiles; levels below one half give lower tails."""
    q = np.quantile(np.asarray(y_window, dtype=float), levels)
    return [Region("lower" if a < 0.5 else "upper", float(t)) for a, t in zip(levels, q)]


@dataclass(frozen=True)
class ScoreRecord:
    ls: float
    cs10: float
    cs20: float
    cs80: float
    cs90: float
    crps: float
    twcrps: float
    interval: float

    def as_tuple(self) -> tuple[float, ...]:
        return (self.ls, self.cs10, self.cs20, self.cs80, self.cs90, self.crps, self.twcrps, self.interval)


def _check(y: float) -> float:
    y = float(y)
    if not np.isfinite(y):
        raise ValueError("observation must be finite")
    return y


def log_score(pd: PredictiveDensity, y: float) -> float:
    return float(pd.logpdf(_check(y))[0])


def censored_score(pd: PredictiveDensity, y: float, region: Region) -> float:
    y = _check(y)
    if region.contains(y):
        return log_score(pd, y)
    return float(np.log(max(1.0 - region.mass(pd), np.finfo(float).tiny)))


def crps(pd: PredictiveDensity, y: float) -> float:
    """-int (F(z) - 1{z >= y})^2 dz by adaptive quadrature on the mixture cdf."""
    y = _check(y)
    lo, hi = pd.support(12.0)
    lo, hi = min(lo, y - 1.0), max(hi, y + 1.0)
    f = lambda z: float(pd.cdf(z)[0]) ** 2
    g = lambda z: float(pd.sf(z)[0]) ** 2
    left, _ = integrate.quad(f, lo, y, limit=200, epsabs=1e-11, epsrel=1e-10)
    right, _ = integrate.quad(g, y, hi, limit=200, epsabs=1e-11, epsrel=1e-10)
    return -(left + right)


def crps_sample(draws: np.ndarray, y: float) -> float:
    """-(E|X - y| - 0.5 E|X - X'|) from draws."""
    x = np.sort(np.asarray(draws, dtype=float))
    n = x.size
    e1 = np.mean(np.abs(x - _check(y)))
    # E|X - X'| via the sorted-sample identity
    e2 = 2.0 * np.sum((2.0 * np.arange(1, n + 1) - n - 1) * x) / (n * n)
    return float(-(e1 - 0.5 * e2))


def _alpha_grid(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def twcrps(pd: PredictiveDensity, y: float, grid: int = TWCRPS_GRID) -> float:
    """Quantile-weighted CRPS with weight (1 - alpha)^2, emphasising the lower tail.

    Trapezoid rule on nodes offset half a step from 0 and 1; the integrand
    vanishes at both ends, which closes the rule.
    """
    y = _check(y)
    alpha = _alpha_grid(grid)
    q = pd.quantile(alpha)
    vals = 2.0 * ((y <= q).astype(float) - alpha) * (q - y) * (1.0 - alpha) ** 2
    a = np.concatenate([[0.0], alpha, [1.0]])
    v = np.concatenate([[0.0], vals, [0.0]])
    return -float(np.trapezoid(v, a) if hasattr(np, "trapezoid") else np.trapz(v, a))


def interval_score(pd: PredictiveDensity, y: float, alpha: float = 0.05) -> float:
    y = _check(y)
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    l, u = pd.quantile([alpha / 2.0, 1.0 - alpha / 2.0])
    return float(-((u - l) + (2.0 / alpha) * max(l - y, 0.0) + (2.0 / alpha) * max(y - u, 0.0)))


def score_all(pd: PredictiveDensity, y: float, regions: list[Region]) -> ScoreRecord:
    if len(regions) != 4:
        raise ValueError("expected four censoring regions")
    cs = [censored_score(pd, y, r) for r in regions]
    return ScoreRecord(log_score(pd, y), *cs, crps(pd, y), twcrps(pd, y), interval_score(pd, y))
