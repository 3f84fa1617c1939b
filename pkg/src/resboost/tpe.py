"""Tree-structured Parzen Estimator over a box of named continuous parameters.

Each free dimension gets independent 1-D Parzen estimators: ``l`` over the
best ``gamma`` fraction of completed trials, ``g`` over the rest. Candidate
vectors are drawn from ``l`` and ranked by the product of per-dimension
density ratios. Log-scale
dimensions are modelled in natural-log space. Frozen assignments are merged
verbatim into every proposed theta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import logsumexp, ndtr, ndtri

_MIN_BANDWIDTH = 1e-6


class TpeError(ValueError):
    pass


@dataclass(frozen=True)
class Dim:
    name: str
    lower: float
    upper: float
    scale: str = "linear"

    def __post_init__(self):
        if not self.lower < self.upper:
            raise TpeError(f"{self.name}: lower must be < upper ({self.lower}, {self.upper})")
        if self.scale not in ("linear", "log"):
            raise TpeError(f"{self.name}: unknown scale {self.scale!r}")
        if self.scale == "log" and self.lower <= 0:
            raise TpeError(f"{self.name}: log scale needs lower > 0")

    @property
    def box(self) -> tuple[float, float]:
        if self.scale == "log":
            return math.log(self.lower), math.log(self.upper)
        return self.lower, self.upper

    def to_internal(self, v: float) -> float:
        return math.log(v) if self.scale == "log" else v

    def from_internal(self, u: float) -> float:
        v = math.exp(u) if self.scale == "log" else u
        return min(max(v, self.lower), self.upper)

    def to_json(self) -> dict:
        return {"name": self.name, "lower": self.lower, "upper": self.upper, "scale": self.scale}


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dim, ...] = ()
    frozen: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise TpeError("duplicate dimension names")
        overlap = set(names) & set(self.frozen)
        if overlap:
            raise TpeError(f"names both free and frozen: {sorted(overlap)}")

    def contains(self, theta: Mapping[str, float]) -> bool:
        return all(d.lower <= theta[d.name] <= d.upper for d in self.dims)

    def to_json(self) -> dict:
        return {"dims": [d.to_json() for d in self.dims],
                "frozen": {k: self.frozen[k] for k in sorted(self.frozen)}}


@dataclass(frozen=True)
class TpeConfig:
    M: int = 100
    n_startup: int = 10
    gamma: float = 0.25
    n_candidates: int = 24
    seed: int = 0


@dataclass
class Trial:
    theta: dict[str, float]
    loss: float


@dataclass
class TrialLog:
    trials: list[Trial] = field(default_factory=list)

    @property
    def best_index(self) -> int:
        if not self.trials:
            raise TpeError("empty trial log")
        losses = [t.loss for t in self.trials]
        return int(np.argmin(losses))

    @property
    def best(self) -> Trial:
        return self.trials[self.best_index]

    def running_min(self) -> list[float]:
        return list(np.minimum.accumulate([t.loss for t in self.trials]))

    def to_json(self) -> dict:
        return {"trials": [{"theta": t.theta, "loss": t.loss} for t in self.trials],
                "best_index": self.best_index if self.trials else None}


def n_good(k: int, gamma: float) -> int:
    """Size of the good set; both sets are non-empty whenever k >= 2."""
    return min(max(1, math.ceil(gamma * k)), max(k - 1, 1))


def _bandwidth(values: np.ndarray, a: float, b: float) -> float:
    """Scott-style width from the sample spread, floored at (b - a) / min(100, k + 1).

    The floor keeps a small good set from collapsing onto a single point.
    """
    k = len(values)
    spread = float(values.std()) if k > 1 else 0.0
    h = spread * 1.06 * (k + 1) ** (-0.2)
    return max(h, (b - a) / min(100, k + 1), _MIN_BANDWIDTH)


def _log_density(x: np.ndarray, centers: np.ndarray, h: float, a: float, b: float) -> np.ndarray:
    """Log pdf of an equal-weight Gaussian mixture truncated to [a, b]."""
    z = (x[:, None] - centers[None, :]) / h
    mass = ndtr((b - centers) / h) - ndtr((a - centers) / h)
    log_mass = np.log(np.maximum(mass, 1e-300))
    comp = -0.5 * z * z - 0.5 * math.log(2 * math.pi) - math.log(h) - log_mass[None, :]
    return logsumexp(comp, axis=1) - math.log(len(centers))


def _sample(centers: np.ndarray, h: float, a: float, b: float, size: int,
            rng: np.random.Generator) -> np.ndarray:
    pick = centers[rng.integers(0, len(centers), size)]
    lo = ndtr((a - pick) / h)
    hi = ndtr((b - pick) / h)
    u = lo + rng.random(size) * (hi - lo)
    x = pick + h * ndtri(np.clip(u, 1e-300, 1 - 1e-16))
    return np.clip(x, a, b)


def suggest(log: TrialLog, space: SearchSpace, config: TpeConfig,
            rng: np.random.Generator) -> dict[str, float]:
    theta: dict[str, float] = {}
    k = len(log.trials)
    if k < max(config.n_startup, 2):
        for d in space.dims:
            a, b = d.box
            theta[d.name] = d.from_internal(a + (b - a) * rng.random())
    else:
        order = np.argsort([t.loss for t in log.trials], kind="stable")
        ng = n_good(k, config.gamma)
        good, bad = order[:ng], order[ng:]
        cands, score = [], np.zeros(config.n_candidates)
        for d in space.dims:
            a, b = d.box
            vals = np.array([d.to_internal(t.theta[d.name]) for t in log.trials])
            lv, gv = vals[good], vals[bad]
            hl, hg = _bandwidth(lv, a, b), _bandwidth(gv, a, b)
            cand = _sample(lv, hl, a, b, config.n_candidates, rng)
            score += _log_density(cand, lv, hl, a, b) - _log_density(cand, gv, hg, a, b)
            cands.append(cand)
        best = int(np.argmax(score))
        for d, cand in zip(space.dims, cands):
            theta[d.name] = d.from_internal(float(cand[best]))
    theta.update(space.frozen)
    return theta


def optimize(objective: Callable[[dict[str, float]], float], space: SearchSpace,
             config: TpeConfig | None = None) -> tuple[dict[str, float], float, TrialLog]:
    """Minimise ``objective`` with at most ``config.M`` evaluations."""
    config = config or TpeConfig()
    if config.M < 1:
        raise TpeError("budget M must be >= 1")
    rng = np.random.default_rng(config.seed)
    log = TrialLog()
    budget = config.M if space.dims else 1
    for _ in range(budget):
        theta = suggest(log, space, config, rng)
        loss = float(objective(dict(theta)))
        if not math.isfinite(loss):
            raise TpeError(f"objective returned non-finite loss {loss} at {theta}")
        log.trials.append(Trial(theta, loss))
    best = log.best
    return dict(best.theta), best.loss, log


def random_search(objective: Callable[[dict[str, float]], float], space: SearchSpace,
                  M: int, seed: int = 0) -> tuple[dict[str, float], float]:
    """Uniform sampling baseline at the same budget."""
    cfg = TpeConfig(M=M, n_startup=M + 1, seed=seed)
    theta, loss, _ = optimize(objective, space, cfg)
    return theta, loss
