"""Synthetic tasks with a known generating process."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .dataset import Dataset

ORACLE_THRESHOLD = 0.55


def oracle_logit(X: np.ndarray) -> np.ndarray:
    """3 x1 - 2 x2 plus an interaction that only switches on for x3 > 0.55."""
    x1, x2, x3, x4, x5 = (X[:, j] for j in range(5))
    return 3 * x1 - 2 * x2 + (x3 > ORACLE_THRESHOLD) * (2.5 * x4 * x5 - 1)


def oracle_task(n: int = 4000, seed: int = 0, d: int = 6) -> Dataset:
    if d < 5:
        raise ValueError("the oracle needs at least 5 features")
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    y = (rng.random(n) < expit(oracle_logit(X))).astype(int)
    names = tuple(f"x{j + 1}" for j in range(d))
    return Dataset(X, y, names, tuple(str(i) for i in range(n)))
