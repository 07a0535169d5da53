"""Deterministic map-reduce over path batches.

Paths are split into batches whose size is a fixed multiple of the RNG block,
independent of the worker count.  Workers return per-path sample arrays; the
driver concatenates them in path order and reduces with a fixed pairwise tree,
so results are bit-identical for any number of workers.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from fkhess.rng import RNG_BLOCK

DEFAULT_BATCH = 8 * RNG_BLOCK
WORKERS_ENV = "FKHESS_WORKERS"


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from exc
    if value < 1:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return value


def batches(n_paths: int, batch_size: int = DEFAULT_BATCH, offset: int = 0) -> list[np.ndarray]:
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    if batch_size % RNG_BLOCK:
        raise ValueError("batch size must be a multiple of the RNG block")
    starts = range(0, n_paths, batch_size)
    return [np.arange(offset + s, offset + min(s + batch_size, n_paths)) for s in starts]


def pairwise_sum(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum along ``axis`` with a fixed balanced tree (independent of chunking)."""
    a = np.moveaxis(np.asarray(a, dtype=float), axis, 0)
    if a.shape[0] == 0:
        return np.zeros(a.shape[1:])
    while a.shape[0] > 1:
        if a.shape[0] % 2:
            a = np.concatenate([a, np.zeros((1,) + a.shape[1:])], axis=0)
        a = a[0::2] + a[1::2]
    return a[0]


def pairwise_mean(a: np.ndarray, axis: int = 0) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return pairwise_sum(a, axis) / a.shape[axis]


def map_paths(
    fn: Callable[..., Any],
    n_paths: int,
    *args,
    workers: int | None = None,
    batch_size: int = DEFAULT_BATCH,
    **kwargs,
) -> Any:
    """Apply ``fn(index_array, *args, **kwargs)`` to every batch and concatenate.

    ``fn`` must return an array (or a dict / tuple of arrays) whose leading
    axis is the path axis.  Concatenation follows path order.
    """
    workers = default_workers() if workers is None else int(workers)
    parts = batches(n_paths, batch_size)
    if workers <= 1 or len(parts) == 1:
        results = [fn(idx, *args, **kwargs) for idx in parts]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fn, idx, *args, **kwargs) for idx in parts]
            results = [f.result() for f in futures]
    return _concat(results)


def _concat(results):
    first = results[0]
    if isinstance(first, dict):
        return {k: _concat([r[k] for r in results]) for k in first}
    if isinstance(first, tuple):
        return tuple(_concat([r[i] for r in results]) for i in range(len(first)))
    return np.concatenate([np.asarray(r) for r in results], axis=0)


@dataclass
class McEstimate:
    """Monte Carlo estimate with entrywise standard errors.

    ``extra`` carries optional ratio-estimator diagnostics (numerator and
    denominator means, their covariance) and any secondary outputs.
    """

    value: np.ndarray
    stderr: np.ndarray
    n_paths: int
    seed: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        if self.value.shape != self.stderr.shape:
            raise ValueError("value and stderr shapes differ")
        if np.any(self.stderr < 0) or not np.all(np.isfinite(self.value)):
            raise FloatingPointError("estimate is not finite or has negative stderr")

    def to_dict(self) -> dict:
        out = {
            "value": self.value.tolist(),
            "stderr": self.stderr.tolist(),
            "n_paths": int(self.n_paths),
            "seed": int(self.seed),
        }
        for k, v in self.extra.items():
            out[k] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
        return out


def _require_finite(samples: np.ndarray, label: str) -> None:
    """Raise with the position of the first non-finite per-path sample."""
    bad = ~np.isfinite(samples.reshape(samples.shape[0], -1)).all(axis=1)
    if np.any(bad):
        raise FloatingPointError(f"non-finite {label} at path position {int(np.argmax(bad))}")


def mean_estimate(samples: np.ndarray, seed: int) -> McEstimate:
    """Sample mean over the leading (path) axis with the usual stderr."""
    samples = np.asarray(samples, dtype=float)
    _require_finite(samples, "sample")
    m = samples.shape[0]
    mean = pairwise_mean(samples)
    var = pairwise_sum((samples - mean) ** 2) / max(m - 1, 1)
    return McEstimate(mean, np.sqrt(var / m), m, seed)


def ratio_estimate(numer: np.ndarray, denom: np.ndarray, seed: int) -> McEstimate:
    """Ratio of means with the bivariate delta-method standard error.

    ``numer`` has shape (m, ...) and ``denom`` shape (m,); paths are shared.
    """
    numer = np.asarray(numer, dtype=float)
    denom = np.asarray(denom, dtype=float)
    _require_finite(numer, "numerator sample")
    _require_finite(denom, "denominator sample")
    m = numer.shape[0]
    mu_n = pairwise_mean(numer)
    mu_d = float(pairwise_mean(denom))
    if mu_d == 0.0 or not math.isfinite(mu_d):
        raise FloatingPointError("ratio denominator mean is zero or not finite")
    ratio = mu_n / mu_d
    dshape = (m,) + (1,) * (numer.ndim - 1)
    # influence function of the ratio: (U - R D) / mean(D)
    infl = (numer - ratio * denom.reshape(dshape)) / mu_d
    var = pairwise_sum(infl**2) / max(m - 1, 1)
    cov = pairwise_sum((numer - mu_n) * (denom - mu_d).reshape(dshape)) / max(m - 1, 1)
    extra = {"numerator_mean": mu_n, "denominator_mean": mu_d, "covariance": cov}
    return McEstimate(ratio, np.sqrt(var / m), m, seed, extra)
