"""Monte Carlo decoding error, covariance norm, and closed-form bounds.

Trials are split into fixed-size chunks, each with its own generator seeded
from ``(seed, pass, chunk)``.  Chunk results are merged in chunk order, so
estimates do not depend on how many threads computed them.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .assignment import AssignmentScheme
from .decoding import decode_oracle, optimal_alpha_graph

CHUNK = 1000
COV_MAX_BLOCKS = 4096
DEGENERATE_C = 1e-6

CSV_COLUMNS = [
    "scheme", "decoder", "p", "trials", "mean", "stderr", "raw_mean", "c",
    "lb_universal", "lb_fixed", "adv_upper",
]


def resolve_threads(threads: int | None = None) -> int:
    env = os.environ.get("GRADCODE_THREADS")
    if env:
        return max(1, int(env))
    return max(1, threads or 1)


@dataclass(frozen=True)
class BoundSet:
    lb_universal: float
    lb_fixed: float
    adv_upper: float
    lb_fixed_cov: float


def bounds(d: float, p: float, lam: float) -> BoundSet:
    """Lower bounds for any / fixed decoding and the adversarial upper bound.

    ``lam`` is the spectral gap ``d - lambda2``; it may exceed ``d``.
    """
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if lam > 2 * d:
        raise ValueError(f"gap {lam} exceeds 2d")
    return BoundSet(
        lb_universal=p**d / (1 - p**d),
        lb_fixed=p / (d * (1 - p)),
        adv_upper=(2 * d - lam) / (2 * d) * p / (1 - p),
        lb_fixed_cov=2 * p / (d * (1 - p)),
    )


def _resolve_decoder(scheme: AssignmentScheme, decoder: str) -> str:
    if decoder == "optimal":
        return {"graph": "optimal_graph", "frc": "optimal_frc"}.get(scheme.kind, "oracle")
    return decoder


def sample_alphas(scheme: AssignmentScheme, decoder: str, p: float, rng, count: int) -> np.ndarray:
    """``count`` independent draws of ``alpha`` under iid(p) stragglers, shape ``(count, n)``."""
    decoder = _resolve_decoder(scheme, decoder)
    alive = ~(rng.random((count, scheme.m)) < p)
    a = scheme.matrix
    if decoder == "fixed":
        return (alive * (1.0 / (scheme.d * (1.0 - p)))) @ a.T
    if decoder == "ignore":
        return alive.astype(float) @ a.T
    if decoder == "optimal_frc":
        groups = np.asarray(scheme.groups)
        onehot = np.zeros((scheme.m, groups.max() + 1))
        onehot[np.arange(scheme.m), groups] = 1.0
        counts = alive.astype(float) @ onehot
        w = np.where(alive, 1.0 / np.maximum(counts[:, groups], 1.0), 0.0)
        return w @ a.T
    out = np.empty((count, scheme.n_blocks))
    if decoder == "optimal_graph":
        g = scheme.graph
        for t in range(count):
            out[t] = optimal_alpha_graph(g, alive[t])
        return out
    if decoder == "oracle":
        for t in range(count):
            out[t] = decode_oracle(scheme, np.flatnonzero(~alive[t])).alpha
        return out
    raise ValueError(f"decoder {decoder!r} not supported for Monte Carlo")


def _chunks(trials: int):
    return [(start, min(CHUNK, trials - start)) for start in range(0, trials, CHUNK)]


def _map_chunks(fn, seed: int, pass_id: int, trials: int, threads: int | None):
    jobs = [
        (np.random.default_rng(np.random.SeedSequence([seed, pass_id, k])), size)
        for k, (_, size) in enumerate(_chunks(trials))
    ]
    threads = resolve_threads(threads)
    if threads == 1:
        return [fn(rng, size) for rng, size in jobs]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def _mean_alpha_sums(scheme, decoder, p, trials, seed, pass_id, threads):
    def work(rng, size):
        al = sample_alphas(scheme, decoder, p, rng, size)
        return al.sum(axis=0), (al * al).sum(axis=0)

    total = np.zeros(scheme.n_blocks)
    total_sq = np.zeros(scheme.n_blocks)
    for s1, s2 in _map_chunks(work, seed, pass_id, trials, threads):
        total += s1
        total_sq += s2
    return total, total_sq


def mean_alpha(scheme, decoder, p, trials, seed, threads=None, return_stderr=False):
    """Per-block Monte Carlo mean of ``alpha``."""
    if trials < 100:
        raise ValueError("mean_alpha needs at least 100 trials")
    total, total_sq = _mean_alpha_sums(scheme, decoder, p, trials, seed, 0, threads)
    mean = total / trials
    if not return_stderr:
        return mean
    var = np.maximum(total_sq / trials - mean**2, 0.0) * trials / (trials - 1)
    return mean, np.sqrt(var / trials)


def normalization_constant(scheme, decoder, p, trials, seed, threads=None) -> float:
    """``c = |E[alpha]|_2 / |1|_2`` estimated on its own stream."""
    mean = mean_alpha(scheme, decoder, p, trials, seed, threads)
    c = float(np.linalg.norm(mean) / math.sqrt(scheme.n_blocks))
    if c <= DEGENERATE_C:
        raise ValueError(f"normalization constant {c:.3e} is degenerate; stragglers almost always win")
    return c


@dataclass(frozen=True)
class ErrorEstimate:
    mean: float
    stderr: float
    trials: int
    c: float
    raw_mean: float
    raw_stderr: float


def mc_error(scheme, decoder, p, trials, seed, threads=None) -> ErrorEstimate:
    """Two-pass estimate of ``(1/n) E|alpha/c - 1|^2`` and of the raw error."""
    if trials < 100:
        raise ValueError("mc_error needs at least 100 trials")
    n = scheme.n_blocks
    c = normalization_constant(scheme, decoder, p, trials, seed, threads)

    def work(rng, size):
        al = sample_alphas(scheme, decoder, p, rng, size)
        raw = np.sum((al - 1.0) ** 2, axis=1) / n
        norm = np.sum((al / c - 1.0) ** 2, axis=1) / n
        return np.array([norm.sum(), (norm**2).sum(), raw.sum(), (raw**2).sum()])

    acc = np.zeros(4)
    for part in _map_chunks(work, seed, 1, trials, threads):
        acc += part

    def mean_se(s1, s2):
        mean = s1 / trials
        var = max(s2 / trials - mean**2, 0.0) * trials / (trials - 1)
        return mean, math.sqrt(var / trials)

    mean, se = mean_se(acc[0], acc[1])
    raw, raw_se = mean_se(acc[2], acc[3])
    return ErrorEstimate(mean=float(mean), stderr=se, trials=trials, c=c, raw_mean=float(raw), raw_stderr=raw_se)


def operator_norm(mat: np.ndarray, tol: float = 1e-8, max_iter: int = 100_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    n = mat.shape[0]
    if not np.any(mat):
        return 0.0
    x = np.random.default_rng(0).standard_normal(n)
    x /= np.linalg.norm(x)
    value = 0.0
    for _ in range(max_iter):
        y = mat @ x
        new_value = float(x @ y)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        x = y / norm
        if abs(new_value - value) <= tol * max(abs(new_value), 1e-300):
            return new_value
        value = new_value
    return float(np.linalg.eigvalsh(mat)[-1])


def covariance_opnorm(scheme, decoder, p, trials, seed, threads=None) -> tuple[float, float]:
    """Operator norm of ``E[(alpha/c - 1)(alpha/c - 1)^T]`` and a split-half error proxy."""
    n = scheme.n_blocks
    if n > COV_MAX_BLOCKS:
        raise ValueError(f"covariance buffer limited to n <= {COV_MAX_BLOCKS}")
    if trials < 1000:
        raise ValueError("covariance_opnorm needs at least 1000 trials")
    c = normalization_constant(scheme, decoder, p, trials, seed, threads)

    def work(rng, size):
        dev = sample_alphas(scheme, decoder, p, rng, size) / c - 1.0
        return dev.T @ dev

    parts = _map_chunks(work, seed, 2, trials, threads)
    sizes = [size for _, size in _chunks(trials)]
    half = len(parts) // 2 if len(parts) > 1 else 1
    first = sum(parts[:half])
    second = sum(parts[half:]) if len(parts) > 1 else None
    t1 = sum(sizes[:half])
    value = operator_norm((first + (second if second is not None else 0)) / trials)
    if second is None:
        return value, float("nan")
    proxy = abs(operator_norm(first / t1) - operator_norm(second / (trials - t1))) / 2
    return value, proxy


def write_error_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


def error_row(scheme_name, decoder, p, est: ErrorEstimate, bnd: BoundSet) -> dict:
    return {
        "scheme": scheme_name, "decoder": decoder, "p": p, "trials": est.trials,
        "mean": est.mean, "stderr": est.stderr, "raw_mean": est.raw_mean, "c": est.c,
        "lb_universal": bnd.lb_universal, "lb_fixed": bnd.lb_fixed, "adv_upper": bnd.adv_upper,
    }

