"""Coded gradient descent on block-partitioned least squares."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .assignment import AssignmentScheme, partition_blocks, uncoded_scheme
from .decoding import decode
from .metrics import sample_alphas
from .stragglers import StragglerSet, adversarial_greedy, sample_iid

log = logging.getLogger(__name__)

HEAVY_ENTRIES = 50_000_000


class RankDeficientError(ValueError):
    pass


class NoFloorGuarantee(ValueError):
    """Raised when ``a = 1 - r sqrt(L'/mu)`` is not positive."""


def problem_is_heavy(N: int, k: int) -> bool:
    return N * k > HEAVY_ENTRIES


@dataclass
class Problem:
    X: np.ndarray
    Y: np.ndarray
    n_blocks: int
    theta_star: np.ndarray
    mu: float
    L: float
    L_block: float
    sigma2: float
    theta_true: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def block_size(self) -> int:
        return self.N // self.n_blocks

    def block(self, b: int) -> tuple[np.ndarray, np.ndarray]:
        s = self.block_size
        return self.X[b * s:(b + 1) * s], self.Y[b * s:(b + 1) * s]

    def full_gradient(self, theta) -> np.ndarray:
        return 2.0 * self.X.T @ (self.X @ theta - self.Y)

    def with_blocks(self, n_blocks: int) -> "Problem":
        """Same data, repartitioned."""
        return _finish_problem(self.X, self.Y, n_blocks, self.theta_star, self.theta_true, dict(self.meta))


def block_gradient(problem: Problem, b: int, theta) -> np.ndarray:
    xb, yb = problem.block(b)
    return 2.0 * (xb.T @ (xb @ theta - yb))


def _finish_problem(X, Y, n_blocks, theta_star, theta_true, meta) -> Problem:
    part = partition_blocks(X.shape[0], n_blocks)
    hess = 2.0 * X.T @ X
    eig = np.linalg.eigvalsh(hess)
    s = part.size
    L_block = max(2.0 * np.linalg.norm(X[b * s:(b + 1) * s], 2) ** 2 for b in range(n_blocks))
    problem = Problem(
        X=X, Y=Y, n_blocks=n_blocks, theta_star=theta_star,
        mu=float(eig[0]), L=float(eig[-1]), L_block=float(L_block), sigma2=0.0,
        theta_true=theta_true, meta=meta,
    )
    problem.sigma2 = float(sum(np.sum(block_gradient(problem, b, theta_star) ** 2) for b in range(n_blocks)))
    return problem


def gen_least_squares(N: int, k: int, noise_sigma: float, seed: int, n_blocks: int) -> Problem:
    """Random least-squares instance ``min |X theta - Y|^2``.

    Rows of X are N(0, I/k), the planted theta is N(0, I) and the noise is
    ``noise_sigma**2`` times a standard normal vector.
    """
    if k < 1:
        raise ValueError("k must be positive")
    partition_blocks(N, n_blocks)
    if problem_is_heavy(N, k):
        log.warning("least-squares instance N=%d, k=%d is heavy (%d entries)", N, k, N * k)
    if N < k:
        raise RankDeficientError(f"X^T X is singular for N={N} < k={k}; use more rows or another seed")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, k)) / math.sqrt(k)
    theta = rng.standard_normal(k)
    Y = X @ theta + noise_sigma**2 * rng.standard_normal(N)
    gram = X.T @ X
    eig = np.linalg.eigvalsh(gram)
    if eig[0] <= 1e-12 * eig[-1]:
        raise RankDeficientError(f"X^T X is numerically singular (seed={seed}); retry with another seed")
    theta_star = np.linalg.solve(gram, X.T @ Y)
    meta = {"N": N, "k": k, "noise_sigma": noise_sigma, "seed": seed}
    return _finish_problem(X, Y, n_blocks, theta_star, theta, meta)


def block_permutation(n_blocks: int, seed: int) -> np.ndarray:
    """Vertex ``i`` holds data block ``perm[i]``."""
    return np.random.default_rng(np.random.SeedSequence([seed, 1])).permutation(n_blocks)


def column_gradient(column, perm, block_grads) -> np.ndarray:
    """``g_j = sum_i A_ij grad f_{perm(i)}``, accumulated in ascending row order."""
    g = None
    for i, val in column:
        term = val * block_grads[perm[i]]
        g = term if g is None else g + term
    return g


def combine(w, grads: dict[int, np.ndarray], k: int) -> np.ndarray:
    """``sum_j w_j g_j`` over the received machines in ascending index order."""
    total = np.zeros(k)
    for j in sorted(grads):
        if w[j] != 0.0:
            total = total + w[j] * grads[j]
    return total


@dataclass(frozen=True)
class DecaySchedule:
    """``gamma_t = min(cap, base * growth**c / (t + 1))``."""

    c: float
    base: float = 0.3
    growth: float = 1.3
    cap: float = 0.6

    def __call__(self, t: int) -> float:
        return min(self.cap, self.base * self.growth**self.c / (t + 1))


def _step(gamma, t: int) -> float:
    return float(gamma(t)) if callable(gamma) else float(gamma)


def constant_grid(base: float = 1e-6, growth: float = 1.3, cs=range(21)) -> list[float]:
    return [base * growth**c for c in cs]


def decay_grid(cs=range(1, 21)) -> list[DecaySchedule]:
    return [DecaySchedule(c) for c in cs]


@dataclass
class GdTrace:
    err_sq: list[float]
    step: list[float]
    stragglers: list[int]
    alpha_err: list[float]
    config: dict = field(default_factory=dict)
    iterates: list[np.ndarray] | None = None
    straggler_sets: list[tuple[int, ...]] = field(default_factory=list)
    diverged: bool = False

    def __len__(self):
        return len(self.err_sq)

    @property
    def final_error(self) -> float:
        return math.inf if self.diverged else self.err_sq[-1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "err_sq", "step", "stragglers", "alpha_err"])
            for t in range(len(self.err_sq)):
                w.writerow([t, repr(float(self.err_sq[t])), repr(float(self.step[t])), self.stragglers[t],
                            repr(float(self.alpha_err[t]))])
        with open(f"{path}.json", "w") as fh:
            json.dump({**self.config, "diverged": self.diverged}, fh, indent=2, sort_keys=True, default=str)


class _Recorder:
    def __init__(self, problem, theta0, keep_iterates, config):
        self.problem = problem
        self.trace = GdTrace([float(np.sum((theta0 - problem.theta_star) ** 2))], [math.nan], [0], [math.nan], config)
        if keep_iterates:
            self.trace.iterates = [theta0.copy()]

    def record(self, theta, step, n_strag, alpha_err, members=()):
        tr = self.trace
        if not np.all(np.isfinite(theta)):
            tr.diverged = True
            return False
        tr.err_sq.append(float(np.sum((theta - self.problem.theta_star) ** 2)))
        tr.step.append(step)
        tr.stragglers.append(n_strag)
        tr.alpha_err.append(alpha_err)
        tr.straggler_sets.append(tuple(members))
        if tr.iterates is not None:
            tr.iterates.append(theta.copy())
        return True


def coded_step(problem, scheme, perm, theta, dec, scale=1.0) -> np.ndarray:
    """Aggregate the non-straggling machines' gradients with the decoded weights."""
    members = set(dec.stragglers)
    needed = sorted({int(perm[i]) for j in range(scheme.m) if j not in members for i, _ in scheme.columns[j]})
    bg = {b: block_gradient(problem, b, theta) for b in needed}
    grads = {j: column_gradient(scheme.columns[j], perm, bg) for j in range(scheme.m) if j not in members and scheme.columns[j]}
    return combine(dec.w / scale, grads, problem.k)


def gcod_run(problem, scheme, decoder, p, gamma, iterations, seed, *,
             alpha_scale=1.0, straggler_schedule=None, theta0=None, keep_iterates=False) -> GdTrace:
    """Gradient coding with per-iteration decoding.

    Stragglers are iid(p) each iteration unless ``straggler_schedule`` gives
    the sets explicitly.  Decoded weights are divided by ``alpha_scale``.
    """
    if scheme.n_blocks != problem.n_blocks:
        raise ValueError(f"scheme has {scheme.n_blocks} blocks, problem has {problem.n_blocks}")
    perm = block_permutation(problem.n_blocks, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    theta = np.zeros(problem.k) if theta0 is None else np.array(theta0, dtype=float)
    config = {"scheme": scheme.kind, "scheme_hash": scheme.hash, "decoder": decoder, "p": p, "seed": seed,
              "gamma": repr(gamma), "iterations": iterations, "alpha_scale": alpha_scale, "perm": perm.tolist()}
    rec = _Recorder(problem, theta, keep_iterates, config)
    for t in range(iterations):
        if straggler_schedule is not None:
            members = tuple(straggler_schedule[t])
        else:
            members = sample_iid(scheme.m, p, rng).members
        dec = decode(scheme, members, decoder, p)
        step = _step(gamma, t)
        theta = theta - step * coded_step(problem, scheme, perm, theta, dec, alpha_scale)
        alpha_err = float(np.sum((dec.alpha / alpha_scale - 1.0) ** 2))
        if not rec.record(theta, step, len(members), alpha_err, members):
            break
    return rec.trace


def sgd_alg_run(beta_sampler, problem, gamma, iterations, seed, *, theta0=None, keep_iterates=False) -> GdTrace:
    """``theta <- theta - gamma * sum_i beta_i grad f_{rho(i)}`` with fresh ``beta`` each step."""
    perm = block_permutation(problem.n_blocks, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    theta = np.zeros(problem.k) if theta0 is None else np.array(theta0, dtype=float)
    rec = _Recorder(problem, theta, keep_iterates, {"seed": seed, "gamma": repr(gamma), "iterations": iterations})
    for t in range(iterations):
        beta = np.asarray(beta_sampler(rng), dtype=float)
        if beta.shape != (problem.n_blocks,):
            raise ValueError(f"beta sampler must yield length-{problem.n_blocks} vectors")
        step = _step(gamma, t)
        update = np.zeros(problem.k)
        for i in range(problem.n_blocks):
            if beta[i] != 0.0:
                update = update + beta[i] * block_gradient(problem, int(perm[i]), theta)
        theta = theta - step * update
        if not rec.record(theta, step, 0, float(np.sum((beta - 1.0) ** 2))):
            break
    return rec.trace


def alpha_sampler(scheme: AssignmentScheme, decoder: str, p: float, scale: float = 1.0):
    """Sampler of ``alpha / scale`` under iid(p) stragglers, for ``sgd_alg_run``."""
    return lambda rng: sample_alphas(scheme, decoder, p, rng, 1)[0] / scale


def uncoded_baseline(problem, p, multiplier, iterations, gamma, seed, m=None, **kw) -> GdTrace:
    """Ignore stragglers on an unreplicated split over ``m`` machines, ``multiplier`` times longer."""
    if multiplier < 1:
        raise ValueError("multiplier must be at least 1")
    m = m or problem.n_blocks
    prob = problem if m == problem.n_blocks else problem.with_blocks(m)
    return gcod_run(prob, uncoded_scheme(m), "ignore", p, gamma, int(multiplier * iterations), seed, **kw)


def adversarial_gd_run(problem, scheme, s, mode, gamma, iterations, seed=0, *,
                       straggler_set=None, theta0=None, keep_iterates=False) -> GdTrace:
    """Optimal decoding against an adversary with budget ``s`` per iteration.

    ``mode`` is ``fixed_set`` (one set throughout, greedy unless given) or
    ``per_iteration_greedy``.  ``trace.config["r_measured"]`` holds the largest
    ``|alpha - 1|_2`` seen.
    """
    if mode not in ("fixed_set", "per_iteration_greedy"):
        raise ValueError(f"unknown adversary mode {mode!r}")
    if scheme.graph is None and (mode == "per_iteration_greedy" or straggler_set is None):
        raise ValueError("greedy adversary needs a graph scheme")
    if mode == "fixed_set":
        fixed = straggler_set if straggler_set is not None else adversarial_greedy(scheme.graph, s, seed)
        fixed = StragglerSet(scheme.m, tuple(fixed))
        if len(fixed) > s:
            raise ValueError(f"straggler set larger than budget {s}")
        schedule = [fixed.members] * iterations
    else:
        schedule = [adversarial_greedy(scheme.graph, s, seed + t).members for t in range(iterations)]
    if gamma is None:
        r = math.sqrt(decode(scheme, schedule[0], "optimal").error) if schedule else 0.0
        try:
            gamma = predict_adversarial(ConvergenceParams(
                mu=problem.mu, L=problem.L, L_block=problem.L_block, sigma2=problem.sigma2, r=r,
                eps0=float(np.sum(problem.theta_star**2)), n_blocks=problem.n_blocks), eps=1.0).gamma
        except NoFloorGuarantee:
            log.warning("no noise-floor guarantee (a <= 0); running with gamma = 1/L")
            gamma = 1.0 / problem.L
    trace = gcod_run(problem, scheme, "optimal", 0.0, gamma, iterations, seed,
                     straggler_schedule=schedule, theta0=theta0, keep_iterates=keep_iterates)
    trace.config["adversary"] = mode
    trace.config["budget"] = s
    trace.config["r_measured"] = math.sqrt(max((x for x in trace.alpha_err[1:]), default=0.0))
    return trace


@dataclass(frozen=True)
class GridResult:
    gamma: object
    score: float
    table: tuple[tuple[object, float], ...]


def _step_key(g) -> float:
    return g(0) if callable(g) else float(g)


def grid_search_step(runner, grid, seeds) -> GridResult:
    """Pick the step (or schedule) with the smallest mean terminal error.

    ``runner(gamma, seed)`` returns a ``GdTrace`` or a terminal error.
    """
    if not grid:
        raise ValueError("empty step grid")
    table = []
    for gamma in grid:
        errs = []
        for seed in seeds:
            out = runner(gamma, seed)
            errs.append(out.final_error if isinstance(out, GdTrace) else float(out))
        score = float(np.mean(errs)) if all(math.isfinite(e) for e in errs) else math.inf
        table.append((gamma, score))
    finite = [(score, _step_key(g), i) for i, (g, score) in enumerate(table) if math.isfinite(score)]
    if not finite:
        raise RuntimeError("every step-size candidate diverged")
    _, _, best = min(finite)
    return GridResult(table[best][0], table[best][1], tuple(table))


@dataclass(frozen=True)
class ConvergenceParams:
    mu: float
    L: float
    L_block: float
    sigma2: float
    r: float
    s: float = 0.0
    eps: float = 0.0
    eps0: float = 0.0
    n_blocks: int = 2

    def __post_init__(self):
        for name in ("mu", "L", "L_block", "sigma2", "r", "s", "eps", "eps0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def predict_random(params: ConvergenceParams) -> tuple[float, int]:
    """Step size and iteration count reaching ``E|theta_k - theta*|^2 <= eps``."""
    mu, L, Lp, s, r = params.mu, params.L, params.L_block, params.s, params.r
    eps, eps0, n = params.eps, params.eps0, params.n_blocks
    if mu <= 0:
        raise ValueError("mu must be positive")
    if eps <= 0 or eps0 <= eps / 2:
        raise ValueError("need eps > 0 and eps0 > eps/2")
    noise = r * (1 + 1 / (n - 1)) * params.sigma2
    gamma = mu * eps / (2 * mu * eps * (s * Lp + L) + 2 * noise)
    k = 2 * math.log(2 * eps0 / eps) * (s * Lp / mu + L / mu + noise / (mu**2 * eps))
    return gamma, math.ceil(k)


@dataclass(frozen=True)
class AdversarialPrediction:
    gamma: float
    k_max: float
    floor: float
    a: float


def predict_adversarial(params: ConvergenceParams, eps: float = 1.0) -> AdversarialPrediction:
    """Constant step and iteration bound for reaching ``(1+eps) r sigma / (a mu)``.

    ``params.r`` bounds ``|alpha - 1|_2`` at every iteration.
    """
    if not 0 < eps <= 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    mu, L, Lp, r = params.mu, params.L, params.L_block, params.r
    if mu <= 0:
        raise ValueError("mu must be positive")
    a = 1 - r * math.sqrt(Lp) / math.sqrt(mu)
    if a <= 0:
        raise NoFloorGuarantee(f"a = {a:.4f} <= 0: strong convexity too small for this adversary")
    curv = L**2 + 2 * r * L * Lp + 4 * r**2 * Lp**2
    gamma = eps * a * mu / (4 * curv)
    sigma = math.sqrt(params.sigma2)
    floor = (1 + eps) * r * sigma / (a * mu)
    if r == 0 or sigma == 0:
        k_max = math.inf if params.eps0 > 0 else 0.0
    else:
        ratio = 2 * a**2 * mu**2 * params.eps0 / ((1 + eps) ** 2 * r**2 * params.sigma2)
        k_max = max(0.0, 4 * (1 + eps) * curv * math.log(ratio) / (3 * a**2 * mu**2 * eps**2))
    return AdversarialPrediction(gamma=gamma, k_max=k_max, floor=floor, a=a)
