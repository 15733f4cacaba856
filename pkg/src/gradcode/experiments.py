"""Config-driven experiments writing long-format CSV plus a JSON sidecar.

The sidecar carries the full validated config, the package version, the
scheme hashes and the SHA-256 of the CSV, which is enough to replay the run
and check the output byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import tempfile
from pathlib import Path
from typing import Literal

import numpy as np
import tomli
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import __version__
from .assignment import AssignmentScheme, adjacency_scheme, debias, frc_scheme, graph_scheme, load_scheme, uncoded_scheme
from .decoding import decode, decode_inherited
from .descent import (
    DecaySchedule, constant_grid, gcod_run, gen_least_squares, grid_search_step, predict_random,
    ConvergenceParams, uncoded_baseline,
)
from .graphs import Graph, gen_circulant, gen_named, gen_random_regular, load_edge_list, spectral_profile
from .metrics import bounds, covariance_opnorm, error_row, mc_error, sample_alphas, write_error_csv
from .stragglers import EXHAUSTIVE_BUDGET, adversarial_exhaustive, adversarial_greedy

KINDS = ("error_sweep", "covariance_sweep", "adversarial_audit", "gd_compare", "debias_demo", "predict")
GD_ALGORITHMS = ("graph-optimal", "graph-fixed", "adjacency-optimal", "frc-optimal", "uncoded")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GraphSpec(_Strict):
    family: Literal["random_regular", "circulant", "complete", "cycle", "file"]
    n: int | None = None
    d: int | None = None
    offsets: list[int] | None = None
    seed: int = 0
    path: str | None = None

    @model_validator(mode="after")
    def _check(self):
        need = {"random_regular": ("n", "d"), "circulant": ("n", "offsets"), "complete": ("n",),
                "cycle": ("n",), "file": ("path",)}[self.family]
        missing = [f for f in need if getattr(self, f) is None]
        if missing:
            raise ValueError(f"graph family {self.family} needs {', '.join(missing)}")
        return self

    def build(self, base_dir: Path) -> Graph:
        if self.family == "random_regular":
            return gen_random_regular(self.n, self.d, self.seed)
        if self.family == "circulant":
            return gen_circulant(self.n, self.offsets)
        if self.family == "file":
            return load_edge_list(base_dir / self.path)
        return gen_named(self.family, self.n)


class SchemeSpec(_Strict):
    kind: Literal["graph", "adjacency", "frc", "uncoded", "file"]
    name: str | None = None
    decoder: str = "optimal"
    graph: GraphSpec | None = None
    n_blocks: int | None = None
    m: int | None = None
    d: int | None = None
    path: str | None = None

    @model_validator(mode="after")
    def _check(self):
        need = {"graph": ("graph",), "adjacency": ("graph",), "frc": ("n_blocks", "m", "d"),
                "uncoded": ("m",), "file": ("path",)}[self.kind]
        missing = [f for f in need if getattr(self, f) is None]
        if missing:
            raise ValueError(f"scheme kind {self.kind} needs {', '.join(missing)}")
        return self

    @property
    def label(self) -> str:
        return self.name or f"{self.kind}-{self.decoder}"

    def build(self, base_dir: Path) -> AssignmentScheme:
        if self.kind == "graph":
            return graph_scheme(self.graph.build(base_dir))
        if self.kind == "adjacency":
            return adjacency_scheme(self.graph.build(base_dir))
        if self.kind == "frc":
            return frc_scheme(self.n_blocks, self.m, self.d)
        if self.kind == "uncoded":
            return uncoded_scheme(self.m)
        return load_scheme(base_dir / self.path)


class ProblemSpec(_Strict):
    N: int
    k: int
    noise_sigma: float
    seed: int = 0
    n_blocks: int


class StepGrid(_Strict):
    family: Literal["constant", "decay"] = "constant"
    base: float = 1e-6
    growth: float = 1.3
    cs: list[int] = Field(default_factory=lambda: list(range(21)))

    def candidates(self):
        if self.family == "constant":
            return constant_grid(self.base, self.growth, self.cs)
        return [DecaySchedule(c) for c in self.cs]


class ExperimentConfig(_Strict):
    kind: Literal[KINDS]
    seed: int = 0
    trials: int = Field(default=10_000, ge=100)
    p: list[float] = Field(default_factory=list)
    schemes: list[SchemeSpec] = Field(default_factory=list)
    out: str = "results.csv"
    threads: int | None = None
    # adversarial_audit
    budgets: list[int] = Field(default_factory=list)
    # gd_compare / predict
    problem: ProblemSpec | None = None
    iterations: int = 50
    seeds: list[int] = Field(default_factory=lambda: list(range(8)))
    grid: StepGrid = Field(default_factory=StepGrid)
    algorithms: list[str] = Field(default_factory=lambda: list(GD_ALGORITHMS))
    d: int = 3
    m: int = 24
    graph: GraphSpec | None = None
    uncoded_multiplier: float | None = None
    # debias_demo
    eps: float | None = None
    mean_trials: int | None = Field(default=None, ge=100)
    # predict
    eps_factors: list[float] = Field(default_factory=lambda: [1e-2, 1e-3])

    @field_validator("p")
    @classmethod
    def _p_in_range(cls, v):
        bad = [x for x in v if not 0 < x < 1]
        if bad:
            raise ValueError(f"p values must lie in (0, 1): {bad}")
        return v

    @field_validator("algorithms")
    @classmethod
    def _known_algorithms(cls, v):
        bad = [a for a in v if a not in GD_ALGORITHMS]
        if bad:
            raise ValueError(f"unknown algorithms {bad}; choose from {list(GD_ALGORITHMS)}")
        return v

    @model_validator(mode="after")
    def _check(self):
        if self.kind in ("error_sweep", "covariance_sweep", "debias_demo", "gd_compare", "predict") and not self.p:
            raise ValueError("p grid must not be empty")
        if self.kind in ("error_sweep", "covariance_sweep", "adversarial_audit", "debias_demo", "predict") and not self.schemes:
            raise ValueError("schemes must not be empty")
        if self.kind == "adversarial_audit" and not self.budgets:
            raise ValueError("budgets must not be empty")
        if self.kind in ("gd_compare", "predict") and self.problem is None:
            raise ValueError(f"{self.kind} needs a problem")
        if self.kind == "covariance_sweep" and self.trials < 1000:
            raise ValueError("covariance_sweep needs trials >= 1000")
        return self


def load_experiment_config(path, overrides: dict | None = None) -> ExperimentConfig:
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.model_validate(data)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def _gap(scheme: AssignmentScheme) -> float:
    if scheme.graph is None or scheme.graph.regular_degree() is None:
        return math.nan
    return spectral_profile(scheme.graph).gap


# --- experiment kinds --------------------------------------------------------


def _error_sweep(cfg, base, out):
    rows, hashes = [], {}
    for spec in cfg.schemes:
        scheme = spec.build(base)
        hashes[spec.label] = scheme.hash
        gap = _gap(scheme)
        for p in cfg.p:
            est = mc_error(scheme, spec.decoder, p, cfg.trials, cfg.seed, cfg.threads)
            rows.append(error_row(spec.label, spec.decoder, p, est, bounds(scheme.d, p, gap)))
    write_error_csv(rows, out)
    return hashes


def _covariance_sweep(cfg, base, out):
    rows, hashes = [], {}
    for spec in cfg.schemes:
        scheme = spec.build(base)
        hashes[spec.label] = scheme.hash
        for p in cfg.p:
            value, proxy = covariance_opnorm(scheme, spec.decoder, p, cfg.trials, cfg.seed, cfg.threads)
            b = bounds(scheme.d, p, math.nan)
            rows.append({"scheme": spec.label, "decoder": spec.decoder, "p": p, "trials": cfg.trials,
                         "opnorm": value, "split_proxy": proxy, "lb_fixed_cov": b.lb_fixed_cov})
    _write_rows(out, ["scheme", "decoder", "p", "trials", "opnorm", "split_proxy", "lb_fixed_cov"], rows)
    return hashes


def _adversarial_audit(cfg, base, out):
    rows, hashes = [], {}
    for spec in cfg.schemes:
        scheme = spec.build(base)
        hashes[spec.label] = scheme.hash
        gap = _gap(scheme)
        for s in cfg.budgets:
            if math.comb(scheme.m, s) <= EXHAUSTIVE_BUDGET:
                worst, err = adversarial_exhaustive(scheme, s, spec.decoder)
                method = "exhaustive"
            else:
                if scheme.graph is None:
                    raise ValueError(f"{spec.label}: budget {s} too large for exhaustive search on a non-graph scheme")
                worst = adversarial_greedy(scheme.graph, s, cfg.seed)
                err = decode(scheme, worst, spec.decoder).error
                method = "greedy"
            p_eq = s / scheme.m
            upper = bounds(scheme.d, p_eq, gap).adv_upper if 0 < p_eq < 1 else math.nan
            floor = (s // round(scheme.d)) / scheme.n_blocks if scheme.d else math.nan
            rows.append({"scheme": spec.label, "decoder": spec.decoder, "s": s, "method": method,
                         "worst_error": err, "worst_error_per_block": err / scheme.n_blocks,
                         "adv_upper": upper, "tightness_floor": floor,
                         "stragglers": " ".join(map(str, worst.members))})
    _write_rows(out, ["scheme", "decoder", "s", "method", "worst_error", "worst_error_per_block",
                      "adv_upper", "tightness_floor", "stragglers"], rows)
    return hashes


def gd_compare_schemes(cfg: ExperimentConfig, base: Path) -> dict[str, AssignmentScheme]:
    pr = cfg.problem
    graph = cfg.graph.build(base) if cfg.graph else gen_random_regular(pr.n_blocks, cfg.d, cfg.seed)
    return {
        "graph-optimal": graph_scheme(graph),
        "graph-fixed": graph_scheme(graph),
        "adjacency-optimal": adjacency_scheme(graph),
        "frc-optimal": frc_scheme(pr.n_blocks, cfg.m, cfg.d),
    }


def _gd_compare(cfg, base, out):
    pr = cfg.problem
    problem = gen_least_squares(pr.N, pr.k, pr.noise_sigma, pr.seed, pr.n_blocks)
    schemes = gd_compare_schemes(cfg, base)
    multiplier = cfg.uncoded_multiplier or cfg.d
    grid = cfg.grid.candidates()
    rows, hashes = [], {}
    for p in cfg.p:
        for alg in cfg.algorithms:
            if alg == "uncoded":
                def runner(gamma, seed):
                    return uncoded_baseline(problem, p, multiplier, cfg.iterations, gamma, seed, m=cfg.m)
            else:
                scheme = schemes[alg]
                hashes[alg] = scheme.hash
                decoder = "fixed" if alg.endswith("fixed") else "optimal"

                def runner(gamma, seed, scheme=scheme, decoder=decoder):
                    return gcod_run(problem, scheme, decoder, p, gamma, cfg.iterations, seed)
            best = grid_search_step(runner, grid, cfg.seeds)
            for seed in cfg.seeds:
                trace = runner(best.gamma, seed)
                for t, err in enumerate(trace.err_sq):
                    rows.append({"algorithm": alg, "p": p, "gamma": repr(best.gamma), "seed": seed, "iter": t,
                                 "err_sq": err, "stragglers": trace.stragglers[t], "alpha_err": trace.alpha_err[t]})
    _write_rows(out, ["algorithm", "p", "gamma", "seed", "iter", "err_sq", "stragglers", "alpha_err"], rows)
    return hashes


def _debias_demo(cfg, base, out):
    rows, hashes = [], {}
    for spec in cfg.schemes:
        scheme = spec.build(base)
        hashes[spec.label] = scheme.hash
        for p in cfg.p:
            row = debias_measure(scheme, spec.decoder, p, cfg.trials, cfg.seed, cfg.eps, cfg.mean_trials)
            rows.append({"scheme": spec.label, "decoder": spec.decoder, "p": p, "trials": cfg.trials, **row})
    _write_rows(out, ["scheme", "decoder", "p", "trials", "eps", "bound", "max_bias", "bias_stderr",
                      "error", "error_stderr", "load", "base_load"], rows)
    return hashes


def debias_measure(scheme, decoder, p, trials, seed, eps=None, mean_trials=None) -> dict:
    """Debias ``scheme`` from a measured ``E[alpha]`` and score it on fresh draws.

    ``E[alpha]`` is estimated from ``mean_trials`` draws (default ``trials``).
    ``eps`` defaults to the measured ``(1/n) E|alpha - 1|^2`` of the base scheme.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    mean_trials = mean_trials or trials
    base = sample_alphas(scheme, decoder, p, rng, mean_trials)
    mean = base.mean(axis=0)
    if eps is None:
        eps = float(np.mean(np.sum((base - 1.0) ** 2, axis=1)) / scheme.n_blocks)
    wrapped = debias(scheme, mean, eps)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    alive = ~(rng.random((trials, scheme.m)) < p)
    hats = np.empty((trials, wrapped.n_blocks))
    for t in range(trials):
        hats[t] = decode_inherited(wrapped, scheme, np.flatnonzero(~alive[t]), decoder, p).alpha
    bias = hats.mean(axis=0) - 1.0
    # the rescaling uses an estimated mean, so its noise adds to the evaluation noise
    src = np.asarray(wrapped.source_rows)
    mean_se = base.std(axis=0, ddof=1)[src] / math.sqrt(mean_trials) / mean[src]
    bias_se = np.sqrt(hats.var(axis=0, ddof=1) / trials + mean_se**2)
    i = int(np.argmax(np.abs(bias) / np.maximum(bias_se, 1e-300)))
    errs = np.sum((hats - 1.0) ** 2, axis=1) / wrapped.n_blocks
    bound = 2 * eps / (1 - math.sqrt(2 * eps)) ** 2
    return {"eps": eps, "bound": bound, "max_bias": float(abs(bias[i])), "bias_stderr": float(bias_se[i]),
            "error": float(errs.mean()), "error_stderr": float(errs.std(ddof=1) / math.sqrt(trials)),
            "load": wrapped.load, "base_load": scheme.load}


def _predict(cfg, base, out):
    pr = cfg.problem
    problem = gen_least_squares(pr.N, pr.k, pr.noise_sigma, pr.seed, pr.n_blocks)
    eps0 = float(np.sum(problem.theta_star**2))
    rows, hashes = [], {}
    for spec in cfg.schemes:
        scheme = spec.build(base)
        hashes[spec.label] = scheme.hash
        for p in cfg.p:
            est = mc_error(scheme, spec.decoder, p, cfg.trials, cfg.seed, cfg.threads)
            s_norm, _ = covariance_opnorm(scheme, spec.decoder, p, max(cfg.trials, 1000), cfg.seed, cfg.threads)
            for factor in cfg.eps_factors:
                params = ConvergenceParams(mu=problem.mu, L=problem.L, L_block=problem.L_block,
                                           sigma2=problem.sigma2, r=est.mean, s=s_norm, eps=factor * eps0,
                                           eps0=eps0, n_blocks=problem.n_blocks)
                gamma, k = predict_random(params)
                rows.append({"scheme": spec.label, "decoder": spec.decoder, "p": p, "r": est.mean, "s": s_norm,
                             "c": est.c, "eps": params.eps, "eps0": eps0, "gamma": gamma, "k": k})
    _write_rows(out, ["scheme", "decoder", "p", "r", "s", "c", "eps", "eps0", "gamma", "k"], rows)
    return hashes


_RUNNERS = {
    "error_sweep": _error_sweep,
    "covariance_sweep": _covariance_sweep,
    "adversarial_audit": _adversarial_audit,
    "gd_compare": _gd_compare,
    "debias_demo": _debias_demo,
    "predict": _predict,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(cfg: ExperimentConfig, base_dir=".", out: str | Path | None = None) -> Path:
    """Run one experiment; returns the CSV path (the sidecar is ``<csv>.json``)."""
    base = Path(base_dir)
    out = Path(out) if out is not None else base / cfg.out
    out.parent.mkdir(parents=True, exist_ok=True)
    hashes = _RUNNERS[cfg.kind](cfg, base, out)
    sidecar = {
        "kind": cfg.kind,
        "config": cfg.model_dump(mode="json"),
        "base_dir": str(base.resolve()),
        "version": __version__,
        "scheme_hashes": hashes,
        "csv_sha256": _sha256(out),
    }
    Path(f"{out}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return out


def replay(sidecar_path) -> tuple[bool, str]:
    """Re-run the experiment described by a sidecar and compare the CSV bytes."""
    meta = json.loads(Path(sidecar_path).read_text())
    cfg = ExperimentConfig.model_validate(meta["config"])
    with tempfile.TemporaryDirectory() as tmp:
        fresh = run_experiment(cfg, meta.get("base_dir", "."), Path(tmp) / "replay.csv")
        digest = _sha256(fresh)
    return digest == meta["csv_sha256"], digest
