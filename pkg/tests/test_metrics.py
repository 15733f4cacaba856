import math

import numpy as np
import pytest

from gradcode.assignment import adjacency_scheme, frc_scheme, graph_scheme, uncoded_scheme
from gradcode.graphs import gen_circulant, gen_random_regular
from gradcode.metrics import (
    CHUNK, CSV_COLUMNS, bounds, covariance_opnorm, error_row, mc_error, mean_alpha, normalization_constant,
    operator_norm, sample_alphas, write_error_csv,
)

RR16 = graph_scheme(gen_random_regular(16, 3, 7))
CIRC16 = graph_scheme(gen_circulant(16, [1, 8]))


def test_bounds_examples():
    b = bounds(3, 0.1, 1.0)
    assert b.lb_universal == pytest.approx(0.001 / 0.999)
    assert bounds(3, 0.2, 1.0).lb_fixed == pytest.approx(0.2 / 2.4)
    lam = 3 - 2 * math.sqrt(2)
    assert bounds(3, 0.2, lam).adv_upper == pytest.approx((6 - lam) / 6 * 0.25)
    assert bounds(3, 0.2, lam).adv_upper == pytest.approx(0.2428, abs=1e-4)
    assert bounds(3, 0.2, 1.0).lb_fixed_cov == pytest.approx(2 * 0.2 / 2.4)
    for p in (0.01, 0.5, 0.99):
        assert min(vars(bounds(4, p, 5.0)).values()) >= 0
    with pytest.raises(ValueError):
        bounds(3, 0.0, 1.0)
    with pytest.raises(ValueError):
        bounds(3, 1.0, 1.0)


def test_zero_straggling_gives_zero_error():
    est = mc_error(RR16, "optimal", 0.0, 500, 3)
    assert est.mean == 0.0 and est.raw_mean == 0.0 and est.c == 1.0
    assert np.array_equal(mean_alpha(RR16, "optimal", 0.0, 200, 0), np.ones(16))
    value, _ = covariance_opnorm(RR16, "optimal", 0.0, 1000, 0)
    assert value == 0.0


def test_minimum_trials():
    with pytest.raises(ValueError):
        mc_error(RR16, "optimal", 0.2, 99, 0)
    with pytest.raises(ValueError):
        covariance_opnorm(RR16, "optimal", 0.2, 999, 0)
    with pytest.raises(ValueError):
        mean_alpha(RR16, "optimal", 0.2, 10, 0)


def test_degenerate_normalization():
    with pytest.raises(ValueError, match="degenerate"):
        normalization_constant(uncoded_scheme(4), "ignore", 1 - 1e-12, 100, 0)


def test_frc_closed_form_raw_and_normalized():
    f = frc_scheme(16, 24, 3)
    est = mc_error(f, "optimal", 0.2, 100_000, 11)
    assert abs(est.raw_mean - 0.008) <= 3 * est.raw_stderr
    assert abs(est.mean - 0.008 / 0.992) <= 3 * est.stderr


@pytest.mark.parametrize("scheme", [RR16, CIRC16, frc_scheme(16, 24, 3)])
def test_fixed_decoder_trace_identity(scheme):
    p = 0.2
    est = mc_error(scheme, "fixed", p, 50_000, 5)
    a = scheme.matrix
    d = scheme.d
    exact = p * (1 - p) * np.sum(a * a) / (scheme.n_blocks * d**2 * (1 - p) ** 2)
    assert exact == pytest.approx(p / (d * (1 - p)))
    assert abs(est.raw_mean - exact) <= 3 * est.raw_stderr


@pytest.mark.parametrize("p", [0.1, 0.25])
def test_lower_bounds_hold(p):
    for scheme, decoder in [(RR16, "fixed"), (CIRC16, "fixed"), (CIRC16, "optimal"), (frc_scheme(16, 24, 3), "optimal")]:
        est = mc_error(scheme, decoder, p, 20_000, 2)
        b = bounds(scheme.d, p, 1.0)
        assert est.mean >= b.lb_universal - 3 * est.stderr
        if decoder == "fixed":
            assert est.mean >= b.lb_fixed - 3 * est.stderr


def test_determinism_and_thread_independence():
    a = mc_error(RR16, "optimal", 0.2, 5 * CHUNK + 17, 9, threads=1)
    b = mc_error(RR16, "optimal", 0.2, 5 * CHUNK + 17, 9, threads=4)
    assert a == b
    assert mc_error(RR16, "optimal", 0.2, 1000, 10) != a


def test_env_threads_override(monkeypatch):
    from gradcode.metrics import resolve_threads
    monkeypatch.setenv("GRADCODE_THREADS", "3")
    assert resolve_threads(1) == 3
    monkeypatch.delenv("GRADCODE_THREADS")
    assert resolve_threads(None) == 1 and resolve_threads(2) == 2


def test_vertex_transitive_mean_is_flat():
    mean, se = mean_alpha(CIRC16, "optimal", 0.2, 50_000, 4, return_stderr=True)
    assert np.all(np.abs(mean - mean.mean()) <= 4 * se)


def test_vectorized_samplers_match_decoders():
    from gradcode.decoding import decode
    rng = np.random.default_rng(0)
    for scheme, decoder in [(RR16, "fixed"), (RR16, "ignore"), (frc_scheme(16, 24, 3), "optimal"), (RR16, "optimal"),
                            (adjacency_scheme(gen_random_regular(12, 3, 1)), "optimal")]:
        draws = sample_alphas(scheme, decoder, 0.3, np.random.default_rng(1), 50)
        alive = ~(np.random.default_rng(1).random((50, scheme.m)) < 0.3)
        for t in range(50):
            ref = decode(scheme, np.flatnonzero(~alive[t]), decoder, 0.3).alpha
            assert np.allclose(draws[t], ref, rtol=0, atol=1e-12)


def test_operator_norm():
    rng = np.random.default_rng(0)
    b = rng.standard_normal((30, 30))
    m = b @ b.T
    assert operator_norm(m) == pytest.approx(np.linalg.eigvalsh(m)[-1], rel=1e-7)
    assert operator_norm(np.zeros((4, 4))) == 0.0


def test_covariance_fixed_decoder_matches_analytic():
    p = 0.2
    for scheme in (RR16, CIRC16):
        value, _ = covariance_opnorm(scheme, "fixed", p, 100_000, 8)
        a = scheme.matrix
        ref = np.linalg.eigvalsh(p * (1 - p) * a @ a.T / (scheme.d**2 * (1 - p) ** 2))[-1]
        assert abs(value / ref - 1) <= 0.10


def test_covariance_streaming_matches_dense_recompute():
    f = frc_scheme(16, 24, 3)
    p, trials, seed = 0.3, 3000, 4
    value, proxy = covariance_opnorm(f, "optimal", p, trials, seed)
    c = normalization_constant(f, "optimal", p, trials, seed)
    total = np.zeros((16, 16))
    for k, start in enumerate(range(0, trials, CHUNK)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, k]))
        dev = sample_alphas(f, "optimal", p, rng, min(CHUNK, trials - start)) / c - 1.0
        total += dev.T @ dev
    assert value == pytest.approx(np.linalg.eigvalsh(total / trials)[-1], rel=1e-7)
    assert proxy >= 0


@pytest.mark.xfail(reason="plug-in operator norm takes a max over groups and the split proxy is one noisy draw",
                   strict=False)
def test_covariance_frc_identity_within_split_discrepancy():
    f = frc_scheme(16, 24, 3)
    value, proxy = covariance_opnorm(f, "optimal", 0.2, 100_000, 1)
    est = mc_error(f, "optimal", 0.2, 100_000, 1)
    assert abs(value - f.load * est.mean) <= 3 * proxy


def test_error_csv(tmp_path):
    est = mc_error(RR16, "optimal", 0.2, 200, 0)
    row = error_row("rr16", "optimal", 0.2, est, bounds(3, 0.2, 0.6))
    path = tmp_path / "e.csv"
    write_error_csv([row], path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == CSV_COLUMNS
    assert float(lines[1].split(",")[4]) == est.mean
