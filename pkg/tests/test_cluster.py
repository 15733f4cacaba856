import os
import queue
import signal
import subprocess
import sys
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from pydantic import ValidationError

from gradcode.assignment import graph_scheme, save_scheme
from gradcode.cluster import (
    ClusterAborted,
    ClusterConfig,
    ParameterServer,
    ProtocolError,
    decode_message,
    decode_vector,
    encode_message,
    encode_vector,
    load_cluster_config,
    run_worker,
)
from gradcode.descent import gcod_run, gen_least_squares
from gradcode.graphs import gen_named, gen_random_regular

PROBLEM = {"N": 60, "k": 4, "noise_sigma": 1.0, "seed": 2, "n_blocks": 6}


def make_config(scheme_path, **kw):
    base = {"listen": "127.0.0.1:0", "workers": 9, "scheme": str(scheme_path), "problem": PROBLEM,
            "p": 0.0, "iterations": 15, "gamma": 0.02, "seed": 4, "handshake_timeout": 20, "deadline": 20}
    base.update(kw)
    return ClusterConfig.model_validate(base)


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    d = tmp_path_factory.mktemp("cluster")
    scheme = graph_scheme(gen_random_regular(6, 3, 0))
    path = d / "scheme.txt"
    save_scheme(scheme, path)
    return d, path, scheme, gen_least_squares(**PROBLEM)


def run_in_process(cfg, scheme, problem):
    ps = ParameterServer(cfg, scheme=scheme, problem=problem)
    port = ps.bind()
    codes = {}

    def worker(j):
        codes[j] = run_worker(cfg, j, port=port, scheme=scheme, problem=problem)

    threads = [threading.Thread(target=worker, args=(j,)) for j in range(cfg.workers)]
    for th in threads:
        th.start()
    result = ps.run()
    for th in threads:
        th.join(30)
    return result, codes


# wire format


@given(arrays(np.float64, st.integers(0, 64), elements=st.floats(allow_nan=True, allow_infinity=True)))
@settings(max_examples=200, deadline=None)
def test_vector_round_trip_is_bit_exact(v):
    msg = {"type": "grad", "iter": 3, "worker_id": 1, "g_b64": encode_vector(v)}
    back = decode_vector(decode_message(encode_message(msg))["g_b64"])
    assert back.tobytes() == v.astype("<f8").tobytes()


def test_messages_are_single_lines():
    line = encode_message({"type": "params", "iter": 0, "theta_b64": encode_vector(np.ones(3))})
    assert line.endswith(b"\n") and line.count(b"\n") == 1


@pytest.mark.parametrize("bad", [
    b"not json\n",
    b'{"type": "nope"}\n',
    b'{"type": "grad", "iter": 1, "worker_id": 0}\n',
    b'{"type": "grad", "iter": true, "worker_id": 0, "g_b64": ""}\n',
    b'{"type": "params", "iter": "1", "theta_b64": ""}\n',
    b'{"type": "hello", "worker_id": 1.5, "scheme_hash": "x"}\n',
    b"[1, 2]\n",
])
def test_malformed_messages_rejected(bad):
    with pytest.raises(ProtocolError):
        decode_message(bad)


def test_malformed_vectors_rejected():
    with pytest.raises(ProtocolError):
        decode_vector("AAAA")
    with pytest.raises(ValueError):
        decode_vector("***")


def test_encode_validates():
    with pytest.raises(ProtocolError):
        encode_message({"type": "grad", "iter": 0})


# configuration


def test_config_rejects_unknown_keys(setup):
    _, path, _, _ = setup
    with pytest.raises(ValidationError):
        make_config(path, colour="red")
    with pytest.raises(ValidationError):
        make_config(path, delay={"kind": "fixed", "ms": 5, "extra": 1})


def test_config_rejects_bad_values(setup):
    _, path, _, _ = setup
    with pytest.raises(ValidationError):
        make_config(path, p=1.0)
    with pytest.raises(ValidationError):
        make_config(path, listen="nowhere")
    with pytest.raises(ValidationError):
        make_config(path, iterations=0)


def test_config_worker_count_must_match_scheme(setup):
    _, path, _, _ = setup
    with pytest.raises(ValueError, match="9 columns"):
        make_config(path, workers=8).load_scheme()


def test_quorum():
    cfg = dict(workers=10, scheme="x", problem=PROBLEM, iterations=1, gamma=1.0)
    assert ClusterConfig(p=0.2, **cfg).quorum == 8
    assert ClusterConfig(p=0.25, **cfg).quorum == 8
    assert ClusterConfig(p=0.0, **cfg).quorum == 10
    assert ClusterConfig(p=0.99, **cfg).quorum == 1


def test_delay_models(setup):
    _, path, _, _ = setup
    rng = np.random.default_rng(0)
    assert make_config(path).delay_seconds(0, rng) == 0
    assert make_config(path, delay={"kind": "fixed", "ms": 250}).delay_seconds(3, rng) == 0.25
    pin = make_config(path, delay={"kind": "pin", "workers": [1], "ms": 100})
    assert pin.delay_seconds(1, rng) == 0.1 and pin.delay_seconds(2, rng) == 0
    assert make_config(path, delay={"kind": "lognormal", "mu": 0, "sigma": 1}).delay_seconds(0, rng) > 0


def test_load_config_toml(tmp_path):
    (tmp_path / "c.toml").write_text(
        'workers = 3\nscheme = "s.txt"\np = 0.3\niterations = 5\ngamma = 0.1\n'
        '[problem]\nN = 30\nk = 2\nnoise_sigma = 1.0\nseed = 0\nn_blocks = 3\n'
        '[delay]\nkind = "pin"\nworkers = [0]\nms = 10\n')
    cfg, base = load_cluster_config(tmp_path / "c.toml")
    assert base == tmp_path and cfg.quorum == 3 and cfg.delay.kind == "pin"


# end to end


def test_no_stragglers_matches_simulation(setup):
    _, path, scheme, problem = setup
    cfg = make_config(path)
    result, codes = run_in_process(cfg, scheme, problem)
    sim = gcod_run(problem, scheme, "optimal", 0.0, cfg.gamma, cfg.iterations, cfg.seed, keep_iterates=True)
    assert all(c == 0 for c in codes.values())
    assert len(result.trace) == cfg.iterations + 1
    assert all(s == () for s in result.trace.straggler_sets)
    for got, want in zip(result.trace.iterates, sim.iterates):
        assert np.max(np.abs(got - want)) <= 1e-12 * max(1.0, np.max(np.abs(want)))


def test_random_arrivals_match_replayed_schedule(setup):
    _, path, scheme, problem = setup
    cfg = make_config(path, p=0.3, delay={"kind": "lognormal", "mu": 0.0, "sigma": 1.0})
    result, codes = run_in_process(cfg, scheme, problem)
    assert all(c == 0 for c in codes.values())
    # at most quorum gradients are used per iteration
    assert all(n == cfg.workers - cfg.quorum for n in result.trace.stragglers[1:])
    sim = gcod_run(problem, scheme, "optimal", cfg.p, cfg.gamma, cfg.iterations, cfg.seed,
                   straggler_schedule=result.trace.straggler_sets, keep_iterates=True)
    for got, want in zip(result.trace.iterates, sim.iterates):
        assert np.max(np.abs(got - want)) <= 1e-12 * max(1.0, np.max(np.abs(want)))


def test_pinned_slow_workers_straggle(tmp_path):
    scheme = graph_scheme(gen_named("complete", 3))
    path = tmp_path / "tri.txt"
    save_scheme(scheme, path)
    problem = gen_least_squares(30, 3, 1.0, 0, 3)
    cfg = ClusterConfig.model_validate({
        "listen": "127.0.0.1:0", "workers": 3, "scheme": str(path), "seed": 1, "p": 1 / 3,
        "problem": {"N": 30, "k": 3, "noise_sigma": 1.0, "seed": 0, "n_blocks": 3},
        "delay": {"kind": "pin", "workers": [0], "ms": 300}, "iterations": 8, "gamma": 0.05})
    result, codes = run_in_process(cfg, scheme, problem)
    assert result.trace.straggler_sets == [(0,)] * 8
    sim = gcod_run(problem, scheme, "optimal", cfg.p, cfg.gamma, 8, 1, straggler_schedule=[(0,)] * 8,
                   keep_iterates=True)
    assert np.array_equal(result.theta, sim.iterates[-1])
    assert result.trace.err_sq == sim.err_sq
    assert all(c == 0 for c in codes.values())


def test_stale_gradients_are_discarded(setup):
    _, path, scheme, problem = setup
    cfg = make_config(path, p=0.5, deadline=5)
    ps = ParameterServer(cfg, scheme=scheme, problem=problem)
    inbox = queue.Queue()
    old = {"type": "grad", "iter": 2, "worker_id": 0, "g_b64": encode_vector(np.full(4, 99.0))}
    inbox.put((0, old))
    inbox.put((1, {"type": "grad", "iter": 3, "worker_id": 2, "g_b64": encode_vector(np.ones(4))}))
    for j in range(cfg.quorum):
        inbox.put((j, {"type": "grad", "iter": 3, "worker_id": j, "g_b64": encode_vector(np.full(4, float(j)))}))
    grads = ps._collect(inbox, 3, None)
    assert sorted(grads) == list(range(cfg.quorum))
    assert np.array_equal(grads[0], np.zeros(4))


def test_collect_deadline_aborts(setup):
    _, path, scheme, problem = setup
    cfg = make_config(path, deadline=0.2)
    ps = ParameterServer(cfg, scheme=scheme, problem=problem)
    with pytest.raises(ClusterAborted, match="deadline"):
        ps._collect(queue.Queue(), 0, None)


def test_wrong_scheme_rejected_at_handshake(setup):
    _, path, scheme, problem = setup
    cfg = make_config(path, handshake_timeout=5)
    ps = ParameterServer(cfg, scheme=scheme, problem=problem)
    port = ps.bind()
    other = graph_scheme(gen_random_regular(6, 3, 1))
    th = threading.Thread(target=run_worker, args=(cfg, 0), kwargs={"port": port, "scheme": other, "problem": problem})
    th.start()
    with pytest.raises(ClusterAborted, match="different scheme"):
        ps.run()
    th.join(10)


def test_killed_worker_aborts_with_partial_trace(setup):
    d, path, scheme, problem = setup
    cfg_path = d / "kill.toml"
    cfg_path.write_text(
        f'listen = "127.0.0.1:0"\nworkers = 9\nscheme = "{path.name}"\np = 0.2\niterations = 500\n'
        'gamma = 0.02\nseed = 4\nhandshake_timeout = 60\ndeadline = 60\n'
        '[problem]\nN = 60\nk = 4\nnoise_sigma = 1.0\nseed = 2\nn_blocks = 6\n'
        '[delay]\nkind = "fixed"\nms = 20\n')
    cfg, base = load_cluster_config(cfg_path)
    ps = ParameterServer(cfg, base)
    port = ps.bind()
    outcome = {}

    def serve():
        try:
            outcome["result"] = ps.run()
        except ClusterAborted as exc:
            outcome["abort"] = exc

    th = threading.Thread(target=serve)
    th.start()
    env = dict(os.environ)
    procs = [subprocess.Popen([sys.executable, "-m", "gradcode.cli", "worker", "--config", str(cfg_path),
                               "--id", str(j), "--port", str(port)], env=env,
                              stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL) for j in range(9)]
    try:
        time.sleep(3.0)
        procs[4].send_signal(signal.SIGKILL)
        th.join(60)
        # survivors notice the closed connection and exit with an error
        codes = [pr.wait(timeout=20) for pr in procs]
    finally:
        for pr in procs:
            if pr.poll() is None:
                pr.kill()
            pr.wait()
    assert "abort" in outcome, "server finished instead of aborting"
    exc = outcome["abort"]
    assert "worker 4 disconnected" in str(exc)
    assert exc.trace is not None and 1 < len(exc.trace) < cfg.iterations + 1
    assert codes[4] == -signal.SIGKILL
    assert all(c == 1 for j, c in enumerate(codes) if j != 4)
