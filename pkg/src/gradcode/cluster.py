"""Parameter server and workers exchanging gradients over TCP.

Messages are LF-terminated JSON objects.  Vectors travel as base64 of their
little-endian float64 bytes so they survive the round trip bit for bit.

    worker -> ps   {"type": "hello", "worker_id": j, "scheme_hash": h}
    ps -> worker   {"type": "setup", "perm": [...]}
    ps -> worker   {"type": "params", "iter": t, "theta_b64": ...}
    worker -> ps   {"type": "grad", "iter": t, "worker_id": j, "g_b64": ...}
    ps -> worker   {"type": "done"}
"""

from __future__ import annotations

import base64
import json
import logging
import math
import queue
import socket
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Union

import numpy as np
import tomli
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .assignment import AssignmentScheme, load_scheme
from .decoding import decode
from .descent import (
    GdTrace, _Recorder, block_gradient, block_permutation, column_gradient, combine, gen_least_squares,
)

log = logging.getLogger(__name__)

MESSAGE_FIELDS = {
    "hello": {"worker_id": int, "scheme_hash": str},
    "setup": {"perm": list},
    "params": {"iter": int, "theta_b64": str},
    "grad": {"iter": int, "worker_id": int, "g_b64": str},
    "done": {},
}


class ProtocolError(ValueError):
    pass


class ClusterAborted(RuntimeError):
    def __init__(self, message: str, trace: GdTrace | None = None):
        super().__init__(message)
        self.trace = trace


def encode_vector(v) -> str:
    return base64.b64encode(np.ascontiguousarray(v, dtype="<f8").tobytes()).decode("ascii")


def decode_vector(text: str) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    if len(raw) % 8:
        raise ProtocolError("vector payload is not a whole number of float64 values")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def encode_message(msg: dict) -> bytes:
    validate_message(msg)
    return (json.dumps(msg, separators=(",", ":")) + "\n").encode("ascii")


def decode_message(line: bytes | str) -> dict:
    if isinstance(line, bytes):
        line = line.decode("ascii", errors="replace")
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"bad JSON: {exc}") from None
    validate_message(msg)
    return msg


def validate_message(msg) -> None:
    if not isinstance(msg, dict) or msg.get("type") not in MESSAGE_FIELDS:
        raise ProtocolError(f"unknown message {msg!r:.80}")
    for name, typ in MESSAGE_FIELDS[msg["type"]].items():
        if not isinstance(msg.get(name), typ) or isinstance(msg.get(name), bool):
            raise ProtocolError(f"{msg['type']} message needs {typ.__name__} field {name!r}")


# --- configuration ---------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemRef(_Strict):
    N: int
    k: int
    noise_sigma: float
    seed: int
    n_blocks: int


class NoDelay(_Strict):
    kind: Literal["none"] = "none"


class FixedDelay(_Strict):
    kind: Literal["fixed"]
    ms: float


class LognormalDelay(_Strict):
    kind: Literal["lognormal"]
    mu: float
    sigma: float


class PinDelay(_Strict):
    kind: Literal["pin"]
    workers: list[int]
    ms: float


DelayModel = Union[NoDelay, FixedDelay, LognormalDelay, PinDelay]


class ClusterConfig(_Strict):
    listen: str = "127.0.0.1:5555"
    workers: int
    scheme: str
    problem: ProblemRef
    p: float = Field(ge=0, lt=1)
    delay: DelayModel = Field(default_factory=NoDelay, discriminator="kind")
    iterations: int = Field(gt=0)
    gamma: float = Field(gt=0)
    decoder: str = "optimal"
    seed: int = 0
    handshake_timeout: float = 30.0
    deadline: float = 60.0

    @model_validator(mode="after")
    def _check(self):
        host, _, port = self.listen.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"listen must be 'host:port', got {self.listen!r}")
        return self

    @property
    def address(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host, int(port)

    @property
    def quorum(self) -> int:
        """Number of responses the server waits for: ceil(m (1 - p))."""
        return max(1, math.ceil(self.workers * (1 - self.p) - 1e-9))

    def load_scheme(self, base_dir=".") -> AssignmentScheme:
        path = Path(self.scheme)
        if not path.is_absolute():
            path = Path(base_dir) / path
        scheme = load_scheme(path)
        if scheme.m != self.workers:
            raise ValueError(f"scheme has {scheme.m} columns but config declares {self.workers} workers")
        return scheme

    def load_problem(self):
        pr = self.problem
        return gen_least_squares(pr.N, pr.k, pr.noise_sigma, pr.seed, pr.n_blocks)

    def delay_seconds(self, worker_id: int, rng: np.random.Generator) -> float:
        d = self.delay
        if isinstance(d, FixedDelay):
            return d.ms / 1000
        if isinstance(d, LognormalDelay):
            return float(np.exp(rng.normal(d.mu, d.sigma))) / 1000
        if isinstance(d, PinDelay):
            return d.ms / 1000 if worker_id in d.workers else 0.0
        return 0.0


def load_cluster_config(path) -> tuple[ClusterConfig, Path]:
    path = Path(path)
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    return ClusterConfig.model_validate(data), path.parent


# --- parameter server --------------------------------------------------------


class _Conn:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.reader = sock.makefile("rb")
        self.lock = threading.Lock()

    def send(self, msg: dict) -> None:
        data = encode_message(msg)
        with self.lock:
            self.sock.sendall(data)

    def recv(self) -> dict | None:
        line = self.reader.readline()
        if not line:
            return None
        return decode_message(line)

    def close(self) -> None:
        # shutdown first: it wakes a reader blocked in readline, which holds the buffer lock
        for closer in (lambda: self.sock.shutdown(socket.SHUT_RDWR), self.reader.close, self.sock.close):
            try:
                closer()
            except OSError:
                pass


@dataclass
class ClusterResult:
    theta: np.ndarray
    trace: GdTrace


class ParameterServer:
    def __init__(self, config: ClusterConfig, base_dir=".", scheme=None, problem=None):
        self.config = config
        self.scheme = scheme if scheme is not None else config.load_scheme(base_dir)
        self.problem = problem if problem is not None else config.load_problem()
        if self.scheme.n_blocks != self.problem.n_blocks:
            raise ValueError("scheme and problem disagree on the number of blocks")
        self.perm = block_permutation(self.problem.n_blocks, config.seed)
        self._listener: socket.socket | None = None

    def bind(self, port: int | None = None) -> int:
        host, cfg_port = self.config.address
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, cfg_port if port is None else port))
        sock.listen(self.config.workers)
        self._listener = sock
        return sock.getsockname()[1]

    def _handshake(self) -> dict[int, _Conn]:
        cfg = self.config
        conns: dict[int, _Conn] = {}
        deadline = time.monotonic() + cfg.handshake_timeout
        try:
            while len(conns) < cfg.workers:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ClusterAborted(f"only {len(conns)} of {cfg.workers} workers registered in time")
                self._listener.settimeout(remaining)
                try:
                    sock, _ = self._listener.accept()
                except socket.timeout:
                    continue
                sock.settimeout(None)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conn = _Conn(sock)
                hello = conn.recv()
                if hello is None or hello["type"] != "hello":
                    conn.close()
                    raise ClusterAborted("expected a hello message")
                wid = hello["worker_id"]
                if not 0 <= wid < cfg.workers or wid in conns:
                    conn.close()
                    raise ClusterAborted(f"bad or duplicate worker id {wid}")
                if hello["scheme_hash"] != self.scheme.hash:
                    conn.close()
                    raise ClusterAborted(f"worker {wid} runs a different scheme")
                conn.send({"type": "setup", "perm": [int(x) for x in self.perm]})
                conns[wid] = conn
        except BaseException:
            for c in conns.values():
                c.close()
            raise
        finally:
            self._listener.close()
        return conns

    def run(self) -> ClusterResult:
        if self._listener is None:
            self.bind()
        cfg, scheme, problem = self.config, self.scheme, self.problem
        conns = self._handshake()
        inbox: queue.Queue = queue.Queue()
        finished = threading.Event()

        def reader(wid: int, conn: _Conn):
            while True:
                try:
                    msg = conn.recv()
                except (OSError, ValueError) as exc:
                    if not finished.is_set():
                        log.error("worker %d: %s", wid, exc)
                    msg = None
                inbox.put((wid, msg))
                if msg is None:
                    return

        for wid, conn in conns.items():
            threading.Thread(target=reader, args=(wid, conn), daemon=True).start()

        theta = np.zeros(problem.k)
        config_echo = {"mode": "cluster", "scheme_hash": scheme.hash, "decoder": cfg.decoder, "p": cfg.p,
                       "seed": cfg.seed, "gamma": cfg.gamma, "iterations": cfg.iterations,
                       "quorum": cfg.quorum, "perm": self.perm.tolist(), "delay": cfg.delay.model_dump()}
        rec = _Recorder(problem, theta, True, config_echo)
        try:
            for t in range(cfg.iterations):
                for conn in conns.values():
                    conn.send({"type": "params", "iter": t, "theta_b64": encode_vector(theta)})
                grads = self._collect(inbox, t, rec.trace)
                members = tuple(j for j in range(scheme.m) if j not in grads)
                dec = decode(scheme, members, cfg.decoder, cfg.p)
                theta = theta - cfg.gamma * combine(dec.w, grads, problem.k)
                if not rec.record(theta, cfg.gamma, len(members), dec.error, members):
                    break
            finished.set()
            for conn in conns.values():
                try:
                    conn.send({"type": "done"})
                except OSError:
                    pass
        finally:
            finished.set()
            for conn in conns.values():
                conn.close()
        return ClusterResult(theta, rec.trace)

    def _collect(self, inbox: queue.Queue, t: int, trace: GdTrace) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {}
        deadline = time.monotonic() + self.config.deadline
        while len(grads) < self.config.quorum:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ClusterAborted(f"iteration {t}: {len(grads)} of {self.config.quorum} gradients by deadline", trace)
            try:
                wid, msg = inbox.get(timeout=remaining)
            except queue.Empty:
                continue
            if msg is None:
                raise ClusterAborted(f"worker {wid} disconnected during iteration {t}", trace)
            if msg["type"] != "grad" or msg["iter"] != t or msg["worker_id"] != wid:
                # late gradients from earlier iterations are dropped
                continue
            grads.setdefault(wid, decode_vector(msg["g_b64"]))
        return grads


def serve_ps(config: ClusterConfig, base_dir=".") -> ClusterResult:
    ps = ParameterServer(config, base_dir)
    ps.bind()
    return ps.run()


# --- worker -----------------------------------------------------------------


def _connect(address, timeout: float) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection(address, timeout=max(0.1, deadline - time.monotonic()))
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.05)


def run_worker(config: ClusterConfig, worker_id: int, base_dir=".", port: int | None = None,
               scheme=None, problem=None) -> int:
    """Serve gradient requests until the server says done; returns an exit status."""
    scheme = scheme if scheme is not None else config.load_scheme(base_dir)
    if not 0 <= worker_id < scheme.m or not scheme.columns[worker_id]:
        log.error("worker %d has no column in the scheme", worker_id)
        return 2
    column = scheme.columns[worker_id]
    host, cfg_port = config.address
    try:
        conn = _Conn(_connect((host, cfg_port if port is None else port), config.handshake_timeout))
    except OSError as exc:
        log.error("worker %d: cannot connect: %s", worker_id, exc)
        return 1
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3, worker_id]))
    try:
        conn.send({"type": "hello", "worker_id": worker_id, "scheme_hash": scheme.hash})
        setup = conn.recv()
        if setup is None or setup["type"] != "setup":
            log.error("worker %d: expected setup, got %r", worker_id, setup)
            return 1
        perm = np.asarray(setup["perm"], dtype=int)
        problem = problem if problem is not None else config.load_problem()
        blocks = sorted({int(perm[i]) for i, _ in column})

        inbox: queue.Queue = queue.Queue()

        def reader():
            while True:
                try:
                    msg = conn.recv()
                except (OSError, ValueError) as exc:
                    log.error("worker %d: %s", worker_id, exc)
                    msg = None
                inbox.put(msg)
                if msg is None or msg["type"] == "done":
                    return

        threading.Thread(target=reader, daemon=True).start()
        while True:
            msg = inbox.get()
            # skip to the newest request; older ones are already stale
            while msg is not None and msg["type"] == "params" and not inbox.empty():
                msg = inbox.get()
            if msg is None:
                log.error("worker %d: connection lost", worker_id)
                return 1
            if msg["type"] == "done":
                return 0
            if msg["type"] != "params":
                log.error("worker %d: unexpected %s message", worker_id, msg["type"])
                return 1
            theta = decode_vector(msg["theta_b64"])
            pause = config.delay_seconds(worker_id, rng)
            if pause > 0:
                time.sleep(pause)
            bg = {b: block_gradient(problem, b, theta) for b in blocks}
            g = column_gradient(column, perm, bg)
            try:
                conn.send({"type": "grad", "iter": msg["iter"], "worker_id": worker_id, "g_b64": encode_vector(g)})
            except OSError:
                # the server may have finished while we were computing
                nxt = inbox.get()
                while nxt is not None and nxt["type"] == "params":
                    nxt = inbox.get()
                return 0 if nxt is not None and nxt["type"] == "done" else 1
    finally:
        conn.close()
