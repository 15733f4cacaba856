"""Command-line entry point: ``gradcode <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .assignment import adjacency_scheme, frc_scheme, graph_scheme, load_scheme, save_scheme, uncoded_scheme
from .decoding import DECODERS, decode
from .graphs import gen_circulant, gen_named, gen_random_regular, load_edge_list, save_edge_list, spectral_profile
from .stragglers import StragglerSet

log = logging.getLogger("gradcode")

CONFIG_KIND = {
    "error-sweep": "error_sweep",
    "cov-sweep": "covariance_sweep",
    "adv-audit": "adversarial_audit",
    "gd-sim": "gd_compare",
    "debias": "debias_demo",
    "predict": "predict",
}


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, config_required=False) -> None:
    p.add_argument("--config", required=config_required, help="TOML config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output path")
    p.add_argument("--threads", type=int, help="worker threads (GRADCODE_THREADS takes precedence)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradcode", description="Gradient coding with graph assignment schemes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-graph", help="generate a graph and write its edge list")
    _common(p)
    p.add_argument("--family", choices=["random_regular", "circulant", "complete", "cycle"], default="random_regular")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int)
    p.add_argument("--offsets", help="comma-separated circulant offsets")

    p = sub.add_parser("scheme", help="build an assignment scheme and write it")
    _common(p)
    p.add_argument("--kind", choices=["graph", "adjacency", "frc", "uncoded"], required=True)
    p.add_argument("--graph", help="edge-list file (graph and adjacency kinds)")
    p.add_argument("--n-blocks", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--d", type=int)

    p = sub.add_parser("decode", help="decode one straggler pattern")
    _common(p)
    p.add_argument("--scheme", required=True, help="scheme file")
    p.add_argument("--stragglers", default="", help="comma-separated machine indices or a JSON array")
    p.add_argument("--decoder", choices=DECODERS, default="optimal")
    p.add_argument("--p", type=float, help="straggling probability (fixed decoder)")

    for name, help_text in [("error-sweep", "Monte Carlo decoding error over a p grid"),
                            ("cov-sweep", "covariance operator norm over a p grid"),
                            ("adv-audit", "worst-case straggler search"),
                            ("gd-sim", "simulated coded gradient descent comparison"),
                            ("debias", "debias biased schemes and measure the result"),
                            ("predict", "convergence predictor from measured error parameters")]:
        _common(sub.add_parser(name, help=help_text), config_required=True)

    p = sub.add_parser("gd-cluster-ps", aliases=["ps"], help="run the parameter server")
    _common(p, config_required=True)
    p.add_argument("--port", type=int, help="override the listen port")

    p = sub.add_parser("gd-cluster-worker", aliases=["worker"], help="run one worker")
    _common(p, config_required=True)
    p.add_argument("--id", type=int, required=True, dest="worker_id")
    p.add_argument("--port", type=int, help="override the server port")

    p = sub.add_parser("replay", help="re-run an experiment from its JSON sidecar and compare bytes")
    p.add_argument("sidecar")
    return parser


def _parse_stragglers(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    if text.startswith("["):
        return [int(x) for x in json.loads(text)]
    return [int(x) for x in text.split(",") if x.strip()]


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


def cmd_gen_graph(args) -> int:
    if args.family == "random_regular":
        if args.d is None:
            raise UsageError("--d is required for random_regular")
        g = gen_random_regular(args.n, args.d, args.seed or 0)
    elif args.family == "circulant":
        if not args.offsets:
            raise UsageError("--offsets is required for circulant")
        g = gen_circulant(args.n, [int(x) for x in args.offsets.split(",")])
    else:
        g = gen_named(args.family, args.n)
    if args.out:
        save_edge_list(g, args.out)
    prof = spectral_profile(g) if g.regular_degree() is not None else None
    summary = {"n": g.n, "m": g.m, "vertex_transitive": g.vertex_transitive}
    if prof is not None:
        summary.update(d=prof.d, lambda2=prof.lambda2, gap=prof.gap, lambda_min=prof.lambda_min)
    print(json.dumps(summary))
    return 0


def cmd_scheme(args) -> int:
    if args.kind in ("graph", "adjacency"):
        if not args.graph:
            raise UsageError(f"--graph is required for {args.kind}")
        g = load_edge_list(args.graph)
        scheme = graph_scheme(g) if args.kind == "graph" else adjacency_scheme(g)
    elif args.kind == "frc":
        if None in (args.n_blocks, args.m, args.d):
            raise UsageError("--n-blocks, --m and --d are required for frc")
        scheme = frc_scheme(args.n_blocks, args.m, args.d)
    else:
        if args.m is None:
            raise UsageError("--m is required for uncoded")
        scheme = uncoded_scheme(args.m)
    if args.out:
        save_scheme(scheme, args.out)
    print(json.dumps({"kind": scheme.kind, "n_blocks": scheme.n_blocks, "m": scheme.m, "d": scheme.d,
                      "load": scheme.load, "hash": scheme.hash}))
    return 0


def cmd_decode(args) -> int:
    scheme = load_scheme(args.scheme)
    s = StragglerSet(scheme.m, tuple(_parse_stragglers(args.stragglers)))
    dec = decode(scheme, s, args.decoder, args.p)
    _emit(dec.to_json(), args.out)
    return 0


def cmd_experiment(args) -> int:
    from .experiments import load_experiment_config, run_experiment

    expected = CONFIG_KIND[args.command]
    cfg = load_experiment_config(args.config, {"seed": args.seed, "threads": args.threads})
    if cfg.kind != expected:
        raise UsageError(f"{args.command} needs a config with kind = {expected!r}, got {cfg.kind!r}")
    out = run_experiment(cfg, Path(args.config).parent, args.out)
    print(out)
    return 0


def cmd_ps(args) -> int:
    from .cluster import ClusterAborted, ParameterServer, load_cluster_config

    cfg, base = load_cluster_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    ps = ParameterServer(cfg, base)
    port = ps.bind(args.port)
    log.info("parameter server listening on port %d", port)
    print(f"listening {port}", flush=True)
    try:
        result = ps.run()
    except ClusterAborted as exc:
        log.error("aborted: %s", exc)
        if exc.trace is not None and args.out:
            exc.trace.config["aborted"] = str(exc)
            exc.trace.write_csv(args.out)
        return 1
    if args.out:
        result.trace.write_csv(args.out)
    print(json.dumps({"iterations": len(result.trace) - 1, "final_err_sq": result.trace.err_sq[-1]}))
    return 0


def cmd_worker(args) -> int:
    from .cluster import load_cluster_config, run_worker

    cfg, base = load_cluster_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return run_worker(cfg, args.worker_id, base, port=args.port)


def cmd_replay(args) -> int:
    from .experiments import replay

    same, digest = replay(args.sidecar)
    print(("identical " if same else "MISMATCH ") + digest)
    return 0 if same else 1


HANDLERS = {
    "gen-graph": cmd_gen_graph,
    "scheme": cmd_scheme,
    "decode": cmd_decode,
    "gd-cluster-ps": cmd_ps,
    "ps": cmd_ps,
    "gd-cluster-worker": cmd_worker,
    "worker": cmd_worker,
    "replay": cmd_replay,
    **{name: cmd_experiment for name in CONFIG_KIND},
}


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", invalid="ignore")
    try:
        return HANDLERS[args.command](args)
    except ValidationError as exc:
        print(_format_validation(exc), file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
