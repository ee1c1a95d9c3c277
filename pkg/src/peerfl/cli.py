"""Command-line driver: ``peerfl {list,generate,run,inspect-model,aggregate}``.

Exit status: 0 success, 2 usage error, 3 I/O or file-format error,
4 acceptance invariant failed in a run report.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import scenario as sc
from ._backend import BACKEND
from .federation import AGGREGATORS, MessageFormatError, load_model, save_model
from .neuralnet import ARCHITECTURES
from .sensing import TraceFormatError, save_trace

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INVARIANT = 4


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _resolve_scenario(args) -> sc.Scenario:
    if args.config and args.scenario:
        raise UsageError("give either --scenario or --config, not both")
    if args.config:
        try:
            base = sc.load_scenario(args.config)
        except (ValueError, TypeError, KeyError, yaml.YAMLError) as exc:
            raise UsageError(f"invalid scenario file {args.config}: {exc}") from exc
    else:
        name = args.scenario or "three-neighbor"
        if name not in sc.BUILTINS:
            raise UsageError(f"unknown scenario {name!r}; choose from {', '.join(sorted(sc.BUILTINS))}")
        base = sc.BUILTINS[name]()
    seeds = base.seeds
    if args.seed is not None:
        # the validation trace always uses a different seed from training
        seeds = replace(seeds, traffic=args.seed, validation=args.seed + 1)
    overrides = dict(
        seeds=seeds,
        noise_std=args.noise_std,
        epochs=getattr(args, "epochs", None),
        aggregation=getattr(args, "aggregation", None),
    )
    try:
        if args.config and args.arch is None and args.profile is None:
            # a scenario file is taken as written unless a preset is requested
            return replace(base, **{k: v for k, v in overrides.items() if v is not None})
        return sc.configure(base, args.arch or "t_s", args.profile or "desk", **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-test"
    probe.write_bytes(b"")
    probe.unlink()
    return out


def _manifest(scenario: sc.Scenario, command: str, files: dict[str, Path], **extra) -> dict:
    return {
        "command": command,
        "scenario": scenario.to_dict(),
        "seeds": scenario.to_dict()["seeds"],
        "files": {name: {"path": p.name, "sha256": _sha256(p)} for name, p in sorted(files.items())},
        **extra,
    }


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_list(args) -> int:
    for name, s in sc.builtin_scenarios().items():
        print(f"{name}: {len(s.nodes)} nodes, primary {s.primary}, edges {s.edges}")
    return EXIT_OK


def cmd_generate(args) -> int:
    scenario = _resolve_scenario(args)
    out = _prepare_out(args.out)
    train, val = sc.generate_traces(scenario)
    files = {}
    for split, traces in (("train", train), ("val", val)):
        for k, tr in sorted(traces.items()):
            path = out / f"node{k}.{split}.trace"
            save_trace(tr, path)
            files[f"node{k}.{split}"] = path
    manifest = _manifest(scenario, "generate", files,
                         slots={"train": len(train[scenario.primary]), "val": len(val[scenario.primary])})
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(files)} traces of {manifest['slots']['train']} / {manifest['slots']['val']} slots to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    scenario = _resolve_scenario(args)
    out = _prepare_out(args.out)
    report, art = sc.run(scenario, workers=args.workers, return_artifacts=True)
    files = {"report": out / "report.json", "metrics": out / "metrics.csv", "summary": out / "summary.csv"}
    report.write_json(files["report"])
    report.write_metrics_csv(files["metrics"])
    report.write_summary_csv(files["summary"])
    models = out / "models"
    models.mkdir(exist_ok=True)
    channel_of = {n.node_id: n.channel for n in scenario.nodes}
    for kind, params in (("local", art.local), ("global", art.global_models)):
        for k, p in sorted(params.items()):
            path = models / f"node{k}.{kind}.pflm"
            save_model(path, k, channel_of[k], p)
            files[f"node{k}.{kind}"] = path
    _write_json(out / "manifest.json", _manifest(scenario, "run", files, backend=BACKEND))

    for k, node in sorted(report.nodes.items()):
        if node.diverged:
            print(f"node {k}: diverged ({node.error})")
        else:
            print(f"node {k}: local {node.local_acc:.4f}  global {node.global_acc:.4f}  "
                  f"persistence {node.baseline_acc:.4f}")
    if report.eta1 is not None and report.eta2 is not None:
        print(f"primary {report.primary}: eta1 {report.eta1:.4f}  eta2 {report.eta2:.4f}")
    if report.family == "hidden-terminal" and not report.nodes[report.primary].diverged:
        print(f"hidden-terminal margin: {sc.hidden_terminal_margin(report):+.4f}")
    for note in report.notes:
        print(f"note: {note}")
    failures = report.invariant_failures()
    for f in failures:
        print(f"FAILED: {f}", file=sys.stderr)
    return EXIT_INVARIANT if failures else EXIT_OK


def cmd_inspect_model(args) -> int:
    msg = load_model(args.path)
    v = msg.params.values
    arch = msg.arch
    print(f"node: {msg.node_id}  channel: {msg.channel_id}  version: {msg.version}")
    print(f"arch: m={arch.input_dim} p={arch.p_units} q={arch.q_units}")
    print(f"params: {arch.n_params}, payload: {msg.payload_size} bytes")
    print(f"values: min {v.min():.6g}  max {v.max():.6g}  mean {v.mean():.6g}  "
          f"std {v.std():.6g}  l2 {np.linalg.norm(v):.6g}")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    own = load_model(args.own)
    received = [load_model(p) for p in args.received]
    agg = AGGREGATORS[args.aggregation]
    try:
        g = agg(own.params, [m.params for m in received], owner=own.node_id,
                senders=[m.node_id for m in received])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_model(args.out, own.node_id, own.channel_id, g.params)
    print(f"aggregated {len(g.contributors)} models (nodes {g.contributors}) into {args.out}")
    return EXIT_OK


def _scenario_flags(p: argparse.ArgumentParser, run: bool) -> None:
    p.add_argument("--scenario", help=f"builtin scenario ({', '.join(sorted(sc.BUILTINS))})")
    p.add_argument("--config", help="scenario YAML file")
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), help="model preset (default t_s)")
    p.add_argument("--profile", choices=sorted(sc.PROFILES), help="horizon/epoch preset (default desk)")
    p.add_argument("--seed", type=int, help="traffic seed; validation uses seed + 1")
    p.add_argument("--noise-std", type=float, default=None, help="Gaussian corruption of exchanged models")
    p.add_argument("--out", default="runs/out", help="output directory")
    if run:
        p.add_argument("--epochs", type=int, help="override the profile's epoch count")
        p.add_argument("--aggregation", choices=sorted(AGGREGATORS))
        p.add_argument("--workers", type=int, default=1, help="parallel node training threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peerfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("list", help="list builtin scenarios").set_defaults(func=cmd_list)

    g = sub.add_parser("generate", help="write per-node train/validation traces and a manifest")
    _scenario_flags(g, run=False)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="train, exchange, aggregate and evaluate a scenario")
    _scenario_flags(r, run=True)
    r.set_defaults(func=cmd_run)

    i = sub.add_parser("inspect-model", help="summarise a serialized model file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect_model)

    a = sub.add_parser("aggregate", help="average model files into a global model")
    a.add_argument("own")
    a.add_argument("received", nargs="*")
    a.add_argument("--aggregation", choices=sorted(AGGREGATORS), default="mean")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_aggregate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"peerfl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MessageFormatError, TraceFormatError) as exc:
        print(f"peerfl: malformed file: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"peerfl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
