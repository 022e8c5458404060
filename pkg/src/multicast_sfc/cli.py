"""Command-line entry point: ``multicast-sfc <command> ...``.

Every command that produces files writes them into ``--out`` together with a
``manifest.json`` holding the resolved scenario, the parameters, the seed and
package versions. ``multicast-sfc replay OUT/manifest.json --out OTHER``
re-runs the same command and reproduces the data files byte for byte. Each CSV
opens with a ``#`` comment line naming its manifest and config digest.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numba
import numpy as np

from . import __version__
from .audit import LedgerRecorder, audit_ledger, read_ledger
from .engine import SAMPLE_EVERY, WORKERS_ENV, RunResult, SweepResult, run, sweep_lambda, sweep_v
from .model import DEST_READS, ScenarioError, parse_quantity
from .policy import RandomizedPolicy, RandomizedPolicySpec, make_policy
from .scenarios import BUILTIN, builtin, config_from_dict, config_to_dict, load_scenario

log = logging.getLogger("multicast_sfc")

MANIFEST = "manifest.json"
TIMELINE_COLUMNS = ("slot", "backlog_total", "cost", "delivered", "dummy")
POLICY_CHOICES = ("multicast", "unicast", "randomized")


# ---------------------------------------------------------------------------
# parsing helpers

def parse_rate(text: str) -> float:
    """``"20Mbps"``, ``"0.02Gbps"`` or a bare number of Mbps -> bps."""
    return parse_quantity(text, "Mbps")


def parse_grid(text: str, unit: Optional[str] = None) -> list[float]:
    """``"30:52:2"`` (inclusive) or ``"0,1e5,3e5"``; values in ``unit`` when given."""
    conv = (lambda s: parse_quantity(s, unit)) if unit else float
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"range grid must be start:stop:step, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError(f"bad range grid {text!r}")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [conv(start + k * step) for k in range(n)]
    values = [conv(p) for p in text.split(",") if p.strip()]
    if not values:
        raise ValueError("empty grid")
    return values


def _policy_kind(name: str) -> str:
    return {"multicast": "ldp-multicast", "unicast": "ldp-unicast-baseline"}.get(name, name)


# ---------------------------------------------------------------------------
# output helpers

def _versions() -> dict:
    return {"artifact": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "numba": numba.__version__}


def _header(digest: str) -> str:
    return f"# manifest={MANIFEST} config={digest}\n"


def _write_csv(path: Path, header: str, columns: Sequence[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "inf" if math.isinf(v) else repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def emit_plot_data(result: SweepResult, out_dir, prefix: str = "", header: str = "") -> list[Path]:
    """Two-column plottable series from a sweep; unstable points are written as ``inf``.

    Lambda sweeps give ``<prefix>lambda_backlog.csv`` (Mbps, stable backlog);
    V sweeps give ``<prefix>V_backlog.csv`` and ``<prefix>V_cost.csv``.
    """
    if not result.rows:
        raise ValueError("sweep has no rows to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if result.kind == "lambda":
        rows = [(r.value / 1e6, r.stable_backlog if r.verdict == "stable" else math.inf)
                for r in result.rows]
        return [_write_csv(out_dir / f"{prefix}lambda_backlog.csv", header,
                           ("lambda_mbps", "stable_backlog"), rows)]
    if result.kind == "V":
        bad = lambda r, x: x if r.verdict == "stable" else math.inf
        return [
            _write_csv(out_dir / f"{prefix}V_backlog.csv", header, ("V", "avg_backlog"),
                       [(r.value, bad(r, r.avg_backlog)) for r in result.rows]),
            _write_csv(out_dir / f"{prefix}V_cost.csv", header, ("V", "avg_cost"),
                       [(r.value, bad(r, r.avg_cost)) for r in result.rows]),
        ]
    raise ValueError(f"unknown sweep kind {result.kind!r}")


def write_timeline(result: RunResult, path, header: str = "") -> Path:
    tl = result.timeline
    return _write_csv(Path(path), header, TIMELINE_COLUMNS,
                      zip(*(tl[c] for c in TIMELINE_COLUMNS)))


# ---------------------------------------------------------------------------
# commands; each takes (config, params, out dir) so replay can call it directly

def _make_policy(cfg, params, V=None):
    V = cfg.V if V is None else V
    if params["policy"] == "randomized":
        if params.get("beta") is None:
            raise ValueError("--policy randomized needs --beta FILE")
        from .model import build_network
        spec = RandomizedPolicySpec.from_named(build_network(cfg), params["beta"])
        return RandomizedPolicy(spec)
    return make_policy(_policy_kind(params["policy"]), V, dest_read=cfg.dest_read)


def cmd_run(cfg, params, out: Path) -> list[Path]:
    head = _header(cfg.digest())
    recorder = LedgerRecorder(out / params["ledger"], keep=False) if params.get("ledger") else None
    res = run(cfg, _make_policy(cfg, params), slots=params["slots"], seed=params["seed"],
              recorder=recorder, sample_every=params.get("sample_every") or SAMPLE_EVERY)
    files = [write_timeline(res, out / "timeline.csv", head)]
    summary = out / "summary.json"
    summary.write_text(json.dumps({**res.summary(), "config_digest": cfg.digest()}, indent=2) + "\n")
    files.append(summary)
    if recorder is not None:
        files.append(out / params["ledger"])
    s = res.summary()
    print(f"{s['scenario']} {s['policy']} lambda={s['lambda_mbps']:g}Mbps V={s['V']:g}: "
          f"{s['verdict']} avg_backlog={s['avg_backlog']:.6g} avg_cost={s['avg_cost']:.6g}/s")
    return files


def cmd_sweep_lambda(cfg, params, out: Path) -> list[Path]:
    head = _header(cfg.digest())
    res = sweep_lambda(cfg, params["grid"], policy=_make_policy(cfg, params),
                       slots=params["slots"], seed=params["seed"])
    files = [_write_csv(out / "sweep_lambda.csv", head, ("lambda", "verdict", "avg_backlog", "avg_cost"),
                        [(r.value / 1e6, r.verdict, r.avg_backlog, r.avg_cost) for r in res.rows])]
    files += emit_plot_data(res, out, header=head)
    for r in res.rows:
        print(f"lambda={r.value / 1e6:g}Mbps {r.verdict} avg_backlog={r.avg_backlog:.6g} "
              f"avg_cost={r.avg_cost:.6g}/s")
    b = res.boundary
    print("boundary: " + (f"{b / 1e6:g} Mbps" if b is not None else "none stable"))
    return files


def cmd_sweep_v(cfg, params, out: Path) -> list[Path]:
    if params["policy"] == "randomized":
        raise ValueError("V sweeps apply to the multicast and unicast policies only")
    head = _header(cfg.digest())
    res = sweep_v(cfg, params["grid"], unicast=params["policy"] == "unicast",
                  slots=params["slots"], seed=params["seed"])
    files = [_write_csv(out / "sweep_v.csv", head, ("V", "avg_backlog", "avg_cost"),
                        [(r.value, r.avg_backlog, r.avg_cost) for r in res.rows])]
    files += emit_plot_data(res, out, header=head)
    for r in res.rows:
        print(f"V={r.value:g} {r.verdict} avg_backlog={r.avg_backlog:.6g} avg_cost={r.avg_cost:.6g}/s")
    return files


COMMANDS = {"run": cmd_run, "sweep-lambda": cmd_sweep_lambda, "sweep-v": cmd_sweep_v}


def execute(command: str, cfg, params: dict, out) -> Path:
    """Run ``command`` and write its manifest; returns the manifest path."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = COMMANDS[command](cfg, params, out)
    manifest = {
        "command": command,
        "params": params,
        "config": config_to_dict(cfg),
        "config_digest": cfg.digest(),
        "seed": params["seed"],
        "versions": _versions(),
        "outputs": sorted(p.name for p in files),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def replay(manifest_path, out) -> Path:
    data = json.loads(Path(manifest_path).read_text())
    if data.get("command") not in COMMANDS:
        raise ValueError(f"manifest names unknown command {data.get('command')!r}")
    cfg = config_from_dict(data["config"])
    if cfg.digest() != data["config_digest"]:
        raise ValueError("manifest config does not match its digest")
    return execute(data["command"], cfg, data["params"], out)


# ---------------------------------------------------------------------------
# argparse

def _resolve(args) -> tuple:
    cfg = load_scenario(args.scenario)
    changes = {}
    if getattr(args, "lam", None) is not None:
        changes["arrival_rate"] = parse_rate(args.lam)
    if getattr(args, "V", None) is not None:
        changes["V"] = float(args.V)
    if args.dest_read is not None:
        changes["dest_read"] = args.dest_read
    changes["policy"] = _policy_kind(args.policy)
    cfg = cfg.replace(**changes)
    beta = json.loads(Path(args.beta).read_text()) if getattr(args, "beta", None) else None
    params = {
        "policy": args.policy,
        "slots": int(args.slots) if args.slots is not None else cfg.horizon,
        "seed": int(args.seed) if args.seed is not None else cfg.seed,
        "beta": beta,
    }
    return cfg, params


def _common(p: argparse.ArgumentParser, lam: bool = True, V: bool = True) -> None:
    p.add_argument("--scenario", default="abilene",
                   help=f"built-in name ({', '.join(sorted(BUILTIN))}) or JSON file")
    p.add_argument("--policy", choices=POLICY_CHOICES, default="multicast")
    if lam:
        p.add_argument("--lambda", dest="lam", metavar="RATE",
                       help="arrival rate per stream, e.g. 20Mbps (bare numbers are Mbps)")
    if V:
        p.add_argument("--V", type=float, help="cost weight of the drift-plus-penalty policy")
    p.add_argument("--slots", type=int, help="number of time slots")
    p.add_argument("--seed", type=int)
    p.add_argument("--dest-read", choices=DEST_READS, default=None,
                   help="how weights read destination-state queues")
    p.add_argument("--beta", metavar="FILE", help="randomized policy probabilities (JSON)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multicast-sfc", description=__doc__.splitlines()[0],
        epilog=f"Sweeps run points in parallel when {WORKERS_ENV} is set to a worker count.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one configuration")
    _common(p)
    p.add_argument("--ledger", metavar="NAME", help="also dump the per-slot ledger CSV into --out")
    p.add_argument("--sample-every", type=int, default=None, help="slots per timeline row")

    p = sub.add_parser("sweep-lambda", help="stability verdict per arrival rate")
    _common(p, lam=False)
    p.add_argument("--grid", required=True, help="Mbps, 30:52:2 or 30,32,34")

    p = sub.add_parser("sweep-v", help="backlog and cost per V at a fixed rate")
    _common(p, V=False)
    p.add_argument("--grid", required=True, help="V values, e.g. 0,1e5,3e5,1e6")

    p = sub.add_parser("audit", help="check a ledger (or a fresh short run) for invariant violations")
    p.add_argument("--ledger", help="ledger CSV written by `run --ledger`")
    p.add_argument("--scenario", help="instead of --ledger: run this scenario stepwise and audit it")
    p.add_argument("--slots", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="print the report as JSON")

    sub.add_parser("list-scenarios", help="print the built-in scenarios")

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


def _audit(args) -> int:
    if (args.ledger is None) == (args.scenario is None):
        raise ValueError("audit needs exactly one of --ledger or --scenario")
    if args.ledger is not None:
        rows = read_ledger(args.ledger)
    else:
        rec = LedgerRecorder()
        cfg = load_scenario(args.scenario)
        run(cfg, slots=args.slots, seed=args.seed, recorder=rec)
        rows = rec.rows
    report = audit_ledger(rows)
    print(report.to_json() if args.json else report.to_text())
    return 0 if report.passed else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "list-scenarios":
            for name in sorted(BUILTIN):
                cfg = builtin(name)
                print(f"{name:12s} nodes={len(cfg.nodes)} links={len(cfg.links)} "
                      f"streams={len(cfg.streams)} lambda={cfg.arrival_rate / 1e6:g}Mbps")
            return 0
        if args.command == "audit":
            return _audit(args)
        if args.command == "replay":
            print(f"wrote {replay(args.manifest, args.out)}")
            return 0
        cfg, params = _resolve(args)
        if args.command == "run":
            params["ledger"] = args.ledger
            params["sample_every"] = args.sample_every
        elif args.command == "sweep-lambda":
            params["grid"] = parse_grid(args.grid, "Mbps")
        else:
            params["grid"] = parse_grid(args.grid)
        print(f"wrote {execute(args.command, cfg, params, args.out)}")
        return 0
    except (ScenarioError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
