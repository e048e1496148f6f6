"""Command-line entry point: ``msplora {counts,train,analyze,compare}``.

Exit codes: 0 success, 2 config/validation error, 3 numerical failure, 4 I/O.
The default output root is ``$MSPLORA_OUT`` (else ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .experiment import (ExperimentConfig, SweepConfig, format_compare_table, prepare_dir,
                         run_experiment, run_sweep, write_run)
from .linalg import svd_values
from .pyramid import ConfigError, count_params
from .serialize import load, load_adapters

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "MSPLORA_OUT"


def default_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def cmd_counts(args) -> int:
    b = count_params(args.layers, args.dmodel, args.rank)
    report = {"n_layers": args.layers, "d_model": args.dmodel, "rank": args.rank,
              "lora": b.lora_total, "msplora": b.msplora_total, "ratio": b.ratio}
    if args.format == "json":
        print(json.dumps(report, sort_keys=True))
    else:
        print(f"N={args.layers} d={args.dmodel} r0={args.rank}")
        print(f"{'method':<8} {'trainable params':>18}")
        print(f"{'lora':<8} {b.lora_total:>18,d}")
        print(f"{'msplora':<8} {b.msplora_total:>18,d}")
        print(f"ratio msplora/lora = {b.ratio:.6f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_dict(_read_json(args.config))
    out = Path(args.out) if args.out else Path(cfg.output_dir) if cfg.output_dir else default_root() / cfg.name
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} already exists; pass --force to overwrite")
    result = run_experiment(cfg)
    write_run(result, out, force=args.force)
    s = result.summary()
    print(f"{out}: {cfg.method} params={s['n_params']} "
          f"loss {s['initial_eval']['loss']:.4f} -> {s['final_eval']['loss']:.4f} "
          f"acc {s['final_eval']['accuracy']:.4f}")
    return EXIT_OK


def _load_run(run_dir: Path):
    cfg = load(run_dir / "effective-config.json")
    snaps = sorted((run_dir / "snapshots").glob("epoch_*.json"))
    return cfg, load_adapters(run_dir / "adapters.json"), [load_adapters(p) for p in snaps]


def _lora_trace(snapshots, top_k: int) -> dict[str, np.ndarray]:
    rows = []
    for s in snapshots:
        svs = [svd_values(s.delta_for_layer(l, k))[:top_k] for l in range(s.n_layers) for k in s.kinds]
        rows.append(np.mean(svs, axis=0))
    return {"layer": np.vstack(rows)}


def cmd_analyze(args) -> int:
    runs = [Path(r) for r in args.runs]
    if args.mode == "diff" and len(runs) != 2:
        raise ConfigError("--mode diff takes exactly two run directories (msplora, lora)")
    if args.mode != "diff" and len(runs) != 1:
        raise ConfigError(f"--mode {args.mode} takes exactly one run directory")
    out = Path(args.out) if args.out else runs[0] / f"analysis-{args.mode}"
    loaded = [_load_run(r) for r in runs]
    meta = {"mode": args.mode, "runs": [str(r) for r in runs], "epsilon": args.epsilon}

    if args.mode == "spectrum":
        cfg, _, snaps = loaded[0]
        if cfg["method"] == "msplora":
            trace = analysis.tier_spectrum_trace(snaps, args.top_k)
        else:
            trace = _lora_trace(snaps, args.top_k)
        prepare_dir(out, args.force)
        analysis.write_trace_csv(trace, out / "spectrum.csv")
        meta.update(method=cfg["method"], top_k=args.top_k, epochs=len(snaps))
    elif args.mode == "divergence":
        cfg, adapters, _ = loaded[0]
        dm = analysis.layer_divergence_matrix(adapters, _kl_mode(adapters), args.epsilon)
        prepare_dir(out, args.force)
        analysis.write_grid_csv(dm.d_kl, out / "divergence.csv")
        meta.update(method=cfg["method"], kl_mode=dm.mode, truncate=dm.truncate,
                    mean_off_diagonal=dm.mean_off_diagonal())
    else:
        (ca, aa, _), (cb, ab, _) = loaded
        same_run = runs[0].resolve() == runs[1].resolve()
        if not same_run:
            if (ca["method"], cb["method"]) != ("msplora", "lora"):
                raise ConfigError("--mode diff expects an msplora run followed by a lora run")
            if ca["task"] != cb["task"] or ca["seed"] != cb["seed"]:
                raise ConfigError("--mode diff needs runs on the same task and seed")
        da = analysis.layer_divergence_matrix(aa, _kl_mode(aa), args.epsilon)
        db = analysis.layer_divergence_matrix(ab, _kl_mode(ab), args.epsilon)
        prepare_dir(out, args.force)
        analysis.write_grid_csv(analysis.divergence_difference(da, db), out / "diff.csv")
        meta.update(mean_off_diagonal=[da.mean_off_diagonal(), db.mean_off_diagonal()])
    analysis.write_sidecar(meta, out / "meta.json")
    print(out)
    return EXIT_OK


def _kl_mode(adapters) -> str:
    return "msplora-layer-tier" if adapters.method == "msplora" else "plain-lora"


def cmd_compare(args) -> int:
    sweep = SweepConfig.from_dict(_read_json(args.config))
    cells = sweep.cells()  # validate every cell before any work
    out = Path(args.out) if args.out else default_root() / sweep.name
    report = run_sweep(sweep, out, force=args.force, workers=args.workers)
    print(format_compare_table(report))
    if cells:
        print(f"wrote {out / 'compare.csv'} and {out / 'compare.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msplora", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("counts", help="trainable-parameter budget of LoRA vs the pyramid")
    c.add_argument("--layers", type=int, required=True)
    c.add_argument("--dmodel", type=int, required=True)
    c.add_argument("--rank", type=int, required=True, help="LoRA rank r0 (= pyramid r_high)")
    c.add_argument("--format", choices=("table", "json"), default="table")
    c.set_defaults(func=cmd_counts)

    t = sub.add_parser("train", help="train one adapter set from a JSON experiment config")
    t.add_argument("config")
    t.add_argument("--out", help="run directory (default: config output_dir, else $%s/<name>)" % OUT_ENV)
    t.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="spectral analysis of one run, or a msplora/lora run pair")
    a.add_argument("runs", nargs="+")
    a.add_argument("--mode", choices=("spectrum", "divergence", "diff"), required=True)
    a.add_argument("--out")
    a.add_argument("--epsilon", type=float, default=analysis.DEFAULT_EPSILON)
    a.add_argument("--top-k", type=int, default=8)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("compare", help="run a method x seed sweep and tabulate the results")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
