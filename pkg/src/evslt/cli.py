"""Command line: ``evslt synth|train|eval|bench --config run.toml``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from evslt.config import load_config
from evslt.errors import ConfigError, EvsltError

MANIFEST_DEFAULT = "manifest.jsonl"


def _manifest_path(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    return Path(args.out) / MANIFEST_DEFAULT


def cmd_synth(cfg, args) -> int:
    from evslt.data import synthesize_corpus

    manifest = synthesize_corpus(cfg.synth, cfg.run.seed, args.out)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(json.dumps({"out": str(args.out), "samples": len(manifest.records), **counts}))
    return 0


def cmd_train(cfg, args) -> int:
    from evslt.data import load_manifest
    from evslt.train import train

    manifest = load_manifest(_manifest_path(args))
    echo = (lambda rec: print(json.dumps(rec), flush=True)) if args.verbose else None
    result = train(cfg, manifest, args.out, resume=args.checkpoint, log=echo)
    print(json.dumps({"steps": result.steps, "best_val": result.best_val, "log": str(result.log_path)}))
    return 0


def cmd_eval(cfg, args) -> int:
    from evslt.data import load_manifest
    from evslt.train import BEST_NAME, evaluate

    manifest = load_manifest(_manifest_path(args))
    checkpoint = args.checkpoint or Path(args.out) / BEST_NAME
    report = evaluate(cfg, manifest, checkpoint, args.split, args.out)
    print(report.to_json())
    return 0


def cmd_bench(cfg, args) -> int:
    from evslt.bench import run_bench

    rows = run_bench(cfg.bench, cfg.run.seed)
    text = "".join(json.dumps(r) + "\n" for r in rows)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bench.jsonl").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evslt", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--manifest", help="manifest.jsonl (default: <out>/manifest.jsonl)")
    parser.add_argument("--split", default="test", choices=("train", "val", "test"))
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--checkpoint", help="checkpoint to resume (train) or evaluate (eval)")
    parser.add_argument("--bin-mode", choices=("time", "count"), help="override data.bin_mode")
    parser.add_argument("-v", "--verbose", action="store_true", help="echo training log records")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.bin_mode:
            import dataclasses

            cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, bin_mode=args.bin_mode))
        return COMMANDS[args.command](cfg, args)
    except EvsltError as exc:
        print(f"evslt {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        # invalid values that slipped past config validation still count as configuration errors
        print(f"evslt {args.command}: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
