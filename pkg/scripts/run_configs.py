"""Run every ``configs/<subcommand>_<name>.cfg`` through the CLI and print one status line each.

Usage: python3 scripts/run_configs.py [--out DIR] [pattern ...]
"""
import argparse
import sys
import time
from pathlib import Path

from brl.cli import COMMANDS, main

ROOT = Path(__file__).resolve().parent.parent


def run(configs, out):
    failures = 0
    for cfg in configs:
        cmd = cfg.stem.split("_", 1)[0]
        if cmd not in COMMANDS:
            print(f"SKIP {cfg.name}: no subcommand prefix")
            continue
        argv = [cmd, "--config", str(cfg)]
        if out:
            argv += ["--out", str(Path(out) / cfg.stem)]
        t0 = time.perf_counter()
        code = main(argv)
        dt = time.perf_counter() - t0
        failures += code != 0
        print(f"{'OK  ' if code == 0 else 'FAIL'} {cfg.name} exit={code} time={dt:.1f}s", flush=True)
    return failures


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", help="override every config's output directory with DIR/<config name>")
    p.add_argument("patterns", nargs="*", default=["*.cfg"])
    a = p.parse_args()
    files = sorted({f for pat in a.patterns for f in (ROOT / "configs").glob(pat)})
    sys.exit(1 if run(files, a.out) else 0)
