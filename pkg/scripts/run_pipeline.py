#!/usr/bin/env python3
"""Run the full command-line pipeline on the built-in fixtures.

Writes fixture files and every report under --out, then prints a one-line
summary per step. Exit status is the number of steps whose exit code differs
from the expected one.
"""
import argparse
import os
import sys

from koopcontract.cli import main as cli


def steps(fx):
    poly = ["--system", f"{fx}/polyflow.system"]
    ctrl = ["--system", f"{fx}/controlled.system", "--lifting", f"{fx}/controlled.lifting"]
    return [
        ("verify-pde", [*poly, "--lifting", f"{fx}/polyflow.lifting", "--box", "-3,3,101;-3,3,101"], 0),
        ("metric", [*poly, "--lifting", f"{fx}/polyflow.lifting", "--box", "-3,3,101;-3,3,101"], 0),
        ("edmd", [*poly, "--box", "-3,3,2;-3,3,2", "--dictionary", "x1;x2;x1^2", "--samples", "500",
                  "--reference", f"{fx}/polyflow.lifting"], 0),
        ("kkl", ["--system", f"{fx}/cubic.system", "--box", "-2,2,801", "--horizon", "40"], 0),
        ("kkl", ["--system", f"{fx}/forced.system", "--x", "0", "--t", "5"], 0),
        ("control", [*ctrl, "--box", "-2,2,41;-2,2,41", "--input-box", "-2,2,5", "--x0", "1,1"], 0),
        ("contraction", ["--system", f"{fx}/expanding.system", "--metric", f"{fx}/expanding.metric",
                         "--box", "-1,1,21", "--rho", "0"], 1),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/pipeline")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    fx = os.path.join(args.out, "fixtures")
    for name in ("polyflow", "cubic", "forced", "controlled", "expanding"):
        cli(["emit-fixture", name, "--out", fx])
    bad = 0
    for k, (command, flags, expected) in enumerate(steps(fx)):
        out = os.path.join(args.out, f"{k:02d}-{command}")
        code = cli([command, *flags, "--out", out, "--threads", str(args.threads)])
        status = "ok" if code == expected else "UNEXPECTED"
        print(f"  step {k}: {command} exit {code} (expected {expected}) {status}")
        bad += code != expected
    return bad


if __name__ == "__main__":
    sys.exit(main())
