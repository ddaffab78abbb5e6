"""Built-in worked examples, written out as plain system/lifting/metric files."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .contraction import parse_metric
from .dynamics import parse_system
from .koopman import parse_lifting


@dataclass(frozen=True)
class Fixture:
    name: str
    description: str
    system: str
    lifting: Optional[str] = None
    metric: Optional[str] = None
    hints: dict = field(default_factory=dict)


_POLY_A = "[[-1, 0, 0], [0, -2, 2], [0, 0, -2]]"

FIXTURES = {
    "linear1d": Fixture(
        "linear1d", "x' = -x with the identity lifting",
        "kind = autonomous\nn = 1\nf1 = -x1\n",
        "n = 1\nphi1 = x1\nA = [[-1]]\n",
        hints={"box": "-3,3,101"},
    ),
    "polyflow": Fixture(
        "polyflow", "x1' = mu x1, x2' = lam (x2 - x1^2) with mu = -1, lam = -2; exact lifting (x1, x2, x1^2)",
        "kind = autonomous\nn = 2\nf1 = -x1\nf2 = -2*(x2 - x1^2)\nequilibrium = 0, 0\n",
        f"n = 2\nphi1 = x1\nphi2 = x2\nphi3 = x1^2\nA = {_POLY_A}\n",
        hints={"box": "-3,3,101;-3,3,101"},
    ),
    "cubic": Fixture(
        "cubic", "x' = -x - x^3, contracting; Koopman map built by the KKL construction",
        "kind = autonomous\nn = 1\nf1 = -x1 - x1^3\nequilibrium = 0\n",
        hints={"box": "-2,2,801", "T_h": 40.0},
    ),
    "forced": Fixture(
        "forced", "x' = -x + sin(t), time-varying",
        "kind = time-varying\nn = 1\nf1 = -x1 + sin(t)\n",
        hints={"x": [0.0], "t": 5.0},
    ),
    "controlled": Fixture(
        "controlled", "x1' = -x1, x2' = 2 x2 - 2 x1^2 + u; lifting (x1, x2, x1^2) with B = (0, 1, 0)",
        "kind = controlled\nn = 2\nm = 1\nf1 = -x1\nf2 = 2*x2 - 2*x1^2 + u1\nequilibrium = 0, 0\n",
        "n = 2\nphi1 = x1\nphi2 = x2\nphi3 = x1^2\n"
        "A = [[-1, 0, 0], [0, 2, -2], [0, 0, -2]]\nB = [[0], [1], [0]]\n",
        hints={"box": "-2,2,41;-2,2,41", "input_box": "-2,2,5", "x0": [1.0, 1.0]},
    ),
    "scalar-controlled": Fixture(
        "scalar-controlled", "x' = x + u with the identity lifting",
        "kind = controlled\nn = 1\nm = 1\nf1 = x1 + u1\n",
        "n = 1\nphi1 = x1\nA = [[1]]\nB = [[1]]\n",
        hints={"box": "-2,2,41", "input_box": "-2,2,5", "x0": [1.0]},
    ),
    "expanding": Fixture(
        "expanding", "x' = x with the constant metric M = 1 (not contracting)",
        "kind = autonomous\nn = 1\nf1 = x1\n",
        metric="n = 1\nrho = 0\nM11 = 1\n",
        hints={"box": "-1,1,21"},
    ),
}


def get_fixture(name: str) -> Fixture:
    try:
        return FIXTURES[name]
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; available: {', '.join(sorted(FIXTURES))}") from None


def load_fixture(name: str) -> tuple:
    """Parsed ``(system, lifting or None)``."""
    fx = get_fixture(name)
    sys = parse_system(fx.system)
    L = parse_lifting(fx.lifting) if fx.lifting else None
    return sys, L


def load_fixture_metric(name: str):
    fx = get_fixture(name)
    return parse_metric(fx.metric) if fx.metric else None


def emit_fixture(name: str, out_dir) -> list:
    """Write ``<name>.system``, ``<name>.lifting``, ``<name>.metric`` (when present)
    and ``<name>.json`` with suggested boxes. Returns the written paths."""
    fx = get_fixture(name)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for suffix, text in (("system", fx.system), ("lifting", fx.lifting), ("metric", fx.metric)):
        if text is None:
            continue
        path = os.path.join(out_dir, f"{name}.{suffix}")
        with open(path, "w") as fh:
            fh.write(text)
        written.append(path)
    path = os.path.join(out_dir, f"{name}.json")
    with open(path, "w") as fh:
        json.dump({"name": name, "description": fx.description, **fx.hints}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)
    return written
