"""Batch front end.

Every subcommand writes ``<out>/<command>.json`` and exits 0 when the verdict
is ``pass``, 1 when it is ``fail`` (the report is still written, including
the error for failed preconditions), and 2 on configuration errors.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
from dataclasses import dataclass, field

import numpy as np

from . import control, contraction, kkl, koopman
from .dynamics import integrate, load_system
from .errors import (BlowUpError, ConvergenceError, DimensionError, DomainError, ExprSyntaxError,
                     GridTooCoarseError, MatrixLogError, NotStabilizableError, NotStableError,
                     PreconditionError, RankDeficientError, TailNotConvergedError, UnknownSymbolError)
from .fixtures import FIXTURES, emit_fixture
from .grid import SampleBox
from .linalg import lyapunov_residual

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

# errors that mean "the certificate could not be established"
FAILURES = (NotStableError, NotStabilizableError, BlowUpError, ConvergenceError, TailNotConvergedError,
            GridTooCoarseError, PreconditionError, MatrixLogError, RankDeficientError, DomainError)


class ConfigError(ValueError):
    pass


CONFIG_ERRORS = (ConfigError, FileNotFoundError, ExprSyntaxError, UnknownSymbolError, DimensionError,
                 KeyError, ValueError)

PATH_FLAGS = ("system", "lifting", "metric", "controller", "data", "reference")


@dataclass
class JobConfig:
    command: str
    out: str = "results"
    seed: int = 0
    threads: int = 1
    options: dict = field(default_factory=dict)

    @classmethod
    def from_namespace(cls, ns: argparse.Namespace) -> "JobConfig":
        opts = {k: v for k, v in vars(ns).items() if k not in ("command", "out", "seed", "threads")}
        return cls(ns.command, ns.out, ns.seed, ns.threads, opts)

    def __getattr__(self, name):
        try:
            return self.__dict__["options"][name]
        except KeyError:
            raise AttributeError(name) from None

    def validate(self) -> None:
        for key in PATH_FLAGS:
            path = self.options.get(key)
            if path is not None and not os.path.isfile(path):
                raise FileNotFoundError(f"--{key}: no such file {path!r}")
        for key in ("tol", "dt", "horizon", "tail_tol", "rank_tol"):
            v = self.options.get(key)
            if v is not None and not v > 0:
                raise ConfigError(f"--{key.replace('_', '-')} must be positive")
        if self.options.get("eps") is not None and self.options["eps"] < 0:
            raise ConfigError("--eps must be non-negative")
        if self.threads < 1:
            raise ConfigError("--threads must be at least 1")

    def require(self, *names):
        missing = [n for n in names if self.options.get(n) is None]
        if missing:
            raise ConfigError(f"{self.command} needs " + ", ".join("--" + m.replace("_", "-") for m in missing))

    def box(self, key="box", time=None) -> SampleBox:
        spec = self.options.get(key)
        if spec is None:
            raise ConfigError(f"{self.command} needs --{key.replace('_', '-')}")
        return SampleBox.parse(spec, time=time)


# ---------------------------------------------------------------------------
# helpers


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, complex):
        return {"re": _clean(obj.real), "im": _clean(obj.imag)}
    return obj


def write_json(path, data) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _points(text: str, n: int | None = None) -> np.ndarray:
    """``"a,b;c,d"`` -> array of shape (2, 2)."""
    rows = [[float(v) for v in part.split(",")] for part in text.split(";") if part.strip()]
    arr = np.asarray(rows, dtype=float)
    if n is not None and arr.shape[1] != n:
        raise DimensionError(f"points must have {n} coordinates")
    return arr


def _write_trajectories(traj, out_dir, stem) -> list:
    """One CSV per trajectory: ``stem.csv`` or ``stem_1.csv, stem_2.csv, ...``."""
    if traj.states.ndim == 2:
        traj.to_csv(os.path.join(out_dir, f"{stem}.csv"))
        return [f"{stem}.csv"]
    names = []
    for k in range(traj.states.shape[1]):
        names.append(f"{stem}_{k + 1}.csv")
        traj.select(k).to_csv(os.path.join(out_dir, names[-1]))
    return names


def _verdict(flag: bool) -> str:
    return "pass" if flag else "fail"


def _time_spec(job):
    return job.options.get("time")


# ---------------------------------------------------------------------------
# subcommands; each returns a report dict holding a "verdict"


def cmd_verify_pde(job: JobConfig) -> dict:
    job.require("system", "lifting")
    sys_ = load_system(job.system)
    L = koopman.load_lifting(job.lifting)
    box = job.box(time=_time_spec(job))
    kw = dict(tol=job.tol or koopman.DEFAULT_TOL, rank_tol=job.rank_tol or koopman.DEFAULT_RANK_TOL,
              threads=job.threads, probes=job.probes, seed=job.seed, keep_table=job.csv)
    if sys_.kind == "controlled":
        rep = koopman.pde_residual_controlled(sys_, L, box, job.box("input_box"), **kw)
    else:
        rep = koopman.pde_residual(sys_, L, box, **kw)
    if job.csv:
        np.savetxt(os.path.join(job.out, "verify-pde.csv"), rep.residuals, fmt="%.17g", header="residual",
                   comments="")
    d = rep.to_dict()
    d["kind"] = sys_.kind
    return d


def cmd_eigcheck(job: JobConfig) -> dict:
    job.require("system", "phi", "lam", "x0")
    sys_ = load_system(job.system)
    phi = job.phi if job.phi_imag is None else (job.phi, job.phi_imag)
    lam = complex(job.lam.replace("i", "j"))
    rep = koopman.eigenfunction_check(sys_, phi, lam, _points(job.x0, sys_.n), job.horizon or 5.0,
                                      job.dt or 1e-3, job.tol or 1e-8)
    d = rep.to_dict()
    d["lam"] = lam
    return d


def cmd_metric(job: JobConfig) -> dict:
    job.require("system", "lifting")
    sys_ = load_system(job.system)
    L = koopman.load_lifting(job.lifting)
    box = job.box()
    eps = 0.0 if job.eps is None else job.eps
    metric, rep = contraction.metric_from_lifting(sys_, L, box, eps=eps, threads=job.threads)
    chain = contraction.chain_identity_error(sys_, metric, box.points())
    lyap = lyapunov_residual(L.A, metric.P)
    identity_tol = job.identity_tol
    path = os.path.join(job.out, "metric.txt")
    with open(path, "w") as fh:
        fh.write(metric.to_text(os.path.abspath(job.lifting)))
    d = rep.to_dict()
    d.update({"P": metric.P, "lyapunov_residual": lyap, "chain_identity_error": chain,
              "identity_tol": identity_tol, "metric_file": "metric.txt"})
    d["verdict"] = _verdict(rep.verdict and chain <= identity_tol and lyap <= 1e-10)
    return d


def cmd_contraction(job: JobConfig) -> dict:
    job.require("system", "metric")
    sys_ = load_system(job.system)
    M = contraction.load_metric(job.metric)
    box = job.box(time=_time_spec(job))
    eps = contraction.DEFAULT_EPS if job.eps is None else job.eps
    rep = contraction.contraction_check(sys_, M, box, job.rho, eps, mdot=job.mdot, threads=job.threads,
                                        probes=job.probes, seed=job.seed)
    return rep.to_dict()


def cmd_ccm(job: JobConfig) -> dict:
    job.require("system")
    sys_ = load_system(job.system)
    box, ubox = job.box(), job.box("input_box")
    eps = contraction.DEFAULT_EPS if job.eps is None else job.eps
    if job.controller is not None:
        job.require("lifting")
        L = koopman.load_lifting(job.lifting)
        ctl = _load_controller(job.controller)
        _, rep = control.ccm_certificate(sys_, L, ctl, box, ubox, eps, threads=job.threads)
        return rep.to_dict()
    job.require("metric", "gain")
    M = contraction.load_metric(job.metric)
    K = json.loads(job.gain)
    rep = contraction.ccm_check(sys_, M, K, box, ubox, eps, threads=job.threads, probes=job.probes,
                                seed=job.seed)
    return rep.to_dict()


def _load_controller(path) -> control.LiftedController:
    with open(path) as fh:
        d = json.load(fh)
    return control.LiftedController(np.atleast_2d(np.asarray(d["Kbar"], dtype=float)),
                                    np.atleast_2d(np.asarray(d["P"], dtype=float)),
                                    float(d["closed_loop_abscissa"]), float(d["eq23_margin"]),
                                    d.get("design", "given"))


def _generate_snapshots(job, sys_) -> koopman.Snapshots:
    box = job.box()
    X = box.random_points(job.samples, job.seed)
    if job.snapshot_kind == "derivative":
        return koopman.Snapshots(X, sys_.rhs(X), "derivative", 0.0)
    dt = job.dt or 1e-3
    Y = integrate(sys_, X, horizon=dt, dt=dt).final
    return koopman.Snapshots(X, Y, "successor", dt)


def cmd_edmd(job: JobConfig) -> dict:
    job.require("dictionary")
    if job.data is not None:
        data = koopman.load_snapshots(job.data)
        source = {"data": job.data}
    else:
        job.require("system")
        sys_ = load_system(job.system)
        if sys_.kind != "autonomous":
            raise ConfigError("snapshot generation needs an autonomous system")
        data = _generate_snapshots(job, sys_)
        data.to_csv(os.path.join(job.out, "snapshots.csv"))
        source = {"generated": job.snapshot_kind, "samples": job.samples, "seed": job.seed}
    dictionary = [d for d in job.dictionary.split(";") if d.strip()]
    L = koopman.edmd_fit(data, dictionary, ridge=job.ridge, mode=job.mode, n=data.X.shape[1])
    with open(os.path.join(job.out, "edmd.lifting"), "w") as fh:
        fh.write(L.to_text())
    d = {"A": L.A, "regression_residual": koopman.regression_residual(L, data),
         "mode": job.mode or ("continuous" if data.kind == "derivative" else "discrete"),
         "n_snapshots": len(data.X), "ridge": job.ridge, "source": source, "lifting_file": "edmd.lifting"}
    ok = True
    if job.reference is not None:
        ref = koopman.load_lifting(job.reference)
        if ref.A.shape != L.A.shape:
            raise DimensionError("reference lifting has a different dimension")
        err = float(np.abs(L.A - ref.A).max())
        tol = job.tol or 1e-6
        d.update({"A_error": err, "tol": tol})
        ok = err <= tol
    d["verdict"] = _verdict(ok)
    return d


def cmd_kkl(job: JobConfig) -> dict:
    job.require("system")
    sys_ = load_system(job.system)
    x_star = None if job.x_star is None else [float(v) for v in job.x_star.split(",")]
    tail_tol = job.tail_tol or kkl.DEFAULT_TAIL_TOL
    dt = job.dt or 1e-3
    if sys_.kind == "time-varying":
        job.require("x", "t")
        rem = kkl.build_remainder(sys_, x_star, strict=False)
        x = _points(job.x, sys_.n)
        value, tails = kkl.kkl_T_tv(rem, x, job.t, job.horizon, dt, tail_tol)
        return {"T": value, "tail": tails, "t": job.t, "x": x, "vanishing": list(rem.vanishing),
                "F_star": rem.F_star, "verdict": "pass"}
    rem = kkl.build_remainder(sys_, x_star)
    sol, rep = kkl.build_phi0(rem, job.box(), job.horizon, dt, tail_tol=tail_tol, tol=job.tol or kkl.KKL_TOL,
                              threads=job.threads)
    sol.export(os.path.join(job.out, "kkl_table.csv"), os.path.join(job.out, "kkl_meta.json"))
    T_star, _ = kkl.kkl_T(rem, rem.x_star, sol.T_h, dt, tail_tol)
    d = rep.to_dict()
    t_star = float(np.abs(T_star).max())
    ok = rep.verdict and t_star <= 1e-8
    d.update({"x_star": rem.x_star, "F_star": rem.F_star, "T_at_x_star": t_star, "table": "kkl_table.csv"})
    if sys_.n == 1:
        mono = bool(np.all(np.diff(sol.node_phi0()[:, 0]) > 0))
        d["phi0_strictly_increasing"] = mono
        ok = ok and mono
    d["verdict"] = _verdict(ok)
    return d


def cmd_control(job: JobConfig) -> dict:
    job.require("system", "lifting")
    sys_ = load_system(job.system)
    L = koopman.load_lifting(job.lifting)
    ctl = control.synthesize(L)
    ctl.save(os.path.join(job.out, "controller.json"))
    eps = contraction.DEFAULT_EPS if job.eps is None else job.eps
    _, cert = control.ccm_certificate(sys_, L, ctl, job.box(), job.box("input_box"), eps, threads=job.threads)
    d = {"controller": ctl.to_dict(), "certificate": cert.to_dict(), "controller_file": "controller.json"}
    ok = cert.verdict and ctl.certificate_margin <= control.CERTIFICATE_MARGIN
    if job.x0 is not None:
        x0 = _points(job.x0, sys_.n)
        traj, lifted, cl = control.closed_loop_simulate(sys_, L, ctl, x0[0] if len(x0) == 1 else x0,
                                                        job.horizon or 10.0, dt=job.dt or 1e-3)
        d["trajectories"] = _write_trajectories(traj, job.out, "closed_loop")
        d["closed_loop"] = cl.to_dict()
        ok = ok and cl.consistency <= job.consistency_tol
    d["verdict"] = _verdict(ok)
    return d


def cmd_simulate(job: JobConfig) -> dict:
    job.require("system", "x0")
    sys_ = load_system(job.system)
    x0 = _points(job.x0, sys_.n)
    horizon, dt = job.horizon or 10.0, job.dt or 1e-3
    d = {"horizon": horizon, "dt": dt}
    if job.controller is not None:
        job.require("lifting")
        L = koopman.load_lifting(job.lifting)
        traj, lifted, cl = control.closed_loop_simulate(sys_, L, _load_controller(job.controller),
                                                        x0[0] if len(x0) == 1 else x0, horizon, dt)
        d["closed_loop"] = cl.to_dict()
    else:
        traj = integrate(sys_, x0 if len(x0) > 1 else x0[0], horizon=horizon, dt=dt)
        if job.lifting is not None:
            L = koopman.load_lifting(job.lifting)
            lifted = koopman.lifted_simulate(L, L(traj.states[0]), horizon, dt)
            d["consistency"] = float(np.linalg.norm(L(traj.states) - lifted.states, axis=-1).max())
    files = _write_trajectories(traj, job.out, "trajectory")
    d.update({"final": traj.final, "steps": len(traj.states) - 1, "trajectories": files, "verdict": "pass"})
    return d


def cmd_pseudometric(job: JobConfig) -> dict:
    job.require("lifting", "x1", "x2")
    L = koopman.load_lifting(job.lifting)
    a, b = _points(job.x1, L.n), _points(job.x2, L.n)
    p = math.inf if job.p in ("inf", "max") else float(job.p)
    value = koopman.koopman_pseudometric(L, a[0], b[0], p)
    return {"value": value, "p": p, "x1": a[0], "x2": b[0], "verdict": "pass"}


def cmd_emit_fixture(job: JobConfig) -> dict:
    paths = emit_fixture(job.name, job.out)
    return {"name": job.name, "files": [os.path.basename(p) for p in paths], "verdict": "pass"}


COMMANDS = {
    "verify-pde": cmd_verify_pde,
    "eigcheck": cmd_eigcheck,
    "metric": cmd_metric,
    "contraction": cmd_contraction,
    "ccm": cmd_ccm,
    "edmd": cmd_edmd,
    "kkl": cmd_kkl,
    "control": cmd_control,
    "simulate": cmd_simulate,
    "pseudometric": cmd_pseudometric,
    "emit-fixture": cmd_emit_fixture,
}


# ---------------------------------------------------------------------------
# driver


def run(job: JobConfig) -> int:
    try:
        job.validate()
        os.makedirs(job.out, exist_ok=True)
        report = COMMANDS[job.command](job)
    except FAILURES as err:
        report = {"verdict": "fail", "error": {"type": type(err).__name__, "message": str(err)}}
        for attr in ("abscissa", "eigenvalue", "time", "estimate", "point"):
            if getattr(err, attr, None) is not None:
                report["error"][attr] = getattr(err, attr)
    except CONFIG_ERRORS as err:
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"{job.command}: configuration error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    report = {"command": job.command, **report}
    path = os.path.join(job.out, f"{job.command}.json")
    write_json(path, report)
    verdict = report["verdict"]
    print(f"{job.command}: {verdict} ({path})")
    return EXIT_PASS if verdict == "pass" else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="results", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for grid evaluation")
    common.add_argument("--seed", type=int, default=0, help="seed for random probe points and samples")
    common.add_argument("--probes", type=int, default=0, help="extra random off-grid points")

    files = argparse.ArgumentParser(add_help=False)
    files.add_argument("--system")
    files.add_argument("--lifting")
    files.add_argument("--metric")
    files.add_argument("--controller", help="controller JSON written by 'control'")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--box", help="lo1,hi1,count1;lo2,hi2,count2;...")
    grid.add_argument("--time", help="t0,t1,count for time-varying checks")
    grid.add_argument("--input-box", help="input grid, same format as --box")

    num = argparse.ArgumentParser(add_help=False)
    num.add_argument("--tol", type=float)
    num.add_argument("--eps", type=float)
    num.add_argument("--rho", type=float)
    num.add_argument("--horizon", type=float)
    num.add_argument("--dt", type=float)

    parents = [common, files, grid, num]
    parser = argparse.ArgumentParser(prog="koopcontract",
                                     description="Koopman liftings and contraction certificates")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-pde", parents=parents, help="lifting PDE residual on a grid")
    p.add_argument("--rank-tol", type=float)
    p.add_argument("--csv", action="store_true", help="also write the residual table")

    p = sub.add_parser("eigcheck", parents=parents, help="eigenfunction check along trajectories")
    p.add_argument("--phi", help="eigenfunction (real part)")
    p.add_argument("--phi-imag", help="imaginary part for complex eigenfunctions")
    p.add_argument("--lam", help="eigenvalue, e.g. -1 or -1+2j")
    p.add_argument("--x0", help="initial states a,b;c,d")

    p = sub.add_parser("metric", parents=parents, help="contraction metric Phi^T P Phi from a lifting")
    p.add_argument("--identity-tol", type=float, default=1e-6)

    p = sub.add_parser("contraction", parents=parents, help="sampled contraction inequality")
    p.add_argument("--mdot", choices=("identity", "symbolic"), default="identity")

    p = sub.add_parser("ccm", parents=parents, help="sampled control contraction inequality")
    p.add_argument("--gain", help='differential gain as JSON, e.g. [["-2*x1", "0"]]')

    p = sub.add_parser("edmd", parents=parents, help="fit A from snapshot data")
    p.add_argument("--data", help="snapshot CSV")
    p.add_argument("--dictionary", help="observables separated by ';'")
    p.add_argument("--mode", choices=("continuous", "discrete"))
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--reference", help="lifting whose A the fit is compared with")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--snapshot-kind", choices=("derivative", "successor"), default="derivative")

    p = sub.add_parser("kkl", parents=parents, help="Koopman map of a contracting system by the KKL integral")
    p.add_argument("--tail-tol", type=float)
    p.add_argument("--x-star", help="equilibrium guess")
    p.add_argument("--x", help="state(s) for time-varying systems")
    p.add_argument("--t", type=float, help="time for time-varying systems")

    p = sub.add_parser("control", parents=parents, help="lifted LQR synthesis and CCM certificate")
    p.add_argument("--x0", help="closed-loop simulation start")
    p.add_argument("--consistency-tol", type=float, default=1e-5)

    p = sub.add_parser("simulate", parents=parents, help="RK4 trajectory to CSV")
    p.add_argument("--x0")

    p = sub.add_parser("pseudometric", parents=parents, help="Koopman pseudometric between two states")
    p.add_argument("--x1")
    p.add_argument("--x2")
    p.add_argument("--p", default="2")

    p = sub.add_parser("emit-fixture", parents=[common], help="write a built-in example to files")
    p.add_argument("name", help=", ".join(sorted(FIXTURES)))
    return parser


_NEGATIVE = re.compile(r"^-[\d.]")


def _join_negative_values(argv):
    """Rewrite ``--flag -1,2`` as ``--flag=-1,2`` so argparse accepts negative values."""
    out = []
    for tok in argv:
        if out and _NEGATIVE.match(tok) and out[-1].startswith("--") and "=" not in out[-1]:
            out[-1] = f"{out[-1]}={tok}"
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    ns = build_parser().parse_args(_join_negative_values(argv))
    return run(JobConfig.from_namespace(ns))


if __name__ == "__main__":
    sys.exit(main())
