"""Command line front end.

    sfpe solve-xi        --config run.yaml
    sfpe estimate        --config run.yaml [--targets C,Cstar] [--out dir]
    sfpe tail-curve      --config run.yaml
    sfpe extremal-index  --config run.yaml
    sfpe lundberg        --config run.yaml
    sfpe validate        --config run.yaml
    sfpe renewal-checks  --config run.yaml

Exit codes: 0 success, 2 no root, 3 estimator error, 4 I/O error,
5 validation failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .drivers import Draws, cumulant, solve_xi, tilt_identity_stats
from .errors import DomainBoundary, EmptyInput, NoRoot, OutOfDomain, OutputError, SFPEError, ValidationFailed
from .estimators import (
    decompose_C,
    estimate_C_components,
    ladder_stats,
    lundberg_bound,
    tail_curve,
    theta_finite_u,
)
from .io import ensure_dir, write_csv, write_json
from .regeneration import EngineConfig, cycle_stats, simulate_block, simulate_cycles, stationary_quantiles
from .renewal_checks import overshoot_distribution, qu_diagnostic, renewal_function, theorem41_check
from .rng import Stream
from .sfpe_core import identity_violation, poly_hypotheses
from .stats import Estimate, batch_means
from .tilt_engine import fixed_horizon_check

log = logging.getLogger("sfpe_tail")

EXIT_OK = 0
# relative offsets above xi at which lambda is reported
H1_MARGINS = (0.1, 0.5)
TAIL_COLUMNS = ["u", "p_hat", "stderr", "u_xi_p", "C_hat", "lundberg"]
DIAG_COLUMNS = ["u", "stat", "value", "stderr"]
LUNDBERG_COLUMNS = ["u", "t", "m_u", "m_u_se", "sigma2_u", "C1", "C1_se", "C2", "C2_se", "Delta", "alpha", "rho",
                    "M", "sup_tau", "vbar_moment", "zbar_moment", "zbar_moment_se", "sup_value", "Cbar", "Cbar_se",
                    "bound", "bound_conservative"]


class _Collector(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(f"{record.name}: {record.getMessage()}")


@contextmanager
def _pool(workers: int):
    if workers <= 1:
        yield None
        return
    with ProcessPoolExecutor(max_workers=workers) as ex:
        yield ex.map


class Run:
    """State shared by the subcommands of one invocation."""

    def __init__(self, cfg: RunConfig, out: Path, mapper, dump_paths: bool):
        self.cfg = cfg
        self.c = cfg.compute
        self.out = out
        self.mapper = mapper
        self.dump_paths = dump_paths
        self.stream = Stream(cfg.seed)
        self.model = cfg.build_model()
        self._regen = None
        self.counts: dict[str, int] = {}
        self.warnings: list[str] = []
        self._xi = None
        self._tau = None
        self._u = None
        self._comp = None
        self._lund = None
        self._ladder_stats = None

    @property
    def regen(self):
        if self._regen is None:
            self._regen = self.cfg.build_regen(self.model)
        return self._regen

    @property
    def xi_solution(self):
        if self._xi is None:
            self._xi = solve_xi(cumulant(self.model.driver))
        return self._xi

    @property
    def xi(self) -> float:
        return float(self.xi_solution.xi)

    def E_tau(self):
        if self._tau is None:
            ob = simulate_cycles(self.model, self.regen, int(self.c["n_tau_cycles"]), self.stream.child("E-tau"),
                                 EngineConfig(), mapper=self.mapper)
            m, se = batch_means(ob.tau.astype(float))
            self._tau = Estimate(m, se, len(ob), {"quantity": "E[tau]"})
            self.counts["E_tau_cycles"] = len(ob)
        return self._tau

    def u_grid(self) -> list[float]:
        if self._u is None:
            qs = self.c.get("u_quantiles")
            if qs:
                q = stationary_quantiles(self.model, self.regen, qs, int(self.c["n_quantile_cycles"]),
                                         self.stream.child("quantiles"), mapper=self.mapper)
                self._u = [float(x) for x in q]
            else:
                self._u = [float(x) for x in self.c["u_grid"]]
        return self._u

    def engine_kw(self) -> dict:
        kw = {"esc_S": float(self.c["esc_S"])}
        if self.c.get("esc_level") is not None:
            kw["esc_level"] = float(self.c["esc_level"])
        if self.c.get("cap") is not None:
            kw["cap"] = int(self.c["cap"])
        return kw


# ---------------------------------------------------------------------------
# targets


def _target_C(run: Run) -> dict:
    comp = estimate_C_components(run.model, run.regen, int(run.c["n_cycles"]), run.stream.child("C"),
                                 xi=run.xi, lambda_prime=run.xi_solution.lambda_prime, E_tau=run.E_tau(),
                                 min_escapes=int(run.c["min_escapes"]), mapper=run.mapper, **run.engine_kw())
    run.counts["C_cycles"] = comp.numerator.n_samples
    if comp.undecided_fraction > 0:
        run.warnings.append(f"undecided shifted cycles: {comp.undecided_fraction:.3g}")
    run._comp = comp
    return comp.C.to_dict()


def _ladder(run: Run):
    if run._ladder_stats is None:
        run._ladder_stats = ladder_stats(run.model.driver, run.xi, int(run.c["n_walks"]), run.stream.child("ladder"),
                                   mapper=run.mapper)
        run.counts["ladder_walks"] = run._ladder_stats.n_walks
    return run._ladder_stats


def _target_Cstar(run: Run) -> dict:
    return _ladder(run).cstar(run.xi_solution.lambda_prime).to_dict()


def _target_theta(run: Run) -> dict:
    est = _ladder(run).theta()
    lo, hi = est.ci95
    if not (0 < est.value <= 1):
        run.warnings.append(f"Theta estimate {est.value:.4g} outside (0, 1]")
    elif lo <= 0 or hi > 1:
        run.warnings.append("Theta confidence interval leaves (0, 1]")
    return est.to_dict()


def _lundberg(run: Run, u_grid):
    res = lundberg_bound(run.model, run.regen, u_grid, run.stream.child("lundberg"), xi=run.xi,
                         t=float(run.c["t"]), n_x=int(run.c["n_x"]), n_w=int(run.c["n_w"]),
                         n_w_cycles=int(run.c["n_w_cycles"]), n_zbar_cycles=int(run.c["n_zbar_cycles"]),
                         n_vbar=int(run.c["n_vbar"]), mapper=run.mapper)
    run.counts["lundberg_zbar_cycles"] = int(run.c["n_zbar_cycles"])
    return res


def _target_lundberg(run: Run) -> dict:
    grid = run.c.get("lundberg_u_grid") or run.u_grid()
    res = _lundberg(run, grid)
    run._lund = res
    write_csv(run.out / "lundberg.csv", [r.to_dict() for r in res.rows], LUNDBERG_COLUMNS, run.cfg.hash)
    return res.to_dict()


def _target_tailcurve(run: Run) -> dict:
    grid = run.u_grid()
    C_hat = None
    if run._comp is not None:
        C_hat = run._comp.C.value
    lund = run._lund
    rows = tail_curve(run.model, run.regen, grid, run.c["tail_method"], run.stream.child("tail"), xi=run.xi,
                      n_cycles=int(run.c["n_cycles"] if run.c["tail_method"] == "dual" else run.c["n_tau_cycles"]),
                      n_tau_cycles=int(run.c["n_tau_cycles"]), C_hat=C_hat, lundberg=lund, mapper=run.mapper)
    run.counts["tail_cycles"] = int(run.c["n_cycles"])
    write_csv(run.out / "tail_curve.csv", rows, TAIL_COLUMNS, run.cfg.hash)
    return {"rows": rows}


TARGET_FUNCS = {"C": _target_C, "Cstar": _target_Cstar, "theta": _target_theta, "lundberg": _target_lundberg,
                "tailcurve": _target_tailcurve}
TARGET_ORDER = ["C", "Cstar", "theta", "lundberg", "tailcurve"]


def _run_targets(run: Run, targets) -> tuple[dict, bool]:
    results = {}
    failed = False
    for name in TARGET_ORDER:
        if name not in targets:
            continue
        try:
            results[name] = TARGET_FUNCS[name](run)
        except OutputError:
            raise
        except SFPEError as exc:
            failed = True
            results[name] = {"failed": True, "error": type(exc).__name__, "message": str(exc)}
            run.warnings.append(f"{name} failed: {type(exc).__name__}: {exc}")
    if "C" in results and "Cstar" in results and not failed and run._comp is not None:
        results["decomposition"] = decompose_C(run._comp, _ladder(run))
    return results, failed


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve_xi(run: Run, args) -> int:
    cum = cumulant(run.model.driver)
    sol = run.xi_solution
    lo, hi = cum.domain
    print(f"xi = {sol.xi:#.10g}")
    print(f"lambda'(xi) = {sol.lambda_prime:#.10g}")
    print(f"Lambda(xi) = {cum.Lambda(sol.xi):.3e}")
    print(f"Lambda domain = ({lo:g}, {hi:g})")
    print(f"E[log A] = {run.model.driver.mean_logA():.10g}")
    for frac in H1_MARGINS:
        a = sol.xi * (1 + frac)
        try:
            val = f"{cum.lam(a):.6g}"
        except OutOfDomain:
            val = "inf"
        print(f"lambda(xi * {1 + frac:g}) = {val}")
    if run.model.kind == "Polynomial":
        h = poly_hypotheses(run.model, rng=run.stream.child("hypotheses").generator(0))
        print(f"coefficient moments finite = {str(h.moments_finite).lower()}")
        print(f"poly drift = {h.drift:.6g} +/- {h.drift_se:.2g} ({'ok' if h.drift_ok else 'VIOLATED'})")
    return EXIT_OK


def cmd_estimate(run: Run, args) -> int:
    targets = args.targets.split(",") if args.targets else list(run.c["targets"])
    bad = set(targets) - set(TARGET_FUNCS)
    if bad:
        raise SFPEError(f"unknown targets {sorted(bad)}")
    results, failed = _run_targets(run, targets)
    doc = {"xi": run.xi, "lambda_prime": run.xi_solution.lambda_prime, "seed": run.cfg.seed,
           "model": run.cfg.model, "estimates": results}
    write_json(run.out / "estimates.json", doc, run.cfg.hash)
    for name, r in results.items():
        if isinstance(r, dict) and "value" in r:
            lo, hi = r["ci95"]
            print(f"{name}: {r['value']:.6g} (95% CI {lo:.6g}, {hi:.6g})")
        elif isinstance(r, dict) and r.get("failed"):
            print(f"{name}: FAILED ({r['error']}: {r['message']})")
    return 3 if failed else EXIT_OK


def cmd_tail_curve(run: Run, args) -> int:
    return cmd_estimate_subset(run, ["tailcurve"])


def cmd_lundberg(run: Run, args) -> int:
    return cmd_estimate_subset(run, ["lundberg"])


def cmd_estimate_subset(run: Run, targets) -> int:
    results, failed = _run_targets(run, targets)
    write_json(run.out / f"{targets[0]}.json", {"xi": run.xi, "estimates": results}, run.cfg.hash)
    if failed:
        for r in results.values():
            if r.get("failed"):
                print(f"FAILED ({r['error']}: {r['message']})", file=sys.stderr)
        return 3
    print(f"wrote {run.out}")
    return EXIT_OK


def cmd_extremal_index(run: Run, args) -> int:
    theta = _target_theta(run)
    rows = [{"u": math.nan, "stat": "theta", "value": theta["value"], "stderr": theta["stderr"]}]
    if run.c.get("qu_u"):
        for r in theta_finite_u(run.model, run.regen, run.xi, run.c["qu_u"], int(run.c["qu_cycles"]),
                                run.stream.child("theta-u"), run.mapper):
            rows.append({"u": r["u"], "stat": "hit_over_ENu", "value": r["ratio"], "stderr": r["stderr"]})
    write_json(run.out / "extremal_index.json", {"xi": run.xi, "theta": theta, "finite_u": rows}, run.cfg.hash)
    write_csv(run.out / "extremal_index.csv", rows, DIAG_COLUMNS, run.cfg.hash)
    print(f"Theta = {theta['value']:.6g} +/- {theta['stderr']:.2g}")
    return EXIT_OK


def cmd_renewal_checks(run: Run, args) -> int:
    c = run.c
    s = run.stream.child("renewal-checks")
    rows = []
    v = float(c["theorem41_v"])
    zg = np.linspace(0.0, max(2 * math.log(v), 1.0), 41)
    U = renewal_function(run.model.driver, zg, int(c["n_walks"]), stream=s.child("U"), mapper=run.mapper)
    for z, val, se, lb in zip(U.grid, U.U_values, U.U_stderr, U.lorden()):
        rows.append({"u": float(z), "stat": "U", "value": float(val), "stderr": float(se)})
        rows.append({"u": float(z), "stat": "lorden", "value": float(lb), "stderr": 0.0})
    t41 = theorem41_check(run.model, v, c["theorem41_u"], int(c["n_paths"]), s.child("t41"), regen=run.regen,
                          renewal=U, mapper=run.mapper)
    for r in t41:
        rows.append({"u": r["u"], "stat": "E_Nu", "value": r["E_Nu"], "stderr": r["E_Nu_se"]})
        rows.append({"u": r["u"], "stat": "U_logv", "value": r["U_logv"], "stderr": r["U_logv_se"]})
        rows.append({"u": r["u"], "stat": "gap", "value": r["gap"], "stderr": r["gap_se"]})
    for u in c["qu_u"]:
        for cond in ("tau", "inf"):
            o = overshoot_distribution(run.model, run.regen, run.xi, float(u), int(c["n_hits"]), s.child("os"),
                                       conditioning=cond, mapper=run.mapper)
            rows.append({"u": float(u), "stat": f"overshoot_ks_{cond}", "value": o.ks_stat, "stderr": o.ks_pvalue})
            lr = o.log_ratios
            rows.append({"u": float(u), "stat": f"log_overshoot_mean_{cond}", "value": float(lr.mean()),
                         "stderr": float(lr.std(ddof=1) / math.sqrt(len(lr)))})
    qd = qu_diagnostic(run.model, run.regen, run.xi, c["qu_u"], int(c["qu_cycles"]), s.child("qu"),
                       n_cont=int(c["n_cont"]), max_hits=int(c["n_hits"]), mapper=run.mapper)
    rows.extend(qd.rows)
    write_csv(run.out / "renewal_checks.csv", rows, DIAG_COLUMNS, run.cfg.hash)
    print(f"wrote {run.out / 'renewal_checks.csv'}")
    return EXIT_OK


def _check(name, passed, statistic, threshold, **extra) -> dict:
    return {"check": name, "passed": bool(passed), "statistic": statistic, "threshold": threshold, **extra}


def cmd_validate(run: Run, args) -> int:
    c = run.c
    s = run.stream.child("validate")
    m = run.model
    xi = run.xi
    checks = []
    n_paths = int(c["validate_paths"])
    if n_paths <= 0:
        raise EmptyInput("validate_paths must be positive")

    cum = cumulant(m.driver)
    checks.append(_check("xi_root", abs(cum.Lambda(xi)) < 1e-10, abs(cum.Lambda(xi)), 1e-10))

    z = tilt_identity_stats(m.driver, xi, n_paths, s.child("tilt").generator(0))
    zmax = max(abs(v) for v in z.values())
    checks.append(_check("tilt_identity", zmax <= 4.0, zmax, 4.0))

    fh = fixed_horizon_check(m, xi, n_paths, int(c["validate_horizon"]), s.child("fixed-horizon"),
                             tilt_offset=float(c["tilt_offset"]))
    checks.append(_check("change_of_measure", fh["passed"], abs(fh["z"]), 3.0, tilt_offset=fh["tilt_offset"]))

    if m.kind in ("LetacE", "Ruin", "Linear"):
        p, n = int(c["identity_paths"]), int(c["identity_steps"])
        d = m.sample(s.child("identity").generator(0), p * n)
        draws = Draws(d.logA.reshape(p, n), d.B.reshape(p, n), d.D.reshape(p, n))
        v0 = np.abs(m.sample(s.child("identity").generator(1), p).B) + 1.0
        gap, cnt = identity_violation(m, v0, draws)
        checks.append(_check("pathwise_identity", gap <= 1e-9, gap, 1e-9, n_checked=cnt))

    # cycle representation against independent forward chains
    ob = simulate_cycles(m, run.regen, int(c["n_tau_cycles"]), s.child("rep"), EngineConfig(collect_states=True),
                         mapper=run.mapper)
    u_med = float(np.median(ob.states))
    ob2 = simulate_cycles(m, run.regen, int(c["n_tau_cycles"]), s.child("rep2"), EngineConfig(u_levels=(u_med,)),
                          mapper=run.mapper)
    p_cyc = cycle_stats(ob2).p_hat[0]
    rng = s.child("forward").generator(0)
    nf = min(n_paths, 50_000)
    vf = np.full(nf, float(np.median(ob.V0)))
    for _ in range(500):
        vf = m.apply(vf, m.sample(rng, nf))
    pf, pfse = batch_means((vf > u_med).astype(float))
    zrep = (p_cyc.value - pf) / math.hypot(p_cyc.stderr, pfse)
    checks.append(_check("representation", abs(zrep) <= 3.0, abs(zrep), 3.0, p_cycles=p_cyc.value, p_forward=pf))

    if run.regen.kind != "atom":
        checks.append(_check("minorization", ob2.violations == 0, ob2.violations, 0,
                             regen_checks=ob2.regen_checks, delta=run.regen.delta))

    if run.model.kind == "Polynomial":
        h = poly_hypotheses(run.model, rng=run.stream.child("hypotheses").generator(0))
        checks.append(_check("poly_drift", h.drift_ok, h.drift, 0.0, drift_se=h.drift_se))
    write_json(run.out / "validate.json", {"checks": checks}, run.cfg.hash)
    write_csv(run.out / "validate.csv", checks, ["check", "passed", "statistic", "threshold"], run.cfg.hash)
    for ch in checks:
        print(f"{'PASS' if ch['passed'] else 'FAIL'} {ch['check']}: {ch['statistic']:.4g} (threshold {ch['threshold']:g})")
    if not all(ch["passed"] for ch in checks):
        raise ValidationFailed("some checks failed")
    return EXIT_OK


COMMANDS = {
    "solve-xi": cmd_solve_xi,
    "estimate": cmd_estimate,
    "tail-curve": cmd_tail_curve,
    "extremal-index": cmd_extremal_index,
    "lundberg": cmd_lundberg,
    "validate": cmd_validate,
    "renewal-checks": cmd_renewal_checks,
}


def _dump_paths(run: Run, n: int = 5) -> None:
    """A few retained cycles per measure as CSV rows n,V,S,logA,B,D.
    Row n holds V_n, S_n and the draw that produced V_n; row 0 has empty
    driver columns. The last row applies the closing draw, so its V is
    the starting state of the next cycle."""
    rows = []
    for meas in ("original", "shifted"):
        cfg = EngineConfig(measure=meas, xi=run.xi, retain=True, **run.engine_kw())
        b = simulate_block(run.model, run.regen, cfg, run.stream.child("dump").child(meas).generator(0), n)
        for c, p in enumerate(b.paths):
            L = len(p.logA)
            V = np.append(p.states[:L], 0.0)
            d = Draws(p.logA[-1:], p.B[-1:], p.D[-1:], None, None if p.extra is None else p.extra[..., -1:])
            V[L] = run.model.apply(V[L - 1:L], d)[0] if L else V[0]
            S = np.concatenate([[0.0], np.cumsum(p.logA)])
            for i in range(L + 1):
                r = {"measure": meas, "cycle": c, "n": i, "V": float(V[i]), "S": float(S[i])}
                if i > 0:
                    r.update(logA=float(p.logA[i - 1]), B=float(p.B[i - 1]), D=float(p.D[i - 1]))
                rows.append(r)
    write_csv(run.out / "paths.csv", rows, ["measure", "cycle", "n", "V", "S", "logA", "B", "D"], run.cfg.hash)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfpe", description="Tail index and tail constant of SFPE solutions.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides SFPE_SEED and config)")
        sp.add_argument("--workers", type=int, default=None, help="worker processes (default: logical cores)")
        sp.add_argument("--out", default=None, help="output directory (default: config output)")
        sp.add_argument("--dump-paths", action="store_true", help="also write a few retained cycle paths")
        if name == "estimate":
            sp.add_argument("--targets", default=None, help="comma list from C,Cstar,theta,lundberg,tailcurve")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve_seed(cfg: RunConfig, flag: int | None) -> RunConfig:
    if flag is not None:
        return cfg.with_seed(flag)
    env = os.environ.get("SFPE_SEED")
    if env:
        return cfg.with_seed(int(env))
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    collector = _Collector()
    log.addHandler(collector)
    t0 = time.time()
    run = None
    code = EXIT_OK
    try:
        cfg = _resolve_seed(load_config(args.config), args.seed)
        out = ensure_dir(args.out or cfg.output)
        workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
        with _pool(workers) as mapper:
            run = Run(cfg, out, mapper, args.dump_paths)
            code = COMMANDS[args.command](run, args)
            if args.dump_paths:
                _dump_paths(run)
    except (NoRoot, DomainBoundary) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        code = exc.exit_code
    except SFPEError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        code = exc.exit_code
    finally:
        log.removeHandler(collector)
    if run is not None and args.command != "solve-xi":
        manifest = {
            "tool_version": __version__,
            "command": args.command,
            "exit_code": code,
            "wall_clock_s": round(time.time() - t0, 3),
            "sample_counts": run.counts,
            "warnings": run.warnings + collector.messages,
        }
        try:
            write_json(run.out / "manifest.json", manifest, run.cfg.hash)
        except OutputError as exc:
            print(f"OutputError: {exc}", file=sys.stderr)
            code = exc.exit_code
    return code


if __name__ == "__main__":
    sys.exit(main())
