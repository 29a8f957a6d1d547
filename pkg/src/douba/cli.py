"""``douba <command> --config path.json [--trace] [--snapshot-every S] [--out dir]``.

Exit codes: 0 on certified success, 1 on usage, config or I/O errors,
2 on numerical non-convergence or a violated bound (outputs are still
written). Relative paths inside a config resolve against the config's
directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io, plotting
from .barycenter import solve_alternating_tau_eq_lambda, solve_dual_ascent
from .eot import potentials_to_csv, solve_eot
from .errors import ConfigError, DoubaError
from .gaussian import tau_star_curve, w2_per_dim
from .measures import (
    BoxDomain,
    DiscreteMeasure,
    Grid,
    quantile_barycenter_1d,
    relative_entropy,
    sample,
    wasserstein1_1d,
    wasserstein2_1d,
)
from .npgd import NPGDConfig, cloud_certificate, initial_cloud, npgd_run
from .problem import BarycenterProblem

logger = logging.getLogger("douba")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


def threads() -> int:
    raw = os.environ.get("DOUBA_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError("DOUBA_THREADS", f"not an integer: {raw!r}") from exc
    if n < 1:
        raise ConfigError("DOUBA_THREADS", "must be at least 1")
    return n


def fan_out(fn, items):
    """Map ``fn`` over ``items`` on up to ``threads()`` workers, keeping order."""
    items = list(items)
    n = min(threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# config helpers
# ---------------------------------------------------------------------------


class Context:
    """Parsed command line plus the config file's directory."""

    def __init__(self, config: dict, base: Path, out: Path, trace: bool, snapshot_every: int):
        self.config = config
        self.base = base
        self.out = out
        self.trace = trace
        self.snapshot_every = snapshot_every

    def get(self, key, default=None, kind=float):
        if key not in self.config:
            if default is None:
                raise ConfigError(key, "missing required config key")
            return default
        value = self.config[key]
        try:
            if kind is float:
                if isinstance(value, bool):
                    raise TypeError
                value = float(value)
                if not np.isfinite(value):
                    raise ValueError
                return value
            if kind is int:
                if isinstance(value, bool) or int(value) != value:
                    raise TypeError
                return int(value)
            if kind is bool:
                if not isinstance(value, bool):
                    raise TypeError
                return value
            if kind is str:
                if not isinstance(value, str):
                    raise TypeError
                return value
            if kind is list:
                if not isinstance(value, list) or not value:
                    raise TypeError
                return value
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, f"expected {kind.__name__}, got {value!r}") from exc
        return value

    def path(self, value, key) -> Path:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a file path, got {value!r}")
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def floats(self, key, default=None):
        if key not in self.config:
            if default is None:
                raise ConfigError(key, "missing required config key")
            return list(default)
        values = self.config[key]
        try:
            if not isinstance(values, list) or not values:
                raise TypeError
            return [float(v) for v in values]
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, f"expected a nonempty list of numbers, got {values!r}") from exc


def _box(ctx: Context, fallback: DiscreteMeasure | None = None) -> BoxDomain:
    box = ctx.config.get("box")
    if box is None:
        if fallback is not None and fallback.grid is not None:
            return fallback.grid.domain
        raise ConfigError("box", "missing; needed when the first marginal has no grid sidecar")
    try:
        return BoxDomain(box["lo"], box["hi"])
    except (KeyError, TypeError) as exc:
        raise ConfigError("box", 'expected {"lo": [...], "hi": [...]}') from exc
    except DoubaError as exc:
        raise ConfigError("box", str(exc)) from exc


def _marginals(ctx: Context, key="marginals"):
    paths = ctx.get(key, kind=list)
    return [io.read_measure(ctx.path(p, key)) for p in paths]


def _problem(ctx: Context, marginals, domain, lam, tau) -> BarycenterProblem:
    weights = ctx.floats("weights", [1.0 / len(marginals)] * len(marginals))
    try:
        return BarycenterProblem(marginals, weights, lam, tau, domain)
    except DoubaError as exc:
        raise ConfigError("marginals" if "marginal" in str(exc) else "weights", str(exc)) from exc


def _grid(ctx: Context, domain: BoxDomain) -> Grid:
    default = 200 if domain.dim == 1 else 64
    cells = ctx.config.get("grid_cells", default)
    try:
        return Grid(domain, tuple(np.broadcast_to(np.atleast_1d(cells), (domain.dim,)).astype(int)))
    except (DoubaError, ValueError) as exc:
        raise ConfigError("grid_cells", str(exc)) from exc


def _solve(problem, grid, solver, tol, max_iter, step=None, trace=False):
    if solver == "auto":
        solver = "alternating" if abs(problem.tau - problem.lam) < 1e-12 else "dual_ascent"
    if solver == "alternating":
        return solve_alternating_tau_eq_lambda(problem, grid, tol=tol, max_iter=max_iter, trace=trace)
    if solver == "dual_ascent":
        return solve_dual_ascent(problem, grid, step=step, tol=tol, max_iter=max_iter, trace=trace)
    raise ConfigError("solver", f"expected 'dual_ascent', 'alternating' or 'auto', got {solver!r}")


def _ms(t0) -> int:
    return int(round(1000 * (time.perf_counter() - t0)))


def _nan_to_none(v):
    return None if v is None or not np.isfinite(v) else float(v)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

BARYCENTER_KEYS = {
    "marginals", "weights", "lambda", "tau", "grid_cells", "box", "step", "tol", "max_iter",
    "solver", "seed", "quantile_reference",
}


def cmd_barycenter(ctx: Context) -> int:
    io.check_keys(ctx.config, BARYCENTER_KEYS, ("marginals", "lambda", "tau"))
    t0 = time.perf_counter()
    marginals = _marginals(ctx)
    domain = _box(ctx, marginals[0])
    problem = _problem(ctx, marginals, domain, ctx.get("lambda"), ctx.get("tau"))
    grid = _grid(ctx, domain)
    step = ctx.get("step", kind=float) if "step" in ctx.config else None
    res = _solve(
        problem, grid, ctx.get("solver", "auto", kind=str), ctx.get("tol", 1e-9),
        ctx.get("max_iter", 100_000, kind=int), step, ctx.trace,
    )
    bary = res.barycenter
    io.write_measure(ctx.out / "barycenter.csv", bary)
    extra = {
        "converged": bool(res.converged),
        "grad_norm": res.grad_norm,
        "solver": res.solver,
        "mean": bary.mean().tolist(),
        "variance": float(bary.variance()),
    }
    reference = None
    if ctx.get("quantile_reference", False, kind=bool):
        if domain.dim != 1:
            raise ConfigError("quantile_reference", "only available in 1D")
        reference = quantile_barycenter_1d(marginals, problem.weights)
        io.write_measure(ctx.out / "quantile_barycenter.csv", reference)
        extra["w2_to_quantile"] = wasserstein2_1d(bary, reference)
    if ctx.trace:
        io.write_rows(ctx.out / "trace.csv", ["iter", "objective", "grad_norm", "certificate_upper"], res.trace)
        its = [r[0] for r in res.trace]
        plotting.plot_trace(ctx.out / "trace", its, [r[2] for r in res.trace], "dual gradient sup-norm")
    if domain.dim == 1:
        title = f"lambda={problem.lam:g}, tau={problem.tau:g}"
        plotting.plot_barycenter_1d(ctx.out / "barycenter", marginals, bary, reference, title)
    elif domain.dim == 2:
        plotting.plot_barycenter_2d(ctx.out / "barycenter", bary, marginals)
    io.write_summary(
        ctx.out / "summary.json", res.objective, _nan_to_none(res.certificate_upper), res.iterations, _ms(t0), **extra
    )
    return EXIT_OK if res.converged else EXIT_NUMERICAL


NPGD_KEYS = {
    "m", "eta", "lambda", "tau", "iterations", "seed", "box", "marginals", "weights", "init",
    "eot_tol", "eot_max_iter", "diagnostic_cells", "certificate",
}


def cmd_npgd(ctx: Context) -> int:
    io.check_keys(ctx.config, NPGD_KEYS, ("m", "eta", "lambda", "tau", "iterations", "seed", "box", "marginals", "init"))
    t0 = time.perf_counter()
    marginals = _marginals(ctx)
    domain = _box(ctx)
    lam, tau = ctx.get("lambda"), ctx.get("tau")
    problem = _problem(ctx, marginals, domain, lam, tau)
    init = io.read_measure(ctx.path(ctx.get("init", kind=str), "init"))
    try:
        config = NPGDConfig(
            m=ctx.get("m", kind=int), eta=ctx.get("eta"), lam=lam, tau=tau,
            iterations=ctx.get("iterations", kind=int), seed=ctx.get("seed", kind=int), init=init,
            eot_tol=ctx.get("eot_tol", 1e-9), eot_max_iter=ctx.get("eot_max_iter", 10_000, kind=int),
        )
    except DoubaError as exc:
        raise ConfigError("npgd", str(exc)) from exc
    result = npgd_run(problem, config, snapshot_every=ctx.snapshot_every)
    cloud = result.cloud
    io.write_cloud(ctx.out / "cloud.csv", cloud.positions)
    rows = [(r.iteration, r.g_lambda, r.drift_sup, r.mean_disp) for r in result.trace]
    io.write_rows(ctx.out / "trace.csv", ["iter", "G_lambda", "drift_sup", "mean_disp"], rows)
    for snap in result.snapshots:
        io.write_cloud(ctx.out / "snapshots" / f"cloud_{snap.step_count:06d}.csv", snap.positions)

    start = initial_cloud(problem, config, np.random.default_rng(config.seed))
    extra = {"warm_start_gap": result.warm_start_gap}
    cert_final = None
    if tau > 0 and ctx.get("certificate", True, kind=bool):
        default = 400 if domain.dim == 1 else 128
        cells = int(ctx.get("diagnostic_cells", default, kind=int))
        grid = Grid(domain, (cells,) * domain.dim)
        bandwidth = float(np.sqrt(config.eta * tau))
        cert_final = cloud_certificate(cloud, problem, grid, bandwidth)
        extra["certificate_initial"] = cloud_certificate(start, problem, grid, bandwidth)
        extra["kde_bandwidth"] = bandwidth
    if domain.dim == 2:
        plotting.plot_cloud(ctx.out / "cloud", cloud.positions, marginals, start.positions,
                            f"NPGD after {config.iterations} steps, tau={tau:g}")
    if rows:
        plotting.plot_trace(ctx.out / "trace", [r[0] for r in rows], [r[1] for r in rows], "G_lambda", logy=False)
    objective = rows[-1][1] if rows else None
    io.write_summary(ctx.out / "summary.json", objective, cert_final, config.iterations, _ms(t0), **extra)
    return EXIT_OK if result.warm_start_gap <= 10 * config.eot_tol else EXIT_NUMERICAL


RATE_KEYS = {"marginals", "weights", "lambda", "tau", "n_list", "trials", "seed", "grid_cells", "box", "tol", "max_iter", "solver"}


def fit_loglog(x, y):
    """Least-squares ``(slope, intercept)`` of ``log y`` on ``log x``."""
    slope, intercept = np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)
    return float(slope), float(intercept)


def trial_seed(seed: int, n: int, trial: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, n, trial, k])


def cmd_rate_study(ctx: Context) -> int:
    io.check_keys(ctx.config, RATE_KEYS, ("marginals", "lambda", "tau", "n_list", "trials", "seed"))
    t0 = time.perf_counter()
    marginals = _marginals(ctx)
    domain = _box(ctx, marginals[0])
    problem = _problem(ctx, marginals, domain, ctx.get("lambda"), ctx.get("tau"))
    grid = _grid(ctx, domain)
    ns = [int(v) for v in ctx.floats("n_list")]
    trials = ctx.get("trials", kind=int)
    seed = ctx.get("seed", kind=int)
    solver = ctx.get("solver", "auto", kind=str)
    tol, max_iter = ctx.get("tol", 1e-10), ctx.get("max_iter", 100_000, kind=int)
    if any(n < 1 for n in ns) or trials < 1:
        raise ConfigError("n_list", "sample sizes and trial count must be positive")

    star = _solve(problem, grid, solver, tol, max_iter)
    converged = [star.converged]

    def one(job):
        n, trial = job
        emp = [sample(nu, n, trial_seed(seed, n, trial, k)) for k, nu in enumerate(marginals)]
        res = _solve(problem.with_params(marginals=emp), grid, solver, tol, max_iter)
        return n, trial, relative_entropy(res.barycenter, star.barycenter), res.converged

    jobs = [(n, t) for n in ns for t in range(trials)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        results = fan_out(one, jobs)
    rows = [(n, t, kl) for n, t, kl, _ in results]
    converged += [c for *_, c in results]
    io.write_rows(ctx.out / "rate.csv", ["n", "trial", "kl"], rows)
    means = [float(np.mean([kl for n2, _, kl in rows if n2 == n])) for n in ns]
    slope, intercept = fit_loglog(ns, means) if len(ns) > 1 else (float("nan"), float("nan"))
    plotting.plot_rate(ctx.out / "rate", ns, np.array(means), slope, intercept)
    io.write_summary(
        ctx.out / "summary.json", None, _nan_to_none(star.certificate_upper), star.iterations, _ms(t0),
        slope=_nan_to_none(slope), intercept=_nan_to_none(intercept), n_list=ns, mean_kl=means,
        all_converged=bool(all(converged)),
    )
    return EXIT_OK if all(converged) else EXIT_NUMERICAL


GAUSSIAN_KEYS = {"a", "lambda_min", "lambda_max", "lambda_count", "tau_min", "tau_max", "tau_count", "seed"}


def cmd_gaussian_map(ctx: Context) -> int:
    io.check_keys(ctx.config, GAUSSIAN_KEYS)
    t0 = time.perf_counter()
    a = ctx.get("a", 1.0)
    lambdas = np.linspace(ctx.get("lambda_min", 0.0), ctx.get("lambda_max", 2.0), ctx.get("lambda_count", 81, kind=int))
    taus = np.linspace(ctx.get("tau_min", 0.0), ctx.get("tau_max", 1.0), ctx.get("tau_count", 81, kind=int))
    if not a > 0:
        raise ConfigError("a", "variance must be positive")
    if lambdas.min() < 0 or taus.min() < 0:
        raise ConfigError("lambda_min" if lambdas.min() < 0 else "tau_min", "must be nonnegative")
    rows = fan_out(lambda lam: [(lam, tau, w2_per_dim(a, lam, tau)) for tau in taus], lambdas)
    rows = [r for block in rows for r in block]
    io.write_rows(ctx.out / "heatmap.csv", ["lambda", "tau", "w2_distance"], rows)
    curve = tau_star_curve(lambdas, a)
    io.write_rows(ctx.out / "tau_star.csv", ["lambda", "tau_star"], curve)
    dist = np.array([r[2] for r in rows]).reshape(len(lambdas), len(taus))
    plotting.plot_heatmap(ctx.out / "heatmap", lambdas, taus, dist, curve)
    on_curve = max(w2_per_dim(a, lam, t) for lam, t in curve)
    io.write_summary(ctx.out / "summary.json", None, None, 0, _ms(t0), max_distance_on_curve=on_curve)
    return EXIT_OK


STABILITY_KEYS = {
    "marginals", "weights", "lambda", "tau", "deltas", "seed", "grid_cells", "box", "tol", "max_iter", "solver",
}


def perturb(nu: DiscreteMeasure, delta: float, rng, domain: BoxDomain):
    """Move every atom by at most ``delta`` per coordinate; returns the measure and its displacements."""
    moved = domain.project(nu.points + rng.uniform(-delta, delta, size=nu.points.shape))
    disp = np.linalg.norm(moved - nu.points, axis=1)
    return DiscreteMeasure(moved, nu.weights, domain=domain), disp


def cmd_stability_probe(ctx: Context) -> int:
    io.check_keys(ctx.config, STABILITY_KEYS, ("marginals", "lambda", "tau", "deltas", "seed"))
    t0 = time.perf_counter()
    marginals = _marginals(ctx)
    domain = _box(ctx, marginals[0])
    tau = ctx.get("tau")
    problem = _problem(ctx, marginals, domain, ctx.get("lambda"), tau)
    grid = _grid(ctx, domain)
    deltas = ctx.floats("deltas")
    if any(d < 0 for d in deltas):
        raise ConfigError("deltas", "displacements must be nonnegative")
    seed = ctx.get("seed", kind=int)
    solver = ctx.get("solver", "auto", kind=str)
    tol, max_iter = ctx.get("tol", 1e-10), ctx.get("max_iter", 100_000, kind=int)
    # c(x, .) = |x - .|^2 / 2 is Lipschitz with constant diam(X) on the box
    L = domain.diameter
    star = _solve(problem, grid, solver, tol, max_iter)
    rows, details = [], []
    ok = star.converged
    for i, delta in enumerate(deltas):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        pert, w1 = [], 0.0
        for wk, nu in zip(problem.weights, marginals):
            moved, disp = perturb(nu, delta, rng, domain)
            pert.append(moved)
            w1 += wk * (wasserstein1_1d(nu, moved) if domain.dim == 1 else float(nu.weights @ disp))
        res = _solve(problem.with_params(marginals=pert), grid, solver, tol, max_iter)
        kl = relative_entropy(res.barycenter, star.barycenter)
        bound = 2 * L / tau * w1
        # both solves are accurate to ~tol in potential, hence in tau * KL
        violated = kl > bound + 10 * tol
        ok = ok and res.converged and not violated
        rows.append((delta, w1, kl))
        details.append({"delta": delta, "w1_sum": w1, "kl": kl, "bound": bound, "violated": bool(violated)})
    io.write_rows(ctx.out / "stability.csv", ["delta", "w1_sum", "kl"], rows)
    plotting.plot_stability(ctx.out / "stability", deltas, [r[2] for r in rows], [d["bound"] for d in details])
    io.write_summary(
        ctx.out / "summary.json", star.objective, _nan_to_none(star.certificate_upper), star.iterations, _ms(t0),
        lipschitz=L, w1_kind="exact" if domain.dim == 1 else "displacement_upper_bound", probes=details,
    )
    return EXIT_OK if ok else EXIT_NUMERICAL


EOT_KEYS = {"mu", "nu", "lambda", "tol", "max_iter", "seed"}


def cmd_eot(ctx: Context) -> int:
    io.check_keys(ctx.config, EOT_KEYS, ("mu", "nu", "lambda"))
    t0 = time.perf_counter()
    mu = io.read_measure(ctx.path(ctx.get("mu", kind=str), "mu"))
    nu = io.read_measure(ctx.path(ctx.get("nu", kind=str), "nu"))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = solve_eot(mu, nu, ctx.get("lambda"), tol=ctx.get("tol", 1e-9), max_iter=ctx.get("max_iter", 100_000, kind=int))
    potentials_to_csv(ctx.out / "phi.csv", sol.phi)
    potentials_to_csv(ctx.out / "psi.csv", sol.psi)
    if mu.dim == 1:
        plotting.plot_plan(ctx.out / "plan", sol.plan(), mu.points[:, 0], nu.points[:, 0])
    io.write_summary(
        ctx.out / "summary.json", sol.cost, None, sol.iterations, _ms(t0),
        converged=bool(sol.converged), marginal_error=sol.marginal_error,
    )
    return EXIT_OK if sol.converged else EXIT_NUMERICAL


COMMANDS = {
    "barycenter": cmd_barycenter,
    "npgd": cmd_npgd,
    "rate-study": cmd_rate_study,
    "gaussian-map": cmd_gaussian_map,
    "stability-probe": cmd_stability_probe,
    "eot": cmd_eot,
}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; 2 is reserved for numerical failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="douba", description="Doubly regularized entropic Wasserstein barycenters.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--trace", action="store_true", help="write per-iteration trace CSVs")
    parser.add_argument("--snapshot-every", type=int, default=0, metavar="S", help="NPGD snapshot period")
    parser.add_argument("--out", default="out", help="output directory (default: ./out)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="douba: %(message)s")
    if args.snapshot_every < 0:
        parser.error("--snapshot-every must be nonnegative")
    try:
        config_path = Path(args.config)
        config = io.load_json(config_path)
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(str(out), f"cannot create output directory ({exc.strerror or exc})") from exc
        ctx = Context(config, config_path.resolve().parent, out, args.trace, args.snapshot_every)
        code = COMMANDS[args.command](ctx)
    except ConfigError as exc:
        print(f"douba: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"douba: error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DoubaError as exc:
        print(f"douba: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if code == EXIT_NUMERICAL:
        print("douba: finished without certified convergence or with a violated bound", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())


def main_entry() -> None:
    sys.exit(main())
