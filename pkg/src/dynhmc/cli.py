"""Command-line front end: sampling runs, pmf queries, verification, benchmarks.

Subcommands: ``sample | verify | pmf | conditions | bench``.  Configuration is
a plain JSON document; command-line flags override file keys, and the
``NUTS_SEED`` environment variable overrides the config seed (but not an
explicit ``--seed``).  The seed defaults to a fixed constant, never the
clock: reproducibility over convenience.  Exit codes: 0 ok, 1 verification
failure, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .kernels import KernelConfig, make_kernel, nuts_exact_pmf
from .targets import MassMatrix, PhasePoint, Target, builtin_target, momentum_refresh
from . import verify as verify_mod
from .verify import stepsize_conditions

DEFAULT_SEED = 20230710
EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_CONFIG = 2
EXIT_IO = 3

SUITES = (
    "symmetry",
    "balance",
    "accessibility",
    "invariance",
    "equivalence",
    "drift",
    "tails",
    "conditions",
    "degeneracy",
    "ergodicity",
    "all",
)


class ConfigError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def _resolve_seed(args, config: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("NUTS_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"NUTS_SEED must be an integer, got {env!r}") from exc
    if "seed" in config:
        return int(config["seed"])
    return DEFAULT_SEED


def _build_mass(spec: dict | None, dim: int) -> MassMatrix:
    if not spec or spec.get("kind", "identity") == "identity":
        return MassMatrix.identity(dim)
    kind = spec["kind"]
    if kind == "diagonal":
        if "diag" not in spec:
            raise ConfigError("mass.kind=diagonal requires key mass.diag")
        return MassMatrix.diagonal(np.asarray(spec["diag"], dtype=float))
    if kind == "dense":
        if "matrix" not in spec:
            raise ConfigError("mass.kind=dense requires key mass.matrix")
        mat = np.asarray(spec["matrix"], dtype=float).reshape(dim, dim)
        return MassMatrix.dense(mat)
    raise ConfigError(f"unknown mass.kind {kind!r}")


def _build_target(config: dict) -> Target:
    spec = config.get("target", {})
    kind = spec.get("kind", "standard_gaussian")
    dim = int(spec.get("dim", 1))
    if dim < 1:
        raise ConfigError(f"target.dim must be >= 1, got {dim}")
    sigma = spec.get("sigma")
    if sigma is not None:
        sigma = np.asarray(sigma, dtype=float).reshape(dim, dim)
    try:
        return builtin_target(kind, dim=dim, sigma=sigma, a5=float(spec.get("a5", 0.5)))
    except ValueError as exc:
        raise ConfigError(f"target: {exc}") from exc


def _build_kernel_config(config: dict, dim: int) -> KernelConfig:
    spec = config.get("kernel", {})
    h = float(spec.get("h", 0.5))
    if not (h > 0 and math.isfinite(h)):
        raise ConfigError(f"kernel.h must be positive and finite, got {h}")
    mass = _build_mass(spec.get("mass"), dim)
    weights = spec.get("weights")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
    try:
        return KernelConfig(
            kind=spec.get("kind", "nuts_iterative"),
            h=h,
            mass=mass,
            k_m=int(spec.get("k_m", 10)),
            t=int(spec.get("t", 1)),
            weights=weights,
        )
    except ValueError as exc:
        raise ConfigError(f"kernel: {exc}") from exc


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def cmd_sample(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    target = _build_target(config)
    cfg = _build_kernel_config(config, target.dim)
    chains = int(args.chains if args.chains is not None else config.get("chains", 1))
    iters = int(args.iters if args.iters is not None else config.get("iters", 1000))
    if chains < 1 or iters < 0:
        raise ConfigError(f"chains/iters must be positive, got {chains}/{iters}")
    out_path = args.out or config.get("out")

    kernel = make_kernel(target, cfg)
    d = target.dim
    header = (
        ["chain", "iter"] + [f"q{i + 1}" for i in range(d)] + ["jf", "kf", "ngrad", "diverged"]
    )
    rows = [",".join(header)]
    depth_hist: dict[int, int] = {}
    n_div = 0
    n_grad = 0
    n_accept = 0
    n_accept_total = 0
    t0 = time.perf_counter()
    moments = np.zeros(d)
    moments2 = np.zeros(d)
    for chain in range(chains):
        rng = np.random.default_rng(np.random.SeedSequence([seed, chain]))
        q0 = config.get("q0")
        q = np.zeros(d) if q0 is None else np.asarray(q0, dtype=float)
        for it in range(iters):
            q, info = kernel(q, rng)
            depth_hist[info.k_f] = depth_hist.get(info.k_f, 0) + 1
            n_div += int(info.diverged)
            n_grad += info.n_grad
            if info.accepted is not None:
                n_accept_total += 1
                n_accept += int(info.accepted)
            moments += q
            moments2 += q * q
            rows.append(
                ",".join(
                    [str(chain), str(it)]
                    + [_fmt(v) for v in q]
                    + [str(info.j_f), str(info.k_f), str(info.n_grad), str(int(info.diverged))]
                )
            )
    wall = time.perf_counter() - t0
    csv_text = "\n".join(rows) + "\n"

    total = max(chains * iters, 1)
    summary = {
        "version": __version__,
        "seed": seed,
        "config": {**config, "chains": chains, "iters": iters},
        "depth_histogram": {str(k): v for k, v in sorted(depth_hist.items())},
        "divergences": n_div,
        "acceptance_rate": (n_accept / n_accept_total) if n_accept_total else None,
        "moment_estimates": {
            "mean": (moments / total).tolist(),
            "second": (moments2 / total).tolist(),
        },
        "wall_time_s": wall,
        "grad_evals": n_grad,
        "grad_evals_per_s": n_grad / wall if wall > 0 else None,
    }
    try:
        if out_path:
            with open(out_path, "w") as fh:
                fh.write(csv_text)
            with open(out_path + ".summary.json", "w") as fh:
                json.dump(summary, fh, indent=2)
        else:
            sys.stdout.write(csv_text)
            json.dump(summary, sys.stderr, indent=2)
            sys.stderr.write("\n")
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _default_anchors(dim: int, mass: MassMatrix, n: int, rng: np.random.Generator):
    out = []
    for _ in range(n):
        q = 1.5 * rng.standard_normal(dim)
        p = momentum_refresh(mass, rng)
        out.append(PhasePoint(q, p))
    return out


def _run_suite(name: str, seed: int, mutate: str | None) -> list[verify_mod.CheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    if name == "symmetry":
        for dim in (1, 2):
            target = builtin_target("standard_gaussian", dim)
            mass = MassMatrix.identity(dim)
            cfg = KernelConfig("nuts_iterative", h=1.0, mass=mass, k_m=3)
            anchors = _default_anchors(dim, mass, 10, rng)
            reports.append(verify_mod.check_ph_symmetry(target, cfg, anchors, seed=seed))
    elif name == "balance":
        target = builtin_target("standard_gaussian", 2)
        mass = MassMatrix.identity(2)
        cfg = KernelConfig("nuts_iterative", h=0.5, mass=mass, k_m=5)
        anchors = _default_anchors(2, mass, 50, rng)
        reports.append(verify_mod.check_detailed_balance(target, cfg, anchors, seed=seed))
    elif name == "accessibility":
        trees = verify_mod.random_weight_trees(100, 5, rng)
        reports.append(verify_mod.check_accessibility(trees, seed=seed))
    elif name == "invariance":
        target = builtin_target("standard_gaussian", 1)
        cfg = KernelConfig("nuts_iterative", h=0.5, mass=MassMatrix.identity(1), k_m=3)
        reports.append(verify_mod.stationarity_polar_exact(target, cfg, n_scan=8192, seed=seed))
        # step size chosen large enough that the always-swap mutation is
        # statistically visible at this sample size (negative-control power)
        target5 = builtin_target("standard_gaussian", 5)
        cfg5 = KernelConfig("nuts_iterative", h=1.0, mass=MassMatrix.identity(5), k_m=4)
        reports.append(
            verify_mod.statistical_invariance(target5, cfg5, n=20_000, seed=seed, mutate=mutate)
        )
    elif name == "equivalence":
        from .kernels import nuts_recursive_index_batch

        target = builtin_target("standard_gaussian", 2)
        mass = MassMatrix.identity(2)
        worst_p = 1.0
        n = 20_000
        for k_m in (1, 2, 3):
            cfg = KernelConfig("nuts_recursive", h=0.8, mass=mass, k_m=k_m)
            for _ in range(6):
                x0 = _default_anchors(2, mass, 1, rng)[0]
                pmf = nuts_exact_pmf(target, cfg, x0)
                if mutate == "always-swap":
                    # negative control: sample with the broken progressive swap
                    counts = _mutated_index_counts(target, cfg, x0, n, rng)
                else:
                    idx = nuts_recursive_index_batch(target, cfg, x0, n, rng)
                    counts = {}
                    for j in idx.tolist():
                        counts[j] = counts.get(j, 0) + 1
                worst_p = min(worst_p, verify_mod.chi2_gof(counts, pmf.probs_dict(), n))
        reports.append(
            verify_mod.CheckReport(
                check="iterative_recursive_equivalence",
                passed=worst_p >= 1e-3,
                tolerance=1e-3,
                violation=1.0 - worst_p,
                seed=seed,
                config={"draws": n, "mutate": mutate},
                details=[{"min_chi2_pvalue": worst_p}],
            )
        )
    elif name == "drift":
        target = builtin_target("standard_gaussian", 2)
        cfg = KernelConfig("nuts_iterative", h=0.2, mass=MassMatrix.identity(2), k_m=4)
        est = verify_mod.drift_estimate(target, cfg, a=1.0, radius=20.0, n=2000, seed=seed)
        reports.append(
            verify_mod.CheckReport(
                check="drift",
                passed=est.ci_high < 1.0,
                tolerance=1.0,
                violation=est.ci_high,
                seed=seed,
                config={"a": est.a, "radius": est.radius, "n": est.n},
                details=[{"ratio": est.ratio, "ci": [est.ci_low, est.ci_high]}],
            )
        )
    elif name == "tails":
        target = builtin_target("standard_gaussian", 2)
        s_bar = verify_mod.tail_step_bound(1.0, 1.0, 1.0)
        cfg = KernelConfig("nuts_iterative", h=s_bar, mass=MassMatrix.identity(2), k_m=1)
        reports.append(
            verify_mod.tail_conditions(target, cfg, radius=1e3, gamma=2.0 / 3.0, n=50, seed=seed)
        )
    elif name == "conditions":
        worked = [
            ("doubling_stability", stepsize_conditions(l1=1.0, h=0.1, k_m=1)["doubling_stability"]["pass"], True),
            ("doubling_stability", stepsize_conditions(l1=1.0, h=0.2, k_m=1)["doubling_stability"]["pass"], False),
            ("trajectory_uniqueness", stepsize_conditions(l1=1.0, h=1.0, t=2)["trajectory_uniqueness"]["pass"], True),
            ("trajectory_uniqueness", stepsize_conditions(l1=1.0, h=1.5, t=2)["trajectory_uniqueness"]["pass"], False),
        ]
        ok = all(got == want for _, got, want in worked)
        reports.append(
            verify_mod.CheckReport(
                check="stepsize_conditions",
                passed=ok,
                tolerance=0.0,
                violation=0.0 if ok else 1.0,
                seed=seed,
                details=[{"case": c, "got": g, "want": w} for c, g, w in worked],
            )
        )
    elif name == "degeneracy":
        target = builtin_target("standard_gaussian", 2)
        cfg = KernelConfig("nuts_iterative", h=0.7, mass=MassMatrix.identity(2), k_m=2)
        reports.append(
            verify_mod.uturn_degeneracy_scan(target, cfg, np.array([1.0, -0.5]), n=500, seed=seed)
        )
    elif name == "ergodicity":
        target = builtin_target("standard_gaussian", 2)
        cfg = KernelConfig("nuts_iterative", h=0.5, mass=MassMatrix.identity(2), k_m=6)
        reports.append(
            verify_mod.ergodicity_run(
                target,
                cfg,
                iters=20_000,
                seed=seed,
                q0=np.array([50.0, 0.0]),
                ref_mean=np.zeros(2),
                ref_second=np.ones(2),
            )
        )
    else:
        raise ConfigError(f"unknown suite {name!r}")
    return reports


def _mutated_index_counts(target, cfg, x0, n, rng):
    from .kernels import nuts_transition_recursive

    counts: dict[int, int] = {}
    for _ in range(n):
        _, info = nuts_transition_recursive(target, cfg, x0, rng, mutate="always-swap")
        counts[info.j_f] = counts.get(info.j_f, 0) + 1
    return counts


def cmd_verify(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    suite = args.suite or "all"
    if suite not in SUITES:
        print(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_CONFIG
    names = [s for s in SUITES if s != "all"] if suite == "all" else [suite]
    reports = []
    for name in names:
        reports.extend(_run_suite(name, seed, args.mutate))
    payload = {
        "version": __version__,
        "seed": seed,
        "suite": suite,
        "all_pass": all(r.passed for r in reports),
        "checks": [r.to_dict() for r in reports],
    }
    text = json.dumps(payload, indent=2, default=str)
    try:
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text + "\n")
        else:
            print(text)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.check} violation={r.violation:.3g}", file=sys.stderr)
    return EXIT_OK if payload["all_pass"] else EXIT_VERIFY_FAIL


def cmd_pmf(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    target = _build_target(config)
    cfg = _build_kernel_config(config, target.dim)
    if cfg.k_m > 8:
        print(f"k_m = {cfg.k_m} exceeds the exact-enumeration budget (8)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        q = np.asarray([float(v) for v in args.q.split(",")], dtype=float)
    except ValueError:
        print(f"--q must be comma-separated floats, got {args.q!r}", file=sys.stderr)
        return EXIT_CONFIG
    if q.size != target.dim:
        print(f"--q has {q.size} entries, target.dim is {target.dim}", file=sys.stderr)
        return EXIT_CONFIG
    if args.p:
        p = np.asarray([float(v) for v in args.p.split(",")], dtype=float)
        if p.size != target.dim:
            print(f"--p has {p.size} entries, target.dim is {target.dim}", file=sys.stderr)
            return EXIT_CONFIG
    else:
        p = momentum_refresh(cfg.mass, np.random.default_rng(seed))
    pmf = nuts_exact_pmf(target, cfg, PhasePoint(q, p))
    total = pmf.total()
    payload = {
        "q": q.tolist(),
        "p": p.tolist(),
        "h": cfg.h,
        "k_m": cfg.k_m,
        "entries": [
            {"j": j, "prob": pr, "position": pos.tolist()} for j, pr, pos in pmf.entries
        ],
        "sum": total,
    }
    print(json.dumps(payload, indent=2))
    if abs(total - 1.0) > 1e-12:
        print(f"pmf sum {total} deviates from 1 by more than 1e-12", file=sys.stderr)
        return EXIT_VERIFY_FAIL
    return EXIT_OK


def cmd_conditions(args) -> int:
    config = _load_config(args.config)
    spec = config.get("conditions", {})

    def fget(key):
        return float(spec[key]) if key in spec else None

    def iget(key):
        return int(spec[key]) if key in spec else None

    report = stepsize_conditions(
        l1=fget("l1"), h=fget("h"), k_m=iget("k_m"), t=iget("t"), m1=fget("m1"), a1=fget("a1")
    )
    requested = spec.get("require", ["doubling_stability", "trajectory_uniqueness", "tail_step_bound"])
    missing = [k for k in requested if "missing" in report.get(k, {})]
    print(json.dumps(report, indent=2))
    if missing:
        print(f"missing constants for: {', '.join(missing)}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_trajectory(args) -> int:
    from .leapfrog import ContractionViolated, NoConvergence, trajectory_solve

    config = _load_config(args.config)
    target = _build_target(config)
    cfg = _build_kernel_config(config, target.dim)
    try:
        q0 = np.asarray([float(v) for v in args.q0.split(",")], dtype=float)
        q_t = np.asarray([float(v) for v in args.qT.split(",")], dtype=float)
    except ValueError:
        print("--q0/--qT must be comma-separated floats", file=sys.stderr)
        return EXIT_CONFIG
    if q0.size != target.dim or q_t.size != target.dim:
        print(f"endpoint dimension does not match target.dim = {target.dim}", file=sys.stderr)
        return EXIT_CONFIG
    if args.steps < 1:
        print(f"--steps must be >= 1, got {args.steps}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        sol = trajectory_solve(target, cfg.params, q0, q_t, args.steps)
    except ContractionViolated as exc:
        print(f"step-size condition violated: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoConvergence as exc:
        print(f"no convergence: {exc}", file=sys.stderr)
        return EXIT_VERIFY_FAIL
    print(
        json.dumps(
            {
                "p0": sol.p0.tolist(),
                "positions": sol.positions.tolist(),
                "momenta": sol.momenta.tolist(),
                "iterations": sol.iterations,
                "residual": sol.residual,
                "contraction_observed": sol.contraction_observed,
                "roundtrip_error": sol.roundtrip_error,
            },
            indent=2,
        )
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    dim = args.dim
    steps = args.steps
    seed = _resolve_seed(args, {})
    target = builtin_target("standard_gaussian", dim)
    mass = MassMatrix.identity(dim)
    lines = [f"benchmark: standard Gaussian d={dim}, {steps} transitions per kernel"]
    for kind, extra in (
        ("nuts_iterative", {"k_m": 8}),
        ("nuts_recursive", {"k_m": 8}),
        ("hmc", {"t": 16}),
    ):
        cfg = KernelConfig(kind, h=0.25, mass=mass, **extra)
        kernel = make_kernel(target, cfg)
        rng = np.random.default_rng(seed)
        q = np.zeros(dim)
        grads = 0
        t0 = time.perf_counter()
        for _ in range(steps):
            q, info = kernel(q, rng)
            grads += info.n_grad
        wall = time.perf_counter() - t0
        lines.append(
            f"  {kind:16s} {steps / wall:10.1f} steps/s {grads / wall:12.1f} grad-evals/s"
        )
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynhmc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dynhmc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sample = sub.add_parser("sample", help="run sampling chains, write CSV + summary JSON")
    p_sample.add_argument("--config", help="JSON config file")
    p_sample.add_argument("--seed", type=int)
    p_sample.add_argument("--out", help="CSV output path (stdout if omitted)")
    p_sample.add_argument("--chains", type=int)
    p_sample.add_argument("--iters", type=int)
    p_sample.set_defaults(func=cmd_sample)

    p_verify = sub.add_parser("verify", help="run verification suites")
    p_verify.add_argument("--config", help="JSON config file")
    p_verify.add_argument("--suite", help=f"one of: {', '.join(SUITES)}")
    p_verify.add_argument("--seed", type=int)
    p_verify.add_argument("--out", help="JSON report path (stdout if omitted)")
    p_verify.add_argument(
        "--mutate",
        choices=["always-swap"],
        help="debug: run mutation-sensitive checks with a broken kernel (negative control)",
    )
    p_verify.set_defaults(func=cmd_verify)

    p_pmf = sub.add_parser("pmf", help="exact one-step transition pmf at a phase point")
    p_pmf.add_argument("--config", help="JSON config file")
    p_pmf.add_argument("--q", required=True, help="comma-separated position")
    p_pmf.add_argument("--p", help="comma-separated momentum (drawn from N(0,M) if omitted)")
    p_pmf.add_argument("--seed", type=int)
    p_pmf.set_defaults(func=cmd_pmf)

    p_cond = sub.add_parser("conditions", help="evaluate step-size condition validators")
    p_cond.add_argument("--config", help="JSON config file with a 'conditions' section")
    p_cond.add_argument("--seed", type=int)
    p_cond.set_defaults(func=cmd_conditions)

    p_traj = sub.add_parser(
        "trajectory", help="solve the two-point leapfrog boundary value problem"
    )
    p_traj.add_argument("--config", help="JSON config file (target + kernel.h/mass)")
    p_traj.add_argument("--q0", required=True, help="comma-separated start position")
    p_traj.add_argument("--qT", required=True, help="comma-separated end position")
    p_traj.add_argument("--steps", type=int, required=True, help="number of leapfrog steps T")
    p_traj.set_defaults(func=cmd_trajectory)

    p_bench = sub.add_parser("bench", help="throughput benchmark of the kernels")
    p_bench.add_argument("--dim", type=int, default=100)
    p_bench.add_argument("--steps", type=int, default=1000)
    p_bench.add_argument("--seed", type=int)
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
