"""Command-line surface: fitting, bound scans, E-step comparisons, benchmarks.

Every subcommand writes machine-readable CSV output, a manifest.json that
echoes the configuration (seed, versions, dataset shape), and a rendered
figure next to the data. ``--data`` accepts either a CSV path or the
synthetic specifier ``sinc`` / ``sinc:N`` for the noisy-sinc binary task.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time

import numpy as np

from . import __version__, qsvgp, tsvgp, tvgp
from .data import (
    CLASSIFICATION,
    Dataset,
    REGRESSION,
    choose_inducing,
    gen_sinc_classification,
    kfold,
    load_csv,
)
from .gaussmath import natural_to_moments
from .kernels import InducingInputs, KernelSpec, MATERN52, SQUARED_EXPONENTIAL
from .likelihoods import BernoulliProbitLikelihood, GaussianLikelihood
from .report import (
    plot_benchmark,
    plot_bound_scan,
    plot_compare_estep,
    plot_eval,
    plot_trace,
)
from .trainer import ModelSetup, TrainConfig, converge_estep, make_adapter, nlpd, run_em_full

__all__ = ["main", "build_parser"]

_TASKS = {"reg": REGRESSION, "cls": CLASSIFICATION}


# -- shared plumbing ---------------------------------------------------------


def _resolve_data(spec: str, task: str, seed: int) -> Dataset:
    if spec == "sinc" or spec.startswith("sinc:"):
        n = int(spec.split(":", 1)[1]) if ":" in spec else 100
        if task != "cls":
            raise SystemExit("the sinc generator is a binary-classification task; use --task cls")
        return gen_sinc_classification(n, seed)
    return load_csv(spec, _TASKS[task])


def _write_manifest(outdir: str, command: str, args: argparse.Namespace,
                    data: Dataset, extra: dict | None = None,
                    filename: str = "manifest.json") -> None:
    import matplotlib
    import scipy

    payload = {
        "command": command,
        "config": {k: v for k, v in vars(args).items() if k != "func"},
        "seed": getattr(args, "seed", None),
        "dataset": {"name": data.name, "n": data.n, "d": data.d, "task": data.task},
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__,
            "dualgp": __version__,
        },
    }
    if extra:
        payload.update(extra)
    with open(os.path.join(outdir, filename), "w") as fh:
        json.dump(payload, fh, indent=2, default=str)


def _write_csv(path: str, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _setup_from_args(args) -> ModelSetup:
    return ModelSetup(
        kind=args.model,
        kernel_family=args.kernel,
        init_lengthscale=args.lengthscale,
        init_variance=args.variance,
        init_noise=args.noise,
        num_inducing=args.m,
        inducing_method=args.inducing,
    )


def _add_model_init_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel", choices=(MATERN52, SQUARED_EXPONENTIAL), default=MATERN52)
    p.add_argument("--lengthscale", type=float, default=1.0, help="initial kernel lengthscale")
    p.add_argument("--variance", type=float, default=1.0, help="initial kernel magnitude")
    p.add_argument("--noise", type=float, default=1.0, help="initial noise variance (regression)")
    p.add_argument("--inducing", choices=("kmeans", "grid"), default="kmeans",
                   help="inducing-point placement for sparse models")


# -- fit ----------------------------------------------------------------------


def _cmd_fit(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    data = _resolve_data(args.data, args.task, args.seed)
    setup = _setup_from_args(args)
    config = TrainConfig(
        e_steps=args.e_steps,
        m_steps=args.m_steps,
        outer_iters=args.iters,
        e_rate=args.e_rate,
        m_rate=args.m_rate,
        batch_size="full" if args.batch == "full" else int(args.batch),
        mstep_objective=args.objective,
        seed=args.seed,
    )
    result = run_em_full(setup, data, config)

    result.trace.to_csv(os.path.join(args.out, "trace.csv"))
    _write_model_csv(os.path.join(args.out, "model.csv"), result)
    plot_trace(result.trace, os.path.join(args.out, "trace.png"))
    _write_manifest(args.out, "fit", args, data,
                    {"theta_names": list(result.adapter.theta_names),
                     "theta_final": [float(t) for t in result.theta]})
    print(f"fit: wrote trace.csv, model.csv, trace.png, manifest.json to {args.out}")
    return 0


def _write_model_csv(path: str, result) -> None:
    """Long-format dump of theta and the variational state: name, i, j, value."""
    rows = []
    for name, val in zip(result.adapter.theta_names, result.theta):
        rows.append([name, "", "", repr(float(val))])
    state = result.state
    if isinstance(state, tvgp.SiteParams):
        for i, (a, b) in enumerate(zip(state.lambda1, state.lambda2)):
            rows.append(["lambda1", i, "", repr(float(a))])
            rows.append(["lambda2", i, "", repr(float(b))])
    elif isinstance(state, tsvgp.SparseState):
        for i, a in enumerate(state.tied.lambda_bar1):
            rows.append(["lambda_bar1", i, "", repr(float(a))])
        for i in range(state.tied.m):
            for j in range(state.tied.m):
                rows.append(["Lambda_bar2", i, j, repr(float(state.tied.Lambda_bar2[i, j]))])
        for i, z in enumerate(state.inducing.Z):
            for j, zj in enumerate(z):
                rows.append(["Z", i, j, repr(float(zj))])
    elif isinstance(state, qsvgp.QState):
        for i, a in enumerate(state.eta.eta1):
            rows.append(["eta1", i, "", repr(float(a))])
        for i in range(state.eta.dim):
            for j in range(state.eta.dim):
                rows.append(["eta2", i, j, repr(float(state.eta.eta2[i, j]))])
        for i, z in enumerate(state.inducing.Z):
            for j, zj in enumerate(z):
                rows.append(["Z", i, j, repr(float(zj))])
    _write_csv(path, ["name", "i", "j", "value"], rows)


# -- bound-scan -----------------------------------------------------------------


def _cmd_bound_scan(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    data = _resolve_data(args.data, args.task, args.seed)
    lo, hi, steps = _parse_grid(args.theta_grid)
    grid = np.linspace(lo, hi, steps)

    setup = ModelSetup(
        kind=args.model, kernel_family=args.kernel,
        init_lengthscale=args.lengthscale, init_variance=args.variance,
        init_noise=args.noise, num_inducing=args.m, inducing_method=args.inducing,
    )
    config = TrainConfig(seed=args.seed)
    adapter = make_adapter(setup, data, config)
    theta_t = adapter.theta0.copy()
    state = converge_estep(adapter, adapter.init_state(args.seed), theta_t,
                           r=args.e_rate, tol=1e-12)
    frozen = adapter.frozen_q(state, theta_t)

    rows = []
    for g in grid:
        theta = theta_t.copy()
        theta[1] = np.log(g)  # scan the kernel magnitude
        proposed = adapter.proposed_objective(state, theta)
        standard = adapter.standard_objective(frozen, theta)
        rows.append([repr(float(g)), repr(proposed), repr(standard)])
    _write_csv(os.path.join(args.out, "bound_scan.csv"),
               ["theta", "proposed", "standard"], rows)
    plot_bound_scan(grid, [float(r[1]) for r in rows], [float(r[2]) for r in rows],
                    os.path.join(args.out, "bound_scan.png"))
    _write_manifest(args.out, "bound-scan", args, data,
                    {"theta_t": [float(t) for t in theta_t],
                     "scanned": "kernel magnitude (linear grid)"})
    print(f"bound-scan: wrote bound_scan.csv, bound_scan.png, manifest.json to {args.out}")
    return 0


def _parse_grid(spec: str):
    try:
        lo, hi, steps = spec.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError:
        raise SystemExit(f"bad --theta-grid {spec!r}; expected MIN:MAX:STEPS") from None
    if steps < 2 or hi <= lo or lo <= 0:
        raise SystemExit("need 0 < MIN < MAX and STEPS >= 2")
    return lo, hi, steps


# -- compare-estep ----------------------------------------------------------------


def _cmd_compare_estep(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    data = _resolve_data(args.data, args.task, args.seed)
    kernel = KernelSpec.create(args.kernel, args.lengthscale, args.variance)
    if data.task == REGRESSION:
        lik = GaussianLikelihood.create(args.noise)
    else:
        lik = BernoulliProbitLikelihood()
    Z = choose_inducing(data.X, args.m, args.seed, args.inducing)
    inducing = InducingInputs(Z)

    t_state = tsvgp.SparseState(inducing, tsvgp.zero_tied(inducing.m))
    q_state = qsvgp.prior_qstate(inducing, kernel)
    batch = np.arange(data.n)

    rows = []
    for step in range(1, args.steps + 1):
        t_state = tsvgp.tsvgp_estep_step(t_state, data.X, data.y, lik, kernel, batch, args.e_rate)
        q_state = qsvgp.qsvgp_estep_step(q_state, data.X, data.y, lik, kernel, batch, args.e_rate)
        t_mom = tsvgp.tsvgp_moments(t_state, kernel)
        q_mom = natural_to_moments(q_state.eta)
        dm = float(np.max(np.abs(t_mom.mean - q_mom.mean)))
        dS = float(np.max(np.abs(t_mom.cov - q_mom.cov)))
        rows.append([step, repr(dm), repr(dS)])
    _write_csv(os.path.join(args.out, "compare_estep.csv"),
               ["step", "diff_mean", "diff_cov"], rows)
    plot_compare_estep([r[0] for r in rows], [float(r[1]) for r in rows],
                       [float(r[2]) for r in rows],
                       os.path.join(args.out, "compare_estep.png"))
    _write_manifest(args.out, "compare-estep", args, data)
    worst = max(max(float(r[1]), float(r[2])) for r in rows)
    print(f"compare-estep: max iterate gap over {args.steps} steps = {worst:.3e}")
    print(f"compare-estep: wrote compare_estep.csv, compare_estep.png, manifest.json to {args.out}")
    return 0


# -- benchmark ----------------------------------------------------------------------


def _gen_benchmark_regression(n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-5.0, 5.0, size=n)
    y = np.sin(2.0 * x) + 0.3 * rng.standard_normal(n)
    return Dataset(x[:, None], y, REGRESSION, f"bench-n{n}-seed{seed}",
                   np.zeros(1), np.ones(1), 0.0, 1.0, ("x", "y"))


def _time_estep_loop(data, m: int, n_batch: int, steps: int, seed: int) -> float:
    kernel = KernelSpec.create(MATERN52, 1.0, 1.0)
    lik = GaussianLikelihood.create(0.1)
    Z = choose_inducing(data.X, m, seed)
    state = tsvgp.SparseState(InducingInputs(Z), tsvgp.zero_tied(m))
    rng = np.random.default_rng(seed)
    batches = [rng.choice(data.n, size=min(n_batch, data.n), replace=False)
               for _ in range(steps)]
    t0 = time.perf_counter()
    for batch in batches:
        state = tsvgp.tsvgp_estep_step(state, data.X, data.y, lik, kernel, batch, 0.5)
    return time.perf_counter() - t0


def _cmd_benchmark(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    data = _gen_benchmark_regression(args.n, args.seed)
    m_list = [int(s) for s in args.m_list.split(",") if s]
    rows, plot_rows = [], []
    for m in m_list:
        secs = _time_estep_loop(data, m, args.batch, args.steps, args.seed)
        rows.append(["m_scan", m, args.batch, args.steps, repr(secs)])
        plot_rows.append({"kind": "m_scan", "m": m, "n_batch": args.batch, "seconds": secs})
    if args.nb_list:
        for nb in (int(s) for s in args.nb_list.split(",") if s):
            secs = _time_estep_loop(data, args.m, nb, args.steps, args.seed)
            rows.append(["nb_scan", args.m, nb, args.steps, repr(secs)])
            plot_rows.append({"kind": "nb_scan", "m": args.m, "n_batch": nb, "seconds": secs})
    _write_csv(os.path.join(args.out, "benchmark.csv"),
               ["kind", "m", "n_batch", "steps", "seconds"], rows)
    plot_benchmark(plot_rows, os.path.join(args.out, "benchmark.png"))
    _write_manifest(args.out, "benchmark", args, data)
    print(f"benchmark: wrote benchmark.csv, benchmark.png, manifest.json to {args.out}")
    return 0


# -- eval ------------------------------------------------------------------------


def _cmd_eval(args) -> int:
    manifest_path = os.path.join(args.model_dir, "manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("command") != "fit":
        raise SystemExit(f"{manifest_path} does not describe a fit run")
    cfg = manifest["config"]

    data = _resolve_data(args.data, cfg["task"], args.seed)
    setup = ModelSetup(
        kind=cfg["model"], kernel_family=cfg["kernel"],
        init_lengthscale=cfg["lengthscale"], init_variance=cfg["variance"],
        init_noise=cfg["noise"], num_inducing=cfg["m"], inducing_method=cfg["inducing"],
    )
    config = TrainConfig(
        e_steps=cfg["e_steps"], m_steps=cfg["m_steps"], outer_iters=cfg["iters"],
        e_rate=cfg["e_rate"], m_rate=cfg["m_rate"],
        batch_size="full" if cfg["batch"] == "full" else int(cfg["batch"]),
        mstep_objective=cfg["objective"], seed=args.seed,
    )

    rows = []
    for fold, (train_idx, test_idx) in enumerate(kfold(data.n, args.folds, args.seed)):
        train = data.subset(train_idx, f"-fold{fold}-train")
        test = data.subset(test_idx, f"-fold{fold}-test")
        result = run_em_full(setup, train, config, test)
        last = result.trace.rows[-1]
        rows.append([fold, repr(last.elbo), repr(last.nlpd_train), repr(last.nlpd_test)])
    _write_csv(os.path.join(args.model_dir, "eval.csv"),
               ["fold", "elbo", "nlpd_train", "nlpd_test"], rows)
    plot_eval([r[0] for r in rows], [float(r[1]) for r in rows],
              [float(r[3]) for r in rows], os.path.join(args.model_dir, "eval.png"))
    _write_manifest(args.model_dir, "eval", args, data,
                    {"fit_config": cfg}, filename="eval_manifest.json")
    print(f"eval: wrote eval.csv, eval.png, eval_manifest.json to {args.model_dir}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualgp",
        description="Dual-parameterized (sparse) variational GP fitting and diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="variational EM fit; writes trace/model/manifest")
    p.add_argument("--model", choices=("tvgp", "tsvgp", "qsvgp"), required=True)
    p.add_argument("--data", required=True, help="CSV path, or sinc / sinc:N")
    p.add_argument("--task", choices=("reg", "cls"), default="reg")
    p.add_argument("--m", type=int, default=20, help="number of inducing points")
    p.add_argument("--e-steps", type=int, default=4)
    p.add_argument("--m-steps", type=int, default=1)
    p.add_argument("--e-rate", type=float, default=0.7)
    p.add_argument("--m-rate", type=float, default=0.2)
    p.add_argument("--batch", default="full", help="minibatch size or 'full'")
    p.add_argument("--objective", choices=("proposed", "standard"), default="proposed")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_model_init_flags(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("bound-scan", help="objective landscape over a kernel-magnitude grid")
    p.add_argument("--model", choices=("tvgp", "tsvgp"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("reg", "cls"), default="cls")
    p.add_argument("--theta-grid", required=True, help="MIN:MAX:STEPS over the magnitude")
    p.add_argument("--objective", choices=("both",), default="both")
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--e-rate", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_model_init_flags(p)
    p.set_defaults(func=_cmd_bound_scan)

    p = sub.add_parser("compare-estep", help="tied vs standard natural-gradient iterates")
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("reg", "cls"), default="cls")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--e-rate", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_model_init_flags(p)
    p.set_defaults(func=_cmd_compare_estep)

    p = sub.add_parser("benchmark", help="E-step wall-clock scaling in m and batch size")
    p.add_argument("--m-list", default="50,100,150,200,250")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--m", type=int, default=100, help="fixed m for the batch-size scan")
    p.add_argument("--nb-list", default="", help="optional batch sizes, e.g. 64,128,256")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("eval", help="k-fold refit/evaluation of a previous fit config")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
