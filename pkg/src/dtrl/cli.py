"""Command-line front end: ``dtrl gen-toy | solve | sweep | eval | verify``."""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from pathlib import Path

from dtrl.dataset import gen_toy, load_csv, normalize, write_csv
from dtrl.errors import (
    ConvergenceError,
    DatasetError,
    ExtractionError,
    MalformedTreeError,
    NotRepresentableError,
    ProblemTooLargeError,
    TreeParseError,
    UnsupportedSplitParameterError,
)
from dtrl.ibmdp import FULL_STATE_LIMIT, FullStateSpace, IbmdpInstance
from dtrl.oibmdp import OibmdpModel, dump_model
from dtrl.solvers import ALGORITHMS, SolverConfig, solve
from dtrl.sweep import (
    DEFAULT_ZETAS,
    pareto_front,
    run_sweep,
    sweep_instance,
    sweep_svg,
    write_metrics,
    write_sweep_csv,
)
from dtrl.tree import evaluate_tree, extract_tree, load_tree, save_tree, tree_return
from dtrl.verify import CHECKS

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DATASET = 3
EXIT_TREE_PARSE = 4
EXIT_CONVERGENCE = 5
EXIT_TOO_LARGE = 6
EXIT_IO = 7
EXIT_BAD_TREE = 8

# depth caps used for the benchmark datasets; anything else needs --max-depth
DATASET_MAX_DEPTH = {"wine": 4, "diabetes": 5, "diabete": 5, "banknote": 5}


class UsageError(Exception):
    pass


def default_max_depth(data_path: str) -> int:
    stem = Path(data_path).stem.lower()
    for name, depth in DATASET_MAX_DEPTH.items():
        if stem == name or stem.startswith((name + "_", name + "-")):
            return depth
    raise UsageError(f"no default depth cap for dataset {stem!r}; pass --max-depth")


def parse_floats(text: str) -> list[float]:
    items = [t for t in text.replace(" ", "").split(",") if t]
    if not items:
        raise UsageError("at least one zeta value is required")
    try:
        return [float(t) for t in items]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}: {exc}") from None


def parse_ints(text: str) -> list[int]:
    items = [t for t in text.replace(" ", "").split(",") if t]
    if not items:
        raise UsageError("at least one seed is required")
    try:
        return [int(t) for t in items]
    except ValueError as exc:
        raise UsageError(f"bad integer list {text!r}: {exc}") from None


def _load(args):
    raw = load_csv(args.data, args.label_col, name=Path(args.data).stem)
    return normalize(raw)


def _config(args, algorithm, seed) -> SolverConfig:
    kwargs = {"algorithm": algorithm, "seed": seed}
    if args.tolerance is not None:
        kwargs["tolerance"] = args.tolerance
    if args.iterations is not None:
        kwargs["max_iterations"] = args.iterations
    if args.steps is not None:
        kwargs["total_steps"] = args.steps
        kwargs["eval_every"] = max(1, min(100_000, args.steps // 20))
    if args.lr is not None:
        kwargs["learning_rate"] = args.lr
    try:
        return SolverConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_exact_pg(instance: IbmdpInstance, limit: int) -> None:
    n_states = instance.dataset.n_samples * len(instance.observations)
    if n_states > limit:
        raise ProblemTooLargeError(
            f"exact-pg needs the full IBMDP state space: N*|observations| = {n_states} exceeds {limit} "
            "(raise --exact-pg-limit to override)"
        )


# --- commands ----------------------------------------------------------------------


def cmd_gen_toy(args) -> int:
    task = gen_toy(args.seed)
    out = Path(args.out_dir) / f"toy-{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "toy.csv", task.raw)
    save_tree(task.truth_tree, out / "truth.tree")
    counts = task.dataset.class_counts()
    print(f"toy task seed={args.seed}: {task.dataset.n_samples} samples, {task.dataset.n_features} features, "
          f"classes {dict(zip(task.dataset.class_names, counts.tolist()))}")
    print(f"root feature f{task.root_feature}, polarity {task.polarity}")
    print(f"wrote {out / 'toy.csv'} and {out / 'truth.tree'}")
    return EXIT_OK


def cmd_solve(args) -> int:
    dataset = _load(args)
    max_depth = args.max_depth if args.max_depth is not None else default_max_depth(args.data)
    instance = IbmdpInstance(dataset, p=args.p, zeta=args.zeta, gamma=args.gamma, max_igas=max_depth)
    config = _config(args, args.algo, args.seed)
    t0 = time.perf_counter()
    space = None
    if args.algo == "exact-pg":
        _check_exact_pg(instance, args.exact_pg_limit)
        space = FullStateSpace(instance, limit=max(args.exact_pg_limit, FULL_STATE_LIMIT))
    model = OibmdpModel(instance)
    solved, trace = solve(model, config, space)
    metadata = {
        "dataset": dataset.name,
        "solver": args.algo,
        "seed": args.seed,
        "zeta": repr(float(args.zeta)),
        "gamma": repr(float(args.gamma)),
        "p": args.p,
        "max_depth": max_depth,
    }
    tree = extract_tree(model, solved, metadata=metadata)
    runtime = time.perf_counter() - t0
    metrics = evaluate_tree(tree, dataset)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tree(tree, out / "policy.tree")
    trace.write_csv(out / "trace.csv")
    write_metrics(
        out / "metrics.txt",
        {
            "dataset": dataset.name,
            "solver": args.algo,
            "seed": args.seed,
            "zeta": float(args.zeta),
            "gamma": float(args.gamma),
            "p": args.p,
            "max_depth": max_depth,
            "observations": model.n_obs,
            "J": float(solved.J),
            "accuracy": metrics.accuracy,
            "decision_nodes": metrics.decision_node_count,
            "depth": metrics.depth,
            "runtime_s": runtime,
        },
    )
    if args.dump_model:
        with open(args.dump_model, "w", encoding="utf-8") as fh:
            dump_model(model, fh)
    print(tree.pretty())
    print(f"J={solved.J!r} accuracy={metrics.accuracy:.6f} decision_nodes={metrics.decision_node_count} "
          f"depth={metrics.depth} observations={model.n_obs} runtime={runtime:.3f}s")
    return EXIT_OK


def cmd_sweep(args) -> int:
    zetas = parse_floats(args.zetas)
    seeds = parse_ints(args.seeds)
    dataset = _load(args)
    max_depth = args.max_depth if args.max_depth is not None else default_max_depth(args.data)
    instance = sweep_instance(dataset, args.p, args.gamma, max_depth)
    if args.algo == "exact-pg":
        _check_exact_pg(instance, args.exact_pg_limit)
    model = OibmdpModel(instance)
    base = _config(args, args.algo, seeds[0])
    out_csv = Path(args.out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    tree_dir = args.tree_dir or str(out_csv.with_name(out_csv.stem + "_trees"))
    rows = run_sweep(model, zetas, args.algo, seeds, tree_dir, args.workers, base, dataset.name)
    write_sweep_csv(out_csv, rows)
    front = pareto_front(rows)
    write_sweep_csv(out_csv.with_name(out_csv.stem + ".pareto.csv"), front)
    if args.out_svg:
        Path(args.out_svg).write_text(sweep_svg(rows, f"{dataset.name}: accuracy vs decision nodes"), encoding="utf-8")
    for r in rows:
        mark = "*" if r in front else " "
        print(f"{mark} zeta={r.zeta:+g} seed={r.seed} J={r.J:.6f} accuracy={r.accuracy:.4f} "
              f"decision_nodes={r.decision_nodes} depth={r.depth}")
    print(f"{len(rows)} rows, {len(front)} on the Pareto front (*)")
    return EXIT_OK


def cmd_eval(args) -> int:
    tree = load_tree(args.tree)
    dataset = _load(args)
    if len(tree.class_names) != dataset.n_classes or len(tree.feature_names) != dataset.n_features:
        raise MalformedTreeError("tree classes or features do not match the dataset")
    metrics = evaluate_tree(tree, dataset)
    print(tree.pretty())
    print(f"accuracy={metrics.accuracy:.6f} decision_nodes={metrics.decision_node_count} "
          f"leaves={metrics.leaf_count} depth={metrics.depth}")
    if args.zeta is not None:
        max_depth = args.max_depth if args.max_depth is not None else max(tree.depth, 1)
        model = OibmdpModel(IbmdpInstance(dataset, p=args.p, zeta=args.zeta, gamma=args.gamma, max_igas=max_depth))
        print(f"J={tree_return(tree, model)!r}")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = CHECKS[args.check](seed=args.seed)
    for item in report.details:
        print(f"  {item}")
    print(report.line())
    if not report.passed:
        path = Path(args.replay_out or f"dtrl-verify-{args.check}-seed{args.seed}.json")
        path.write_text(json.dumps({"check": args.check, "seed": args.seed, "case": report.failure}, indent=2), encoding="utf-8")
        print(f"offending case written to {path}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# --- parser --------------------------------------------------------------------------


def _add_data(sp, label_default="label"):
    sp.add_argument("--data", required=True, help="CSV file with a header row")
    sp.add_argument("--label-col", default=label_default, help="name of the label column (default: %(default)s)")


def _add_model(sp, zeta_default=0.5):
    sp.add_argument("--p", type=int, default=1, help="split parameter; p+1 must be prime (default: 1)")
    sp.add_argument("--gamma", type=float, default=0.99)
    sp.add_argument("--max-depth", type=int, default=None, help="maximum IGAs per episode (tree depth cap)")
    if zeta_default is not False:
        sp.add_argument("--zeta", type=float, default=zeta_default, help="reward for each split action")


def _add_solver(sp):
    sp.add_argument("--algo", choices=ALGORITHMS, default="policy-iteration")
    sp.add_argument("--tolerance", type=float, default=None)
    sp.add_argument("--iterations", type=int, default=None, help="iteration cap (solvers) or ascent steps (exact-pg)")
    sp.add_argument("--steps", type=int, default=None, help="environment steps for q-learning")
    sp.add_argument("--lr", type=float, default=None, help="exact-pg learning rate")
    sp.add_argument("--exact-pg-limit", type=int, default=FULL_STATE_LIMIT, help="max N*|observations| for exact-pg")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtrl", description="Decision trees as reactive policies of bounding MDPs.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-toy", help="write a toy XOR task and its ground-truth tree")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_gen_toy)

    sp = sub.add_parser("solve", help="solve one model and extract its tree")
    _add_data(sp)
    _add_model(sp)
    _add_solver(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--dump-model", default=None, help="also write the observation model as text")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("sweep", help="solve over several zeta values")
    _add_data(sp)
    _add_model(sp, zeta_default=False)
    _add_solver(sp)
    sp.add_argument("--zetas", default=",".join(f"{z:g}" for z in DEFAULT_ZETAS))
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--out-csv", required=True)
    sp.add_argument("--out-svg", default=None)
    sp.add_argument("--tree-dir", default=None)
    sp.add_argument("--workers", type=int, default=None, help="worker processes (default: DTRL_THREADS or all cores)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("eval", help="accuracy and size of a saved tree; return too if --zeta is given")
    sp.add_argument("--tree", required=True)
    _add_data(sp)
    _add_model(sp, zeta_default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("verify", help="run a numerical property suite")
    sp.add_argument("check", choices=sorted(CHECKS))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--replay-out", default=None, help="where to write a failing case")
    sp.set_defaults(func=cmd_verify)
    return parser


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    with warnings.catch_warnings():
        warnings.simplefilter("always", RuntimeWarning)
        warnings.showwarning = _show_warning
        try:
            return args.func(args)
        except UsageError as exc:
            parser.error(str(exc))
        except (UnsupportedSplitParameterError, ValueError) as exc:
            code, msg = EXIT_USAGE, str(exc)
        except DatasetError as exc:
            code, msg = EXIT_DATASET, str(exc)
        except TreeParseError as exc:
            code, msg = EXIT_TREE_PARSE, str(exc)
        except ConvergenceError as exc:
            code, msg = EXIT_CONVERGENCE, str(exc)
        except ProblemTooLargeError as exc:
            code, msg = EXIT_TOO_LARGE, str(exc)
        except (MalformedTreeError, NotRepresentableError, ExtractionError) as exc:
            code, msg = EXIT_BAD_TREE, str(exc)
        except OSError as exc:
            code, msg = EXIT_IO, str(exc)
    print(f"dtrl: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
