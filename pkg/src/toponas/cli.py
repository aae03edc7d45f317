"""Command-line interface: simplify / search / verify / bench / cost.

Exit codes: 0 success, 1 verification or run failure, 2 configuration error.
``TOPONAS_THREADS`` caps the numeric library thread pools (1 gives fully
deterministic runs); it must be honored before numpy loads, which is why
this module touches the environment before any numeric import.
"""

import os

_threads = os.environ.get("TOPONAS_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import datetime
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import engine
from .bench import DEFAULT_BENCH_SIZES, bench_csv, bench_sizes
from .costs import (RunCost, cost_table_csv, cost_table_json, count_modules,
                    normalized_cost)
from .datasets import DataError, load_dataset, parse_dataset_arg
from .graph import build_supernet, compile_vanilla, emit_dot
from .search import TrainConfig, bilevel_search, retrain
from .simplify import simplify_recursive
from .spaces import ParseError, SpecError, parse_space
from .verify import run_suite

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_hash(payload: dict, space_text: str = "") -> str:
    blob = json.dumps(payload, sort_keys=True).encode() + space_text.encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _space_text(name_or_path: str) -> str:
    from importlib import resources
    from .spaces import BUILTIN_SPACES
    if name_or_path in BUILTIN_SPACES:
        return resources.files("toponas").joinpath(
            f"spaces/{name_or_path}.space").read_text()
    return Path(name_or_path).read_text()


def cmd_simplify(args) -> int:
    spec = parse_space(args.space)
    rng = np.random.default_rng(args.seed)
    from .engine import Parameter, Tensor
    from .graph import SearchableEdge
    chains = [spec.instantiate_chain(c, spec.stem_channels, rng)
              for c in spec.candidates]
    alpha = Parameter(Tensor(np.zeros(len(chains), dtype=np.float32)), role="arch")
    edge = SearchableEdge(chains, alpha, stride=1,
                          in_channels=spec.stem_channels,
                          out_channels=spec.stem_channels)
    before = compile_vanilla(edge)
    after, log = simplify_recursive(before)
    counts_before = count_modules(before)
    counts_after = count_modules(after)
    report = {
        "schema": "toponas/rewrite_log/v1",
        "space": spec.name,
        "initial": {"conv": counts_before.conv, "non_conv": counts_before.non_conv,
                    "total": counts_before.total},
        "final": {"conv": counts_after.conv, "non_conv": counts_after.non_conv,
                  "total": counts_after.total},
        "entries": log.to_json(),
    }
    out = _outdir(args)
    (out / "rewrite_log.json").write_text(json.dumps(report, indent=2))
    (out / "edge_before.dot").write_text(emit_dot(before))
    (out / "edge_after.dot").write_text(emit_dot(after))
    table = ["pass,conv,non_conv,total",
             f"original,{counts_before.conv},{counts_before.non_conv},{counts_before.total}"]
    for e in log.entries:
        table.append(f"+{e.pass_name},{e.after[0]},{e.after[1]},{e.after[2]}")
    (out / "module_counts.csv").write_text("\n".join(table) + "\n")
    print(f"{spec.name}: {counts_before.astuple()} -> {counts_after.astuple()} "
          f"({len(log.entries)} rewrites)")
    for e in log.entries:
        print(f"  {e.pass_name}: {e.before} -> {e.after} (saved {e.savings})")
    return EXIT_OK


def _search_once(spec, dataset_spec, config, label, freeze_onehot):
    supernet = build_supernet(spec, seed=config.seed,
                              dtype=engine.DTYPES[config.precision])
    if freeze_onehot is not None:
        for alpha in supernet.alphas.values():
            vec = np.zeros(alpha.value.data.shape, dtype=alpha.value.data.dtype)
            vec[freeze_onehot] = 60.0
            alpha.set_value(vec)
        config.freeze_alpha = True
    if config.simplification == "full":
        supernet.simplify()
    bundle = load_dataset(dataset_spec)
    result = bilevel_search(supernet, bundle.train, bundle.val, config)
    return supernet, result


def cmd_search(args) -> int:
    spec = parse_space(args.space)
    dataset_spec = parse_dataset_arg(args.dataset)
    seeds = [int(s) for s in str(args.seeds).split(",")] if args.seeds else [args.seed]
    config_payload = {
        "space": args.space, "dataset": args.dataset, "epochs": args.epochs,
        "batch_size": args.batch_size, "simplify": args.simplify,
        "kernel_norm": args.kernel_norm, "precision": args.precision,
        "seeds": seeds,
    }
    chash = _config_hash(config_payload, _space_text(args.space))
    t_start = _now()
    runs = []
    for seed in seeds:
        config = TrainConfig(
            epochs=args.epochs, batch_size=args.batch_size, seed=seed,
            precision=args.precision,
            kernel_normalization=(args.kernel_norm == "on"),
            simplification=args.simplify)
        _, result = _search_once(spec, dataset_spec, config, args.method_label,
                                 args.alpha_frozen_onehot)
        runs.append(result)
    record = {
        "schema": "toponas/result_record/v1",
        "method": args.method_label,
        "space": spec.name,
        "dataset": args.dataset,
        "config": config_payload,
        "config_hash": chash,
        "timestamp_start": t_start,
        "timestamp_end": _now(),
        "runs": [r.to_json() for r in runs],
    }
    if len(runs) > 1:
        finals = [r.val_acc[-1] for r in runs if r.val_acc]
        record["summary"] = {"val_acc_mean": float(np.mean(finals)),
                             "val_acc_std": float(np.std(finals))}
    out = _outdir(args)
    (out / "result.json").write_text(json.dumps(record, indent=2))
    (out / "genotype.txt").write_text(
        "\n".join(r.genotype_str for r in runs) + "\n")
    for r in runs:
        status = "aborted: " + r.abort_reason if r.aborted else r.genotype_str
        print(status)
    return EXIT_FAIL if any(r.aborted for r in runs) else EXIT_OK


def cmd_verify(args) -> int:
    report = run_suite(args.suite)
    out = _outdir(args)
    (out / "verify_report.json").write_text(json.dumps(report, indent=2))
    suites = report.get("suites", [report])
    for suite in suites:
        for check in suite.get("checks", []):
            flag = "ok " if check["passed"] else "FAIL"
            print(f"[{flag}] {suite['suite']}.{check['check']} "
                  f"margin={check['margin']:.3e} tol={check['tolerance']:g}")
    print("verify:", "PASS" if report["passed"] else "FAIL")
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    if any(s < 3 or s > 16 for s in sizes):
        raise ParseError("bench sizes must lie in [3, 16]")
    rows = bench_sizes(sizes=sizes, seed=args.seed,
                       extrapolate_epochs=args.extrapolate_epochs,
                       repeats=args.repeats)
    out = _outdir(args)
    (out / "bench.csv").write_text(bench_csv(rows))
    for row in rows:
        print(f"{row.n_ops:3d} {row.method:<10} total={row.total:3d} "
              f"bytes={row.memory_bytes:>10d} wall={row.wall_s:.3f}s "
              f"(full ~{row.wall_s_extrapolated:.1f}s)")
    return EXIT_OK


def cmd_cost(args) -> int:
    entries = []
    for path in args.records:
        rec = json.loads(Path(path).read_text())
        for run in rec.get("runs", []):
            rc = run.get("run_cost")
            if not rc:
                continue
            entries.append({
                "method": rec.get("method", "unknown"),
                "space": rec.get("space", "unknown"),
                "conv": None, "non_conv": None, "total": None,
                "memory_bytes": rc["memory_bytes_peak"],
                "wall_s": rc["wall_time_s"],
            })
    if not entries:
        raise ParseError("no completed runs found in the given records")
    costs = normalized_cost([RunCost(e["memory_bytes"], e["wall_s"])
                             for e in entries])
    for e, c in zip(entries, costs):
        e["C"] = round(c.c, 4)
    out = _outdir(args)
    (out / "costs.csv").write_text(cost_table_csv(entries))
    (out / "costs.json").write_text(cost_table_json(entries))
    for e in entries:
        print(f"{e['method']:<16} {e['space']:<14} M={e['memory_bytes']:>11} "
              f"T={e['wall_s']:>9.2f} C={e['C']:.3f}")
    return EXIT_OK


def cmd_retrain(args) -> int:
    from .graph import Genotype
    spec = parse_space(args.space)
    dataset_spec = parse_dataset_arg(args.dataset)
    genotype = Genotype.parse(Path(args.genotype).read_text().strip()
                              if Path(args.genotype).exists() else args.genotype)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         seed=args.seed, precision=args.precision,
                         kernel_normalization=False, simplification="none")
    bundle = load_dataset(dataset_spec)
    report = retrain(genotype, spec, bundle.train, bundle.test, config)
    out = _outdir(args)
    (out / "retrain.json").write_text(json.dumps(report.to_json(), indent=2))
    print(f"test accuracy: {report.test_accuracy:.4f}"
          + (" (aborted)" if report.aborted else ""))
    return EXIT_FAIL if report.aborted else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toponas",
        description="Supernet topology simplification and desk-scale search")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("simplify", help="rewrite a space's edge and report counts")
    p.add_argument("--space", required=True)
    common(p)

    p = sub.add_parser("search", help="run the bi-level search")
    p.add_argument("--space", required=True)
    p.add_argument("--dataset", default="synthetic:classes=4,size=16,n=256")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seeds", default=None,
                   help="comma-separated seeds; reports mean/std over runs")
    p.add_argument("--simplify", choices=("none", "full"), default="full")
    p.add_argument("--kernel-norm", choices=("on", "off"), default="on")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--method-label", default="toponas")
    p.add_argument("--alpha-frozen-onehot", type=int, default=None,
                   help="freeze all alphas one-hot at this candidate index")
    common(p)

    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("--suite", default="all",
                   choices=("equivalence", "degeneracy", "gradcheck", "counts",
                            "all"))
    common(p)

    p = sub.add_parser("bench", help="cost scaling over candidate counts")
    p.add_argument("--sizes", default=",".join(str(s) for s in DEFAULT_BENCH_SIZES))
    p.add_argument("--extrapolate-epochs", type=int, default=50)
    p.add_argument("--repeats", type=int, default=3)
    common(p)

    p = sub.add_parser("cost", help="normalized cost over result records")
    p.add_argument("records", nargs="+", help="result.json files")
    common(p)

    p = sub.add_parser("retrain", help="train a discretized genotype from scratch")
    p.add_argument("--space", required=True)
    p.add_argument("--dataset", default="synthetic:classes=4,size=16,n=256")
    p.add_argument("--genotype", required=True,
                   help="genotype string or path to genotype.txt")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common(p)
    return parser


COMMANDS = {
    "simplify": cmd_simplify,
    "search": cmd_search,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "cost": cmd_cost,
    "retrain": cmd_retrain,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ParseError, SpecError, DataError, engine.ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
