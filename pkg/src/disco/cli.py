"""Command-line surface tying the library together.

Subcommands: profile, equilibrium, prune, train, simulate, report. Every
command is a thin deterministic wrapper over library calls: identical inputs
and seeds give byte-identical outputs. Exit codes: 0 success, 2 malformed
input, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import load_tensor, save_tensor, synthetic_dataset
from .latency import (SystemConfig, equilibrium_csv_text, equilibrium_mapping,
                      equilibrium_profile, fmt, model_latency, resolve_system)
from .masks import (BlockMask, MaskError, load_mask, pattern_dense, save_mask,
                    select_subrows, sparsity_stats)
from .model import ModelSpec, resolve_model
from .forward import forward_model
from .simulate import max_relative_error, simulate
from .train import TrainError, evaluate, iterative_disco, load_train_config
from .weights import load_weights

VERIFY_TOLERANCE = 1e-4

EXIT_BAD_INPUT = 2
EXIT_VERIFY_FAILED = 3

REPORT_CSV_HEADER = ["model", "system", "nodes", "mode", "strategy",
                     "prune_fraction", "S_comm", "S_comp", "accuracy",
                     "total_latency_s"]


class CliError(Exception):
    """Malformed input; maps to exit code 2."""


def _parse_float_list(text: str, flag: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise CliError(f"{flag}: expected comma-separated numbers, got {text!r}")
    if not values:
        raise CliError(f"{flag}: empty list")
    return values


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise CliError(f"{flag}: expected comma-separated integers, got {text!r}")
    if not values:
        raise CliError(f"{flag}: empty list")
    return values


def _load_model(args) -> ModelSpec:
    return resolve_model(args.model)


def _load_system(args, nodes: int | None = None) -> SystemConfig:
    return resolve_system(args.system, nodes=nodes if nodes is not None else args.nodes,
                          mode=args.mode)


def _load_mask_arg(args, model: ModelSpec) -> BlockMask | None:
    if getattr(args, "mask", None) is None:
        return None
    return load_mask(args.mask, model)


def _figure_path(out: Path) -> Path:
    return out.with_suffix(".png")


def cmd_profile(args) -> int:
    model = _load_model(args)
    system = _load_system(args)
    mask = _load_mask_arg(args, model)
    sparsity = args.sparsity
    if mask is not None and sparsity is not None:
        raise CliError("--sparsity and --mask are mutually exclusive")
    report = model_latency(model, system, sparsity=sparsity, mask=mask)
    text = report.to_csv_text()
    if args.out is None:
        sys.stdout.write(text)
    else:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        print(f"wrote {out}")
        if not args.no_figure:
            from .plots import latency_figure
            fig = latency_figure(report, _figure_path(out),
                                 title=f"{model.name} on {system.name}, N={system.nodes}")
            print(f"wrote {fig}")
    print(f"total {system.mode} latency: {fmt(report.total)} s", file=sys.stderr)
    return 0


def cmd_equilibrium(args) -> int:
    model = _load_model(args)
    system = _load_system(args)
    rows = equilibrium_profile(model, system)
    text = equilibrium_csv_text(rows)
    if args.out is None:
        sys.stdout.write(text)
    else:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        print(f"wrote {out}")
        if not args.no_figure:
            from .plots import equilibrium_figure
            fig = equilibrium_figure(rows, _figure_path(out),
                                     title=f"{model.name} on {system.name}, N={system.nodes}")
            print(f"wrote {fig}")
    ok = [r.s_comm for r in rows if r.status == "ok"]
    if ok:
        print(f"mean equilibrium S_comm over {len(ok)} layers: {sum(ok)/len(ok):.4f}",
              file=sys.stderr)
    return 0


def cmd_prune(args) -> int:
    model = _load_model(args)
    weights = load_weights(args.weights, model) if args.weights else None
    strategy = {"disco_l1": "l1"}.get(args.strategy, args.strategy)
    mask = select_subrows(model, weights, args.nodes, args.sparsity,
                          strategy=strategy, seed=args.seed)
    save_mask(mask, model, args.out)
    print(f"wrote {args.out}")
    stats = sparsity_stats(mask, model)
    possible = sum(s.possible_messages for s in stats.values())
    pruned = possible - sum(s.sent_messages for s in stats.values())
    share = pruned / possible if possible else 0.0
    print(f"pruned {pruned}/{possible} cross-node messages ({share:.4f})",
          file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    model = _load_model(args)
    config = load_train_config(args.config)
    dataset = synthetic_dataset(noise=args.noise, seed=args.data_seed,
                                train_per_class=args.train_per_class,
                                test_per_class=args.test_per_class)
    out = Path(args.out)
    result = iterative_disco(model, dataset, config, out_dir=out)
    if not args.no_figure:
        from .plots import training_figure
        fig = training_figure(result.metrics, out / "metrics.png",
                              title=f"{model.name}, {config.strategy}, N={config.nodes}")
        print(f"wrote {fig}")
    for stage in result.stages:
        print(f"stage {stage.stage} p={stage.p:g}: test accuracy {stage.accuracy:.4f}")
    print(f"wrote checkpoints and metrics.csv under {out}")
    return 0


def cmd_simulate(args) -> int:
    model = _load_model(args)
    weights = load_weights(args.weights, model)
    mask = _load_mask_arg(args, model)
    if mask is None:
        mask = pattern_dense(model, args.nodes)
    elif mask.nodes != args.nodes:
        raise CliError(f"mask was built for N={mask.nodes}, --nodes says {args.nodes}")
    system = _load_system(args)
    if args.input is not None:
        x = load_tensor(args.input).astype(np.float32)
        if x.ndim == 3:
            x = x[None]
    else:
        rng = np.random.default_rng(args.seed)
        x = rng.standard_normal((args.batch, *model.input_shape)).astype(np.float32)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    output, trace = simulate(model, weights, mask, x, system)
    save_tensor(out_dir / "output.f32", output)
    (out_dir / "trace.csv").write_text(trace.to_csv_text(), encoding="utf-8")
    print(f"wrote {out_dir / 'output.f32'} and {out_dir / 'trace.csv'}")
    if args.verify:
        reference = forward_model(model, weights, x, mask=mask)
        err = max_relative_error(output, reference)
        print(f"max relative error vs centralized: {err:.3e}")
        if err > VERIFY_TOLERANCE:
            print(f"verification FAILED (tolerance {VERIFY_TOLERANCE:g})",
                  file=sys.stderr)
            return EXIT_VERIFY_FAILED
        print("verification passed")
    return 0


def _report_mask(model, weights, nodes, strategy, q, seed, equilibrium_q):
    if q == "equilibrium":
        return select_subrows(model, weights, nodes, equilibrium_q,
                              strategy=strategy, seed=seed)
    return select_subrows(model, weights, nodes, q, strategy=strategy, seed=seed)


def cmd_report(args) -> int:
    model = _load_model(args)
    nodes_list = _parse_int_list(args.nodes, "--nodes")
    strategies = [s.strip() for s in args.strategy.split(",") if s.strip()]
    if not strategies:
        raise CliError("--strategy: empty list")
    strategies = [{"disco_l1": "l1"}.get(s, s) for s in strategies]
    weights = load_weights(args.weights, model)
    dataset = synthetic_dataset(noise=args.noise, seed=args.data_seed,
                                train_per_class=args.train_per_class,
                                test_per_class=args.test_per_class)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    series = []
    for nodes in nodes_list:
        system = resolve_system(args.system, nodes=nodes, mode=args.mode)
        if args.sparsity.strip() == "equilibrium":
            eq_rows = equilibrium_profile(model, system)
            q_values: list = ["equilibrium"]
            eq_q = equilibrium_mapping(eq_rows, model)
        else:
            q_values = _parse_float_list(args.sparsity, "--sparsity")
            eq_q = None
        for strategy in strategies:
            points = []
            for q in q_values:
                mask = _report_mask(model, weights, nodes, strategy, q,
                                    args.seed, eq_q)
                acc = evaluate(model, weights, mask, dataset)
                report = model_latency(model, system, mask=mask)
                stats = sparsity_stats(mask, model)
                possible = sum(s.possible_messages for s in stats.values())
                sent = sum(s.sent_messages for s in stats.values())
                s_comm = 1.0 - sent / possible if possible else 0.0
                kept = sum(int(k.sum()) for k in mask.keep.values())
                total = sum(k.size for k in mask.keep.values())
                s_comp = 1.0 - kept / total if total else 0.0
                q_label = q if isinstance(q, str) else fmt(q)
                rows.append([model.name, system.name, nodes, system.mode,
                             strategy, q_label, fmt(s_comm), fmt(s_comp),
                             fmt(acc), fmt(report.total)])
                if not isinstance(q, str):
                    points.append((q, report.total))
            if points:
                series.append((f"N={nodes} {strategy}", points))

    import csv as _csv
    import io as _io
    buf = _io.StringIO()
    writer = _csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_CSV_HEADER)
    writer.writerows(rows)
    (out_dir / "report.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"wrote {out_dir / 'report.csv'}")
    if series and not args.no_figure:
        from .plots import tradeoff_figure
        fig = tradeoff_figure(series, out_dir / "tradeoff.png",
                              title=f"{model.name} on {args.system}")
        print(f"wrote {fig}")
    return 0


def _add_common(p: argparse.ArgumentParser, *, model=True, system=True,
                nodes=True, mode=True, seed=True) -> None:
    if model:
        p.add_argument("--model", required=True,
                       help="built-in model name (toy_cnn, resnet50) or manifest path")
    if system:
        p.add_argument("--system", required=True,
                       help="system preset name or JSON path")
    if nodes:
        p.add_argument("--nodes", type=int, default=2, help="node count N")
    if mode:
        p.add_argument("--mode", choices=("pipeline", "waiting"),
                       default="pipeline", help="latency composition mode")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="RNG seed")


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--noise", type=float, default=1.6,
                   help="synthetic dataset noise level")
    p.add_argument("--data-seed", type=int, default=0,
                   help="synthetic dataset seed")
    p.add_argument("--train-per-class", type=int, default=60)
    p.add_argument("--test-per-class", type=int, default=20)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disco",
        description="Distributed inference with sparse inter-node communication: "
                    "latency modeling, sub-row pruning, simulation, and training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="per-layer latency CSV (+ figure)")
    _add_common(p, seed=False)
    p.add_argument("--sparsity", type=float, default=None,
                   help="uniform communication sparsity in [0, 1]")
    p.add_argument("--mask", default=None, help="mask JSON path")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("equilibrium", help="per-layer equilibrium sparsity CSV (+ figure)")
    _add_common(p, seed=False)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("prune", help="select sub-rows to prune; writes a mask file")
    _add_common(p, system=False, mode=False)
    p.add_argument("--weights", default=None, help="weights file (needed for l1)")
    p.add_argument("--strategy", choices=("l1", "disco_l1", "random"), default="l1")
    p.add_argument("--sparsity", type=float, required=True,
                   help="fraction of cross-node sub-rows to prune, in [0, 1]")
    p.add_argument("--out", required=True, help="mask JSON output path")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("train", help="dense training + iterative prune-and-finetune")
    p.add_argument("--model", default="toy_cnn",
                   help="built-in model name or manifest path")
    p.add_argument("--config", required=True, help="TrainConfig JSON path")
    p.add_argument("--out", required=True, help="checkpoint/metrics directory")
    _add_dataset_flags(p)
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run the distributed protocol simulator")
    _add_common(p)
    p.add_argument("--weights", required=True, help="weights file")
    p.add_argument("--mask", default=None, help="mask JSON (default: dense)")
    p.add_argument("--input", default=None,
                   help="input tensor file (raw f32 + .shape sidecar); "
                        "default: seeded random")
    p.add_argument("--batch", type=int, default=1,
                   help="batch size for the seeded random input")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--verify", action="store_true",
                   help="compare against the centralized forward pass")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="accuracy/latency sweep CSV (+ figure)")
    p.add_argument("--model", required=True)
    p.add_argument("--system", required=True)
    p.add_argument("--nodes", default="2", help="comma-separated node counts")
    p.add_argument("--mode", choices=("pipeline", "waiting"), default="pipeline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", default="l1",
                   help="comma-separated: l1 and/or random")
    p.add_argument("--sparsity", required=True,
                   help="comma-separated prune fractions, or 'equilibrium'")
    p.add_argument("--weights", required=True, help="weights file to score/evaluate")
    p.add_argument("--out", required=True, help="output directory")
    _add_dataset_flags(p)
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, MaskError, TrainError, ValueError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
