"""Command-line pipeline driver.

Verbs: gen-toy, calibrate, compress, simulate, verify, report. Every
config field can be overridden with ``--set section.field=value``. Exit
codes: 0 success, 1 failed invariant or pipeline error, 2 usage/config
error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .config import ConfigError, load_config
from .container import ContainerError, write_container
from .model import load_model, save_model
from .photonic import EngineConfig, comparison, simulate
from .pipeline import (
    compress_model,
    hardware_from_config,
    load_calibration_inputs,
    read_plan,
    save_compressed,
    verify_artifacts,
    write_plan,
)
from .util import philox_rng
from .vit import build_toy_graph, collect_calibration, gen_toy_dataset, gen_toy_model, save_dataset


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON pipeline config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field by dotted name, e.g. targets.alpha=0.4")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--out", help="shorthand for --set paths.output=DIR")


def _config_from(args) -> dict:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"paths.output={args.out}")
    return load_config(args.config, overrides)


def cmd_gen_toy(args) -> int:
    out = Path(args.out or "toy")
    out.mkdir(parents=True, exist_ok=True)
    graph = build_toy_graph(
        hidden=args.hidden, heads=args.heads, mlp_ratio=args.mlp_ratio,
        blocks=args.blocks, classes=args.classes, in_dim=args.in_dim,
    )
    tensors = gen_toy_model(graph, seed=args.seed)
    save_model(out / "model.lten", graph, tensors)

    calib = philox_rng(args.seed, 7).normal(0.0, 1.0, size=(args.in_dim, args.calib_tokens))
    write_container(out / "calib.lten", {"inputs": calib}, extra={"kind": "calibration_inputs"})

    dataset = gen_toy_dataset(graph, tensors, samples=args.samples, tokens=args.tokens, seed=args.seed)
    save_dataset(out / "data.lten", dataset)
    print(f"wrote {out}/model.lten, calib.lten ({args.calib_tokens} tokens), data.lten ({args.samples} samples)")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _config_from(args)
    graph, tensors = load_model(cfg["paths"]["model"])
    inputs = load_calibration_inputs(cfg["paths"]["calibration"])
    calib = collect_calibration(graph, tensors, inputs)
    out = Path(cfg["paths"]["output"])
    out.mkdir(parents=True, exist_ok=True)
    write_container(
        out / "activations.lten",
        dict(calib.activations),
        extra={"kind": "calibration_activations", "sample_count": calib.sample_count},
    )
    print(f"recorded activations for {len(calib.activations)} layers ({calib.sample_count} tokens)")
    return 0


def cmd_compress(args) -> int:
    cfg = _config_from(args)
    engines, _ = hardware_from_config(cfg)
    start = time.perf_counter()
    graph, tensors, compressed, plan, summary = compress_model(cfg, engines)
    wall = time.perf_counter() - start

    out = Path(cfg["paths"]["output"])
    out.mkdir(parents=True, exist_ok=True)
    save_compressed(out / "compressed.lten", graph, tensors, compressed)
    write_plan(out / "plan.json", plan)
    (out / "run_meta.json").write_text(json.dumps({"wall_time_s": wall, "seed": cfg["seed"]}) + "\n")

    print(f"psi achieved: {summary['psi_achieved']:.4f} (target alpha {summary['alpha']})")
    for lid, info in summary["layers"].items():
        print(f"  {lid}: r={info['r']} d={info['d']}")
    print(f"wall time: {wall:.2f}s; artifacts in {out}/")
    return 0


def cmd_simulate(args) -> int:
    cfg = _config_from(args)
    engines, params = hardware_from_config(cfg)
    graph, _ = load_model(cfg["paths"]["model"])
    out = Path(cfg["paths"]["output"])
    out.mkdir(parents=True, exist_ok=True)
    batch = cfg["hardware"]["batch_tokens"]

    plan = None
    if args.plan:
        plan = read_plan(args.plan)
    elif not args.baseline:
        print("error: provide --plan PATH or --baseline", file=sys.stderr)
        return 2

    if args.compare:
        if plan is None:
            print("error: --compare needs --plan", file=sys.stderr)
            return 2
        base_engines = EngineConfig.baseline_scaled() if cfg["hardware"]["engine_config"] is None else engines
        base = simulate(None, graph, base_engines, params, batch)
        comp = simulate(plan, graph, engines, params, batch)
        base_json, comp_json = base.to_json(), comp.to_json()
        (out / "report_baseline.json").write_text(json.dumps(base_json, sort_keys=True, indent=2) + "\n")
        (out / "report.json").write_text(json.dumps(comp_json, sort_keys=True, indent=2) + "\n")
        comp.write_csv(out / "report.csv")
        cmp_data = comparison(base, comp)
        (out / "comparison.json").write_text(json.dumps(cmp_data, sort_keys=True, indent=2) + "\n")
        print(f"EDP ratio (baseline / compressed): {cmp_data['edp_ratio']:.3f}")
        print(f"energy ratio: {cmp_data['energy_ratio']:.3f}, latency ratio: {cmp_data['latency_ratio']:.3f}")
        return 0

    report = simulate(plan, graph, engines, params, batch)
    (out / "report.json").write_text(json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n")
    report.write_csv(out / "report.csv")
    print(f"total energy: {report.total_energy:.3e} pJ, cycles: {report.cycles}, EDP: {report.edp:.3e} pJ*s")
    return 0


def cmd_verify(args) -> int:
    cfg = _config_from(args)
    out = Path(cfg["paths"]["output"])
    checks = verify_artifacts(
        original_path=cfg["paths"]["model"],
        compressed_path=args.compressed or out / "compressed.lten",
        plan_path=args.plan or out / "plan.json",
        calibration_path=cfg["paths"]["calibration"],
        quant_noise_ratio=args.quant_noise,
        seed=cfg["seed"],
    )
    failed = 0
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"[{status}] {check.name}: {check.detail}")
        failed += 0 if check.passed else 1
    return 1 if failed else 0


def cmd_report(args) -> int:
    data = json.loads(Path(args.report).read_text())
    if "edp_ratio" in data:
        print(f"{'metric':<18}{'baseline':>16}{'compressed':>16}{'ratio':>10}")
        for metric, key in (("energy (pJ)", "energy_pj"), ("latency (s)", "latency_s"), ("EDP (pJ*s)", "edp_pj_s")):
            b, c = data["baseline"][key], data["compressed"][key]
            print(f"{metric:<18}{b:>16.4e}{c:>16.4e}{b / c:>10.3f}")
        return 0
    print(f"total energy: {data['total_energy_pj']:.4e} pJ over {data['cycles']} cycles")
    for comp, value in sorted(data["energy_pj"].items()):
        print(f"  {comp:<16}{value:>16.4e} pJ")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opticomp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate a seeded toy model + calibration + dataset")
    p.add_argument("--out", default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=48)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--mlp-ratio", type=int, default=2)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--in-dim", type=int, default=24)
    p.add_argument("--calib-tokens", type=int, default=256)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--tokens", type=int, default=16)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("calibrate", help="record per-layer input activations")
    _add_config_args(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("compress", help="run the full compression pipeline")
    _add_config_args(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("simulate", help="cost-model a plan (or dense baseline)")
    _add_config_args(p)
    p.add_argument("--plan", help="plan JSON from compress")
    p.add_argument("--baseline", action="store_true", help="simulate the uncompressed model")
    p.add_argument("--compare", action="store_true", help="emit baseline vs compressed comparison")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="check compressed artifacts against the original")
    _add_config_args(p)
    p.add_argument("--compressed", help="compressed model path (default: <out>/compressed.lten)")
    p.add_argument("--plan", help="plan path (default: <out>/plan.json)")
    p.add_argument("--quant-noise", type=float, default=None,
                   help="also evaluate 8-bit quantization with this noise ratio")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="pretty-print a report or comparison JSON")
    p.add_argument("report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ContainerError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
