"""Command-line entry point."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .context import build_context
from .hypernet import stability_bound
from .pipeline import (
    EXIT_ABORT, EXIT_INVALID, EXIT_NOTHING, EXIT_OK, NothingFuseable, ValidationFailed,
    export_from_checkpoint, export_fused, load_config, run_fuse, sweep, sweep_csv,
)
from .store import AdapterFormatError, load_adapter, read_tensors, validate_adapter
from .topology import TransferGroup, TransferUnit, build_groups, make_layer_maps
from .trainer import TrainingAborted

log = logging.getLogger("adapterfuse")


def descriptors_csv(aset, block_rows: int = 0, s_len: int = 0) -> str:
    """One row per block token of every pair: unit id, segment, position, s_1..s_len."""
    r_max = max((k.rank for k in aset.pairs), default=0)
    c = block_rows or r_max
    s_len = s_len or r_max
    lines = [",".join(["unit", "segment", "position"] + [f"s{i + 1}" for i in range(s_len)])]
    for key in sorted(aset.pairs):
        pair = aset.pairs[key]
        group = TransferGroup(0, key.module_type, key.rank, 0)
        unit = TransferUnit(group, key.layer, pair, [])
        ctx = build_context(unit, c, s_len)
        for tok, desc in zip(ctx.target_tokens, ctx.target_descriptors):
            lines.append(",".join([unit.name, tok.segment, str(tok.position)] + [repr(float(v)) for v in desc.values]))
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    aset = load_adapter(args.adapter)
    text = descriptors_csv(aset, args.block_rows, args.s_len)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_align(args) -> int:
    target = load_adapter(args.target, "target")
    sources = [load_adapter(p, f"source{k}") for k, p in enumerate(args.sources)]
    for lm in make_layer_maps(target, sources):
        print(f"source {lm.source_index} ({lm.target_layers} -> {lm.source_layers} layers): "
              + " ".join(f"{l}->{s}" for l, s in enumerate(lm.table())))
    groups = build_groups(target, sources)
    print("group,module_type,rank," + ",".join(f"source{k}" for k in range(len(sources))))
    for g in groups:
        present = [str(int(any(k.module_type == g.module_type and k.rank == g.rank for k in s.pairs)))
                   for s in sources]
        print(f"{g.group_id},{g.module_type},{g.rank}," + ",".join(present))
    if not groups:
        print("nothing fuseable", file=sys.stderr)
        return EXIT_NOTHING
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg = load_config(args.config)
    if args.output:
        cfg.output = args.output
    result = run_fuse(cfg)
    print(f"fused {len(result.report)} units -> {cfg.output} (config {result.config_hash})")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = load_config(args.config)
    if args.output:
        cfg.output = args.output
    result = export_from_checkpoint(cfg, args.checkpoint)
    export_fused(result.fused, result.report, cfg.output, cfg.report, result.deltas,
                 Path(cfg.output).with_suffix(".deltas.safetensors"))
    print(f"exported {len(result.report)} units -> {cfg.output}")
    return EXIT_OK


def verify_fused(fused, target=None, report_rows=None, deltas=None) -> list[str]:
    """Invariant suite for an exported adapter; returns the violations found."""
    problems = list(validate_adapter(fused))
    if target is not None:
        if set(fused.pairs) != set(target.pairs):
            problems.append("module set differs from target")
        for key, pair in target.pairs.items():
            if key in fused.pairs and fused.pairs[key].A.tobytes() != pair.A.tobytes():
                problems.append(f"lora_A changed @ {key}")
        touched = set(deltas or {})
        for key, pair in target.pairs.items():
            if key in fused.pairs and key not in touched and fused.pairs[key].B.tobytes() != pair.B.tobytes():
                problems.append(f"non-aligned B changed @ {key}")
        for name, arr in target.extras.items():
            if name not in fused.extras or fused.extras[name].tobytes() != arr.tobytes():
                problems.append(f"extra tensor changed: {name}")
    if report_rows is not None and deltas is not None and target is not None:
        by_layer = {(k.module_type, k.rank, k.layer): k for k in deltas}
        for row in report_rows:
            key = by_layer.get((row["module_type"], int(row["rank"]), int(row["layer"])))
            if key is None:
                problems.append(f"report row without delta: {row['unit']}")
                continue
            lhs, ident, bound = stability_bound(target.pairs[key], deltas[key], float(row["alpha"]))
            for name, value in (("lhs", lhs), ("frob_identity", ident), ("bound", bound)):
                logged = float(row[name])
                if abs(value - logged) > 1e-6 * max(abs(value), 1e-30):
                    problems.append(f"{row['unit']}: {name} {logged} != recomputed {value}")
            if lhs > bound * (1 + 1e-9):
                problems.append(f"{row['unit']}: lhs exceeds bound")
    return problems


def _read_report(path) -> list[dict]:
    import csv
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _read_deltas(path, fused) -> dict:
    by_name = {p.tensor_names()[1]: k for k, p in fused.pairs.items()}
    out = {}
    for name, arr in read_tensors(path).items():
        out[by_name[name.removeprefix("delta.")]] = arr.astype(np.float64)
    return out


def cmd_verify(args) -> int:
    fused = load_adapter(args.adapter)
    target = load_adapter(args.target) if args.target else None
    deltas_path = args.deltas or Path(args.adapter).with_suffix(".deltas.safetensors")
    deltas = _read_deltas(deltas_path, fused) if Path(deltas_path).exists() else None
    rows = _read_report(args.report) if args.report else None
    problems = verify_fused(fused, target, rows, deltas)
    for p in problems:
        print(p)
    if problems:
        return EXIT_INVALID
    print("ok")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    values = [float(v) for v in args.values.split(",")]
    text = sweep_csv(sweep(cfg, args.param, values))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_harness(args) -> int:
    from .harness import desk_config, metrics_csv, run_preset

    cfg = load_config(args.config) if args.config else desk_config()
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_preset(args.preset, seeds, cfg)
    text = metrics_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adapterfuse", description="Fuse heterogeneous LoRA adapters.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="per-token singular-value descriptors as CSV")
    p.add_argument("adapter")
    p.add_argument("--block-rows", type=int, default=0)
    p.add_argument("--s-len", type=int, default=0)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("align", help="layer maps and the group matrix")
    p.add_argument("target")
    p.add_argument("sources", nargs="+")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("fuse", help="train the transfer network and export the fused adapter")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("export", help="export from a saved network checkpoint")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify", help="check an exported adapter's invariants")
    p.add_argument("adapter")
    p.add_argument("--target")
    p.add_argument("--report")
    p.add_argument("--deltas")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="fuse once per value of alpha_init or mu_gate")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--param", required=True, choices=["alpha_init", "mu_gate"])
    p.add_argument("--values", required=True, help="comma-separated")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("harness", help="synthetic transfer scenarios")
    p.add_argument("preset", choices=["single-source", "multi-source", "noisy-source", "anchor-variants"])
    p.add_argument("--seeds", default="0")
    p.add_argument("-c", "--config")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_harness)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationFailed as exc:
        for v in exc.violations:
            print(v, file=sys.stderr)
        return EXIT_INVALID
    except AdapterFormatError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except NothingFuseable as exc:
        print(exc, file=sys.stderr)
        return EXIT_NOTHING
    except TrainingAborted as exc:
        print(exc, file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
