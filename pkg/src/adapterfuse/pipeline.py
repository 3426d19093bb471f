"""End-to-end fusion: align, train, final transfer pass, export, report."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoise import RdmConfig
from .hypernet import HyperNetConfig, HyperNetParams, apply_patch, params_from_tensors, params_to_tensors, stability_bound
from .store import AdapterSet, load_adapter, read_tensors, save_adapter, validate_adapter, write_tensors
from .topology import build_groups, make_layer_maps, select_active_units
from .trainer import TrainConfig, TrainingAborted, fit, make_state, predict_all

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_NOTHING, EXIT_ABORT = 0, 1, 2, 3


class ValidationFailed(ValueError):
    def __init__(self, violations):
        super().__init__("adapter validation failed: " + "; ".join(violations))
        self.violations = violations


class NothingFuseable(ValueError):
    pass


@dataclass
class NetworkConfig:
    d: int = 1024
    heads: int = 8
    max_pos: int = 4096
    block_rows: int = 0  # 0: the widest group rank
    s_len: int = 0  # 0: the widest group rank
    mu_gate: float = 0.10
    use_positions: bool = True
    seed: int = 0


@dataclass
class DataConfig:
    scenario: str = "single-source"
    seed: int = 0
    replay_per_task: int = 300
    batch_size: int = 1


@dataclass
class FusionConfig:
    target: str = ""
    sources: list[str] = field(default_factory=list)
    output: str = "fused.safetensors"
    report: str = "report.csv"
    checkpoint: str = ""
    loss_curve: str = ""
    network: NetworkConfig = field(default_factory=NetworkConfig)
    rdm: RdmConfig = field(default_factory=RdmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    aliases: dict[str, str] = field(default_factory=dict)

    def canonical(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_value(self, parameter: str, value) -> "FusionConfig":
        if parameter == "alpha_init":
            return dataclasses.replace(self, train=dataclasses.replace(self.train, alpha_init=float(value)))
        if parameter == "mu_gate":
            return dataclasses.replace(self, network=dataclasses.replace(self.network, mu_gate=float(value)))
        raise ValueError(f"cannot sweep {parameter!r}; choose alpha_init or mu_gate")


_SECTIONS = {"network": NetworkConfig, "rdm": RdmConfig, "train": TrainConfig, "data": DataConfig}
_TRAIN_ALIASES = {"lr": "learning_rate"}


def _coerce(kind, raw: str):
    if kind is bool or kind == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw.strip()


def load_config(path: str | Path) -> FusionConfig:
    """Read the INI-style config: [paths] plus one section per module."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    text = Path(path).read_text()
    parser.read_string(text)
    base = Path(path).resolve().parent
    cfg = FusionConfig()
    if parser.has_section("paths"):
        p = parser["paths"]

        def resolve(v):
            return str((base / v).resolve()) if v else ""

        cfg.target = resolve(p.get("target", ""))
        cfg.sources = [resolve(s) for s in p.get("sources", "").split()]
        for name in ("output", "report", "checkpoint", "loss_curve"):
            setattr(cfg, name, resolve(p.get(name, getattr(cfg, name))))
    for section, kind in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        current = getattr(cfg, section)
        fields = {f.name: f.type for f in dataclasses.fields(kind)}
        updates = {}
        for key, raw in parser[section].items():
            key = _TRAIN_ALIASES.get(key, key) if section == "train" else key
            if key not in fields:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            updates[key] = _coerce(fields[key], raw)
        setattr(cfg, section, dataclasses.replace(current, **updates))
    if parser.has_section("aliases"):
        cfg.aliases = dict(parser["aliases"])
    return cfg


def dump_config(cfg: FusionConfig) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["paths"] = {
        "target": cfg.target,
        "sources": " ".join(cfg.sources),
        "output": cfg.output,
        "report": cfg.report,
        "checkpoint": cfg.checkpoint,
        "loss_curve": cfg.loss_curve,
    }
    for section in _SECTIONS:
        parser[section] = {k: str(v) for k, v in dataclasses.asdict(getattr(cfg, section)).items()}
    parser["aliases"] = dict(cfg.aliases)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# -- fusion -----------------------------------------------------------------------

@dataclass
class FusionResult:
    fused: AdapterSet
    report: list[dict]
    params: HyperNetParams
    curve: list[dict]
    deltas: dict
    config_hash: str


def hypernet_config(cfg: FusionConfig, groups, n_sources: int) -> HyperNetConfig:
    r_max = max(g.rank for g in groups)
    net = cfg.network
    return HyperNetConfig(
        d=net.d, heads=net.heads, max_pos=net.max_pos,
        block_rows=net.block_rows or r_max, rank=r_max, s_len=net.s_len or r_max,
        mu_gate=net.mu_gate, alpha_init=cfg.train.alpha_init,
        n_groups=len(groups), n_sources=n_sources,
        use_positions=net.use_positions, seed=net.seed,
    )


def prepare(target: AdapterSet, sources: list[AdapterSet], cfg: FusionConfig):
    violations = validate_adapter(target)
    for src in sources:
        violations += [f"{src.family_id}: {v}" for v in validate_adapter(src)]
    if violations:
        raise ValidationFailed(violations)
    if not sources:
        raise ValueError("at least one source adapter is required")
    groups = build_groups(target, sources, cfg.aliases)
    if not groups:
        raise NothingFuseable("nothing fuseable: no (module_type, rank) shared by target and sources")
    units = select_active_units(groups, target, sources, make_layer_maps(target, sources), cfg.aliases)
    if not units:
        raise NothingFuseable("nothing fuseable: no target layer has a matched source module")
    return groups, units


def final_transfer(target: AdapterSet, state, groups, cfg_hash: str, seed: int):
    """Run the network once more and patch a copy of the target; A is never touched."""
    params = state.params
    with torch.no_grad():
        preds = predict_all(state)
    alphas = params.alphas.detach().cpu().numpy().astype(np.float64)
    fused = target.copy()
    report, deltas = [], {}
    for tc, pred in zip(state.contexts, preds):
        unit = tc.ctx.unit
        key = unit.target_pair.key
        # rounded to the stored precision so the logged delta reproduces the report exactly
        delta = pred.delta_b.detach().cpu().numpy().astype(np.float32).astype(np.float64)
        alpha = float(alphas[tc.group])
        fused.pairs[key] = apply_patch(target.pairs[key], delta, alpha)
        lhs, ident, bound = stability_bound(target.pairs[key], delta, alpha)
        deltas[key] = delta
        report.append({
            "unit": unit.name,
            "group": unit.group.group_id,
            "module_type": unit.group.module_type,
            "rank": unit.group.rank,
            "layer": unit.target_layer,
            "n_sources": len(unit.source_pairs),
            "delta_b_norm": float(np.linalg.norm(delta)),
            "alpha": alpha,
            "lhs": lhs,
            "frob_identity": ident,
            "bound": bound,
            "attention_entropy": pred.attention_entropy,
            "seed": seed,
            "config_hash": cfg_hash,
        })
    return fused, report, deltas


def fuse_sets(target: AdapterSet, sources: list[AdapterSet], surrogate, dataset, cfg: FusionConfig,
              params: HyperNetParams | None = None) -> FusionResult:
    groups, units = prepare(target, sources, cfg)
    if params is None:
        params = HyperNetParams(hypernet_config(cfg, groups, len(sources)), dtype=cfg.train.dtype)
    state = make_state(target, units, params, surrogate, cfg.train, cfg.rdm)
    curve = fit(state, dataset) if cfg.train.epochs > 0 else []
    cfg_hash = cfg.config_hash()
    fused, report, deltas = final_transfer(target, state, groups, cfg_hash, cfg.train.seed)
    return FusionResult(fused, report, params, curve, deltas, cfg_hash)


def scenario_inputs(cfg: FusionConfig, target: AdapterSet):
    """Surrogate objective and replay data for the configured synthetic scenario."""
    from .harness import build_scenario

    scen = build_scenario(cfg.data.scenario, cfg.data.seed,
                          replay_per_task=cfg.data.replay_per_task, batch_size=cfg.data.batch_size)
    return scen.surrogate(target, cfg.train.dtype), scen.replay()


def load_inputs(cfg: FusionConfig) -> tuple[AdapterSet, list[AdapterSet]]:
    if not cfg.sources:
        raise ValueError("config lists no source adapters")
    paths = [cfg.target, *cfg.sources]
    if len(set(paths)) != len(paths):
        raise ValueError("target and source paths must be distinct")
    return load_adapter(cfg.target), [load_adapter(p) for p in cfg.sources]


def fuse(cfg: FusionConfig, surrogate=None, dataset=None) -> FusionResult:
    target, sources = load_inputs(cfg)
    if surrogate is None or dataset is None:
        surrogate, dataset = scenario_inputs(cfg, target)
    return fuse_sets(target, sources, surrogate, dataset, cfg)


def export_from_checkpoint(cfg: FusionConfig, checkpoint: str | Path) -> FusionResult:
    target, sources = load_inputs(cfg)
    groups, units = prepare(target, sources, cfg)
    params = HyperNetParams(hypernet_config(cfg, groups, len(sources)), dtype=cfg.train.dtype)
    params_from_tensors(params, read_tensors(checkpoint))
    state = make_state(target, units, params, None, cfg.train, cfg.rdm)
    cfg_hash = cfg.config_hash()
    fused, report, deltas = final_transfer(target, state, groups, cfg_hash, cfg.train.seed)
    return FusionResult(fused, report, params, [], deltas, cfg_hash)


REPORT_COLUMNS = [
    "unit", "group", "module_type", "rank", "layer", "n_sources", "delta_b_norm", "alpha",
    "lhs", "frob_identity", "bound", "attention_entropy", "seed", "config_hash",
]


def report_csv(report: list[dict]) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for row in report:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in REPORT_COLUMNS))
    return "\n".join(lines) + "\n"


def export_fused(fused: AdapterSet, report: list[dict], output: str | Path, report_path: str | Path | None = None,
                 deltas: dict | None = None, deltas_path: str | Path | None = None) -> None:
    save_adapter(fused, output)
    if report_path:
        Path(report_path).write_text(report_csv(report))
    if deltas is not None and deltas_path:
        write_tensors({f"delta.{fused.pairs[k].tensor_names()[1]}": v for k, v in deltas.items()}, deltas_path)


def save_checkpoint(params: HyperNetParams, path: str | Path) -> None:
    write_tensors(params_to_tensors(params), path)


def checkpoint_path(cfg: FusionConfig, cfg_hash: str) -> Path:
    if cfg.checkpoint:
        return Path(cfg.checkpoint)
    return Path(cfg.output).with_name(f"hypernet-{cfg_hash}.safetensors")


def run_fuse(cfg: FusionConfig, surrogate=None, dataset=None) -> FusionResult:
    """``fuse`` plus every configured artifact written to disk."""
    result = fuse(cfg, surrogate, dataset)
    export_fused(result.fused, result.report, cfg.output, cfg.report, result.deltas,
                 Path(cfg.output).with_suffix(".deltas.safetensors"))
    save_checkpoint(result.params, checkpoint_path(cfg, result.config_hash))
    if cfg.loss_curve:
        from .trainer import loss_curve_csv
        Path(cfg.loss_curve).write_text(loss_curve_csv(result.curve))
    return result


# -- sweeps -----------------------------------------------------------------------

SWEEP_COLUMNS = ["parameter", "value", "fused_eval", "target_only_eval", "mean_delta_b_norm", "max_lhs_over_bound"]


def sweep(cfg: FusionConfig, parameter: str, values, scenario=None, source_subset=None) -> list[dict]:
    """Fuse and evaluate once per value on one shared scenario and seed."""
    from .harness import build_scenario, run_experiment

    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if scenario is None:
        scenario = build_scenario(cfg.data.scenario, cfg.data.seed,
                                  replay_per_task=cfg.data.replay_per_task, batch_size=cfg.data.batch_size)
    rows = []
    for value in values:
        metrics = run_experiment(scenario, cfg.with_value(parameter, value), source_subset, with_oracle=False)
        report = metrics["result"].report
        rows.append({
            "parameter": parameter,
            "value": float(value),
            "fused_eval": metrics["fused_eval"],
            "target_only_eval": metrics["target_only_eval"],
            "mean_delta_b_norm": float(np.mean([r["delta_b_norm"] for r in report])),
            "max_lhs_over_bound": max((r["lhs"] / r["bound"] if r["bound"] > 0 else 0.0) for r in report),
        })
    return rows


def sweep_csv(rows: list[dict]) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in SWEEP_COLUMNS))
    return "\n".join(lines) + "\n"
