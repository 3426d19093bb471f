"""Synthetic heterogeneous mini-families and end-to-end transfer scenarios.

Every task lives in the target's input space: task ``j`` draws inputs from
its own 4-dim subspace and adds a planted linear response ``M_j z`` on top
of whatever the family's base network outputs. Each family sees the input
through its own fixed orthonormal embedding, so a source expert carries the
task signal in its own geometry, never in target coordinates.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .denoise import RdmConfig
from .store import AdapterSet, LoraPair, ModuleKey, default_prefix
from .trainer import ResidualMlpSurrogate, TrainConfig

log = logging.getLogger(__name__)

INPUT_DIM = 64
OUTPUT_DIM = 8
TASK_DIM = 4
PRESETS = ("single-source", "multi-source", "noisy-source", "anchor-variants")
ANCHORS = ("task", "untrained", "foreign")


@dataclass(frozen=True)
class FamilyShape:
    family_id: str
    depth: int
    width: int
    module_order: tuple[str, ...] = ("up_proj", "down_proj")


@dataclass
class SyntheticFamily:
    family_id: str
    depth: int
    width: int
    module_order: tuple[str, ...]
    base: dict[tuple[int, str], np.ndarray]
    readout: np.ndarray  # OUTPUT_DIM x width
    embed: np.ndarray  # width x INPUT_DIM, orthonormal rows
    init_scale: float

    def surrogate(self, a_map: dict[ModuleKey, np.ndarray], dtype=torch.float64) -> ResidualMlpSurrogate:
        return ResidualMlpSurrogate(self.base, self.readout, a_map, self.depth, self.module_order, dtype)


@dataclass
class Task:
    index: int
    basis: np.ndarray  # INPUT_DIM x TASK_DIM, orthonormal columns
    response: np.ndarray  # OUTPUT_DIM x TASK_DIM


@dataclass
class SourceSlot:
    family: SyntheticFamily
    task: int | None  # None marks a pure-noise adapter


@dataclass
class TransferScenario:
    name: str
    seed: int
    target: SyntheticFamily
    target_task: int
    sources: list[SourceSlot]
    tasks: dict[int, Task]
    rank: int = 8
    replay_per_task: int = 128
    batch_size: int = 0  # 0: one full batch
    eval_per_task: int = 128
    anchor: str = "task"
    extra_tasks: dict[int, Task] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def rng(self, *tags) -> np.random.Generator:
        words = [self.seed] + [abs(hash_tag(t)) for t in tags]
        return np.random.default_rng(np.random.SeedSequence(words))

    # -- data ------------------------------------------------------------
    def sample(self, family: SyntheticFamily, task: int, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        t = self.tasks[task] if task in self.tasks else self.extra_tasks[task]
        z = rng.standard_normal((n, TASK_DIM))
        x = z @ t.basis.T @ family.embed.T
        base_out = family.surrogate({}).forward(torch.as_tensor(x), {}).numpy()
        return x, base_out + z @ t.response.T

    def batches(self, family, tasks, n_per_task, batch_size, rng) -> list[tuple[np.ndarray, np.ndarray]]:
        xs, ys = [], []
        for j in tasks:
            x, y = self.sample(family, j, n_per_task, rng)
            xs.append(x)
            ys.append(y)
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = rng.permutation(len(x))
        x, y = x[order], y[order]
        if batch_size <= 0:
            batch_size = len(x)  # full batch
        return [(x[i:i + batch_size], y[i:i + batch_size]) for i in range(0, len(x), batch_size)]

    def replay(self, source_subset=None) -> list:
        tasks = self.involved_tasks(source_subset)
        return self.batches(self.target, tasks, self.replay_per_task, self.batch_size, self.rng("replay", *tasks))

    def eval_batch(self) -> tuple[np.ndarray, np.ndarray]:
        if "eval" not in self._cache:
            x, y = zip(*self.batches(self.target, sorted(self.tasks), self.eval_per_task, 10**9, self.rng("eval")))
            self._cache["eval"] = (x[0], y[0])
        return self._cache["eval"]

    def involved_tasks(self, source_subset=None) -> list[int]:
        slots = self.source_slots(source_subset)
        return sorted({self.target_task} | {s.task for s in slots if s.task is not None})

    def source_slots(self, source_subset=None) -> list[SourceSlot]:
        if source_subset is None:
            return list(self.sources)
        return [self.sources[i] for i in source_subset]

    # -- adapters --------------------------------------------------------
    def target_adapter(self) -> AdapterSet:
        if "target" not in self._cache:
            if self.anchor == "task":
                aset, _ = train_adapter(self, self.target, [self.target_task], "target")
            elif self.anchor == "untrained":
                aset = init_adapter(self.target, self.rank, self.rng("anchor-init"), "target")
            elif self.anchor == "foreign":
                # a task outside the scenario: an anchor specialised elsewhere
                foreign = max(self.tasks) + 1
                self.extra_tasks[foreign] = make_task(foreign, self.rng("task", foreign))
                aset, _ = train_adapter(self, self.target, [foreign], "target")
            else:
                raise ValueError(f"unknown anchor variant {self.anchor!r}")
            self._cache["target"] = aset
        return self._cache["target"]

    def source_adapters(self, source_subset=None) -> list[AdapterSet]:
        if "sources" not in self._cache:
            out = []
            for k, slot in enumerate(self.sources):
                if slot.task is None:
                    out.append(noise_adapter(slot.family, self.rank, self.rng("noise", k), f"noise{k}"))
                else:
                    aset, _ = train_adapter(self, slot.family, [slot.task], f"source{k}")
                    out.append(aset)
            self._cache["sources"] = out
        if source_subset is None:
            return list(self._cache["sources"])
        return [self._cache["sources"][i] for i in source_subset]

    def joint_oracle_adapter(self) -> AdapterSet:
        if "oracle" not in self._cache:
            # trained far past the expert threshold: it has to bound the fused result from below
            aset, _ = train_adapter(self, self.target, sorted(self.tasks), "oracle", n_per_task=256,
                                    max_steps=2000, rel_threshold=1e-4)
            self._cache["oracle"] = aset
        return self._cache["oracle"]

    def surrogate(self, target: AdapterSet, dtype=torch.float64) -> ResidualMlpSurrogate:
        return self.target.surrogate({k: p.A for k, p in target.pairs.items()}, dtype)

    def evaluate(self, aset: AdapterSet) -> float:
        x, y = self.eval_batch()
        return evaluate_adapter(self.target, aset, x, y)


def hash_tag(tag) -> int:
    # stable across processes, unlike hash() on str
    return tag if isinstance(tag, int) else zlib.crc32(str(tag).encode("utf-8"))


def random_orthonormal(rng, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def make_task(index: int, rng, basis: np.ndarray | None = None) -> Task:
    if basis is None:
        basis = random_orthonormal(rng, INPUT_DIM, TASK_DIM)
    return Task(index, basis, rng.standard_normal((OUTPUT_DIM, TASK_DIM)))


def gen_family(shape: FamilyShape, rng, init_scale: float = 0.5, task_space: np.ndarray | None = None) -> SyntheticFamily:
    """Base weights ~ N(0, (init_scale / sqrt(width))^2); embedding preserves ``task_space``."""
    w = shape.width
    base = {
        (layer, m): rng.standard_normal((w, w)) * init_scale / np.sqrt(w)
        for layer in range(shape.depth)
        for m in shape.module_order
    }
    readout = rng.standard_normal((OUTPUT_DIM, w)) / np.sqrt(w)
    if w >= INPUT_DIM:
        embed = np.eye(w, INPUT_DIM) if task_space is None else random_orthonormal(rng, w, INPUT_DIM)
    else:
        # orthonormal rows whose span contains every task subspace
        keep = task_space if task_space is not None else np.eye(INPUT_DIM, w)
        extra = rng.standard_normal((INPUT_DIM, w - keep.shape[1]))
        extra -= keep @ (keep.T @ extra)
        span, _ = np.linalg.qr(np.concatenate([keep, extra], axis=1))
        embed = random_orthonormal(rng, w, w) @ span.T
    return SyntheticFamily(shape.family_id, shape.depth, w, shape.module_order, base, readout, embed, init_scale)


def gen_families(seed: int, shapes: list[FamilyShape], task_space: np.ndarray | None = None) -> list[SyntheticFamily]:
    out = []
    for i, shape in enumerate(shapes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7919, i]))
        # the target family reads inputs in their native coordinates
        out.append(gen_family(shape, rng, task_space=None if i == 0 else task_space))
    return out


def init_adapter(family: SyntheticFamily, rank: int, rng, family_id: str) -> AdapterSet:
    """Standard LoRA start: A uniform in +-sqrt(6/(r+w)), B = 0."""
    pairs = {}
    bound = np.sqrt(6.0 / (rank + family.width))
    for layer in range(family.depth):
        for m in family.module_order:
            key = ModuleKey(layer, m, rank)
            A = rng.uniform(-bound, bound, (rank, family.width)).astype(np.float32)
            B = np.zeros((family.width, rank), dtype=np.float32)
            pairs[key] = LoraPair(key, A, B, default_prefix(key))
    return AdapterSet(family_id, family.depth, pairs)


def noise_adapter(family: SyntheticFamily, rank: int, rng, family_id: str, scale: float = 0.1) -> AdapterSet:
    aset = init_adapter(family, rank, rng, family_id)
    for pair in aset.pairs.values():
        pair.A = (rng.standard_normal(pair.A.shape) * scale).astype(np.float32)
        pair.B = (rng.standard_normal(pair.B.shape) * scale).astype(np.float32)
    return aset


def evaluate_adapter(family: SyntheticFamily, aset: AdapterSet, x, y) -> float:
    surr = family.surrogate({k: p.A for k, p in aset.pairs.items()})
    b_map = {k: torch.as_tensor(p.B.astype(np.float64)) for k, p in aset.pairs.items()}
    with torch.no_grad():
        return float(surr.loss(b_map, (x, y)))


def train_adapter(scenario: TransferScenario, family: SyntheticFamily, tasks: list[int], family_id: str,
                  n_per_task: int = 256, lr: float = 1e-2, max_steps: int = 800,
                  rel_threshold: float = 0.01) -> tuple[AdapterSet, list[float]]:
    """Full-batch Adam on both LoRA factors until loss < rel_threshold * initial."""
    rng = scenario.rng("expert", family.family_id, *tasks)
    aset = init_adapter(family, scenario.rank, rng, family_id)
    (x, y), = scenario.batches(family, tasks, n_per_task, 10**9, rng)
    keys = sorted(aset.pairs)
    A = {k: torch.tensor(aset.pairs[k].A.astype(np.float64), requires_grad=True) for k in keys}
    B = {k: torch.tensor(aset.pairs[k].B.astype(np.float64), requires_grad=True) for k in keys}
    surr = family.surrogate({k: aset.pairs[k].A for k in keys})
    opt = torch.optim.Adam(list(A.values()) + list(B.values()), lr=lr)
    losses = []
    for _ in range(max_steps):
        opt.zero_grad()
        loss = ((surr.forward(x, B, A) - torch.as_tensor(y)) ** 2).mean()
        losses.append(loss.item())
        if losses[-1] < rel_threshold * losses[0]:
            break
        loss.backward()
        opt.step()
    else:
        log.warning("adapter %s stopped at step cap with loss ratio %.3g", family_id, losses[-1] / losses[0])
    for k in keys:
        aset.pairs[k].A = A[k].detach().numpy().astype(np.float32)
        aset.pairs[k].B = B[k].detach().numpy().astype(np.float32)
    return aset, losses


# -- scenarios ------------------------------------------------------------------

TARGET_SHAPE = FamilyShape("target", 4, 64)
SOURCE_SHAPES = [
    FamilyShape("src-a", 6, 48),
    FamilyShape("src-b", 5, 56, ("gate_proj", "up_proj", "down_proj")),
]
NOISE_SHAPES = [
    FamilyShape("noise-0", 3, 40),
    FamilyShape("noise-1", 5, 56),
    FamilyShape("noise-2", 6, 48),
    FamilyShape("noise-3", 4, 64),
]


def build_scenario(name: str, seed: int, **overrides) -> TransferScenario:
    if name not in PRESETS:
        raise ValueError(f"unknown scenario {name!r}; choose from {PRESETS}")
    n_tasks = 3 if name == "multi-source" else 2
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    frame = random_orthonormal(rng, INPUT_DIM, INPUT_DIM)
    tasks = {j: make_task(j, rng, frame[:, j * TASK_DIM:(j + 1) * TASK_DIM]) for j in range(n_tasks)}
    task_space = frame[:, : n_tasks * TASK_DIM]

    shapes = [TARGET_SHAPE, SOURCE_SHAPES[0]]
    slot_tasks: list[int | None] = [1]
    if name == "multi-source":
        shapes.append(SOURCE_SHAPES[1])
        slot_tasks.append(2)
    if name == "noisy-source":
        shapes += NOISE_SHAPES
        slot_tasks += [None] * len(NOISE_SHAPES)
    families = gen_families(seed, shapes, task_space)
    sources = [SourceSlot(f, t) for f, t in zip(families[1:], slot_tasks)]
    scen = TransferScenario(name, seed, families[0], 0, sources, tasks)
    return replace(scen, **overrides) if overrides else scen


def run_experiment(scenario: TransferScenario, fusion_cfg, source_subset=None, with_oracle: bool = True) -> dict:
    """Target-only, fused and joint-oracle losses on the held-out combined tasks."""
    from .pipeline import fuse_sets

    target = scenario.target_adapter()
    sources = scenario.source_adapters(source_subset)
    result = fuse_sets(
        target, sources, scenario.surrogate(target, fusion_cfg.train.dtype),
        scenario.replay(source_subset), fusion_cfg,
    )
    return {
        "scenario": scenario.name,
        "seed": scenario.seed,
        "n_sources": len(sources),
        "target_only_eval": scenario.evaluate(target),
        "fused_eval": scenario.evaluate(result.fused),
        "joint_oracle_eval": scenario.evaluate(scenario.joint_oracle_adapter()) if with_oracle else float("nan"),
        "result": result,
    }


def desk_config(**train_overrides):
    """Small network and long full-batch training, sized for one CPU core."""
    from .pipeline import DataConfig, FusionConfig, NetworkConfig

    train = dict(learning_rate=3e-3, epochs=600, grad_accum=1)
    train.update(train_overrides)
    return FusionConfig(
        network=NetworkConfig(d=32, heads=4, max_pos=256),
        rdm=RdmConfig(n_proj=64),
        train=TrainConfig(**train),
        data=DataConfig(replay_per_task=128, batch_size=0),
    )


def run_preset(preset: str, seeds, fusion_cfg, with_oracle: bool = True) -> list[dict]:
    """Rows for every seed; presets with a comparison emit one row per variant."""
    rows = []
    for seed in seeds:
        kw = dict(replay_per_task=fusion_cfg.data.replay_per_task, batch_size=fusion_cfg.data.batch_size)
        if preset == "anchor-variants":
            for anchor in ANCHORS:
                scen = build_scenario("single-source", seed, anchor=anchor, **kw)
                rows.append({**run_experiment(scen, fusion_cfg, with_oracle=with_oracle), "variant": anchor})
            continue
        scen = build_scenario(preset, seed, **kw)
        if preset == "single-source":
            rows.append({**run_experiment(scen, fusion_cfg, with_oracle=with_oracle), "variant": "single"})
        else:
            base = "one-source" if preset == "multi-source" else "clean"
            full = "two-source" if preset == "multi-source" else "noisy"
            rows.append({**run_experiment(scen, fusion_cfg, [0], with_oracle), "variant": base})
            rows.append({**run_experiment(scen, fusion_cfg, None, with_oracle), "variant": full})
    return rows


METRIC_COLUMNS = ["scenario", "variant", "seed", "n_sources", "target_only_eval", "fused_eval", "joint_oracle_eval"]


def metrics_csv(rows: list[dict]) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"
