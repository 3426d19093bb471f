"""Training the transfer network under the joint objective with dynamic patching."""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch

from .context import build_context
from .denoise import RdmConfig, prior_sampler, projection_bank, rdm_loss
from .hypernet import (
    ContextBatch, DeltaPrediction, HyperNetParams, TensorContext, batch_contexts, pack_context, predict_batch,
)
from .store import AdapterSet, ModuleKey
from .topology import TransferUnit

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    epochs: int = 3
    grad_accum: int = 8
    lambda_reg: float = 0.005
    alpha_init: float = 0.3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    precision: str = "f64"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "f64" else torch.float32


class SurrogateObjective(Protocol):
    """Stand-in for the language-modeling loss.

    ``loss`` receives the live B matrix of every target module (patched ones
    carry autograd history back to the transfer network) and a data batch.
    """

    def loss(self, b_map: dict[ModuleKey, torch.Tensor], batch) -> torch.Tensor: ...


class ResidualMlpSurrogate:
    """MSE of a residual ReLU stack whose module weights are W0 + B A.

    Each layer applies its modules in ``module_order``: all but the last are
    ``h = relu(W h)``, the last is added back as ``x = x + W h``.
    """

    def __init__(self, base: dict[tuple[int, str], np.ndarray], readout: np.ndarray,
                 a_map: dict[ModuleKey, np.ndarray], layer_count: int,
                 module_order: Sequence[str], dtype=torch.float64):
        self.dtype = dtype
        self.layer_count = layer_count
        self.module_order = list(module_order)
        self.base = {k: torch.as_tensor(np.asarray(v, dtype=np.float64), dtype=dtype) for k, v in base.items()}
        self.readout = torch.as_tensor(np.asarray(readout, dtype=np.float64), dtype=dtype)
        self.a_map = {k: torch.as_tensor(np.asarray(v, dtype=np.float64), dtype=dtype) for k, v in a_map.items()}
        self._keys = {(k.layer, k.module_type): k for k in a_map}

    def forward(self, x: torch.Tensor, b_map: dict[ModuleKey, torch.Tensor], a_map=None) -> torch.Tensor:
        a_map = self.a_map if a_map is None else a_map
        x = torch.as_tensor(x, dtype=self.dtype)
        for layer in range(self.layer_count):
            h = x
            for i, mtype in enumerate(self.module_order):
                out = h @ self.base[(layer, mtype)].T
                key = self._keys.get((layer, mtype))
                if key is not None:
                    out = out + (h @ a_map[key].T) @ b_map[key].T
                if i < len(self.module_order) - 1:
                    h = torch.relu(out)
                else:
                    x = x + out
        return x @ self.readout.T

    def loss(self, b_map, batch) -> torch.Tensor:
        x, y = batch
        pred = self.forward(x, b_map)
        return ((pred - torch.as_tensor(y, dtype=self.dtype)) ** 2).mean()


@dataclass
class GradReport:
    max_rel_error: dict[str, float]
    tolerance: float
    coords_checked: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


@dataclass
class TrainState:
    """Target adapter, transfer units and the trainable network, plus optimizer."""

    target: AdapterSet
    units: list[TransferUnit]
    contexts: list[TensorContext]
    params: HyperNetParams
    surrogate: SurrogateObjective
    train_cfg: TrainConfig
    rdm_cfg: RdmConfig
    bank: torch.Tensor
    live_b: dict[ModuleKey, torch.Tensor]
    optimizer: torch.optim.Optimizer
    step: int = 0  # micro-steps taken
    updates: int = 0
    accum: dict[str, torch.Tensor] = field(default_factory=dict)
    accum_count: int = 0
    batches: list[ContextBatch] = field(default_factory=list)

    def __post_init__(self):
        if not self.batches:
            self.batches = batch_contexts(self.contexts)

    @property
    def n_groups(self) -> int:
        return self.params.cfg.n_groups


def make_state(target: AdapterSet, units: list[TransferUnit], params: HyperNetParams,
               surrogate: SurrogateObjective, train_cfg: TrainConfig, rdm_cfg: RdmConfig) -> TrainState:
    cfg = params.cfg
    dtype = params.dtype
    contexts = [pack_context(build_context(u, cfg.block_rows, cfg.s_len), cfg, dtype) for u in units]
    bank = torch.as_tensor(projection_bank(rdm_cfg.n_proj, cfg.d, rdm_cfg.seed), dtype=dtype)
    live_b = {k: torch.as_tensor(p.B.astype(np.float64), dtype=dtype) for k, p in target.pairs.items()}
    opt = torch.optim.Adam(
        params.parameters(), lr=train_cfg.learning_rate,
        betas=(train_cfg.beta1, train_cfg.beta2), eps=train_cfg.eps,
    )
    return TrainState(target, units, contexts, params, surrogate, train_cfg, rdm_cfg, bank, live_b, opt)


def step_seed(run_seed: int, step: int, unit: int, side: int) -> int:
    return int(np.random.SeedSequence([run_seed, step, unit, side]).generate_state(1)[0])


@dataclass
class ObjectiveTerms:
    total: torch.Tensor
    surrogate: torch.Tensor
    rdm: torch.Tensor  # per-group mean over units of rdm(z_t) + rdm(z_s)
    deltas: list[torch.Tensor]
    grads: list[torch.Tensor] | None = None


def predict_all(state: TrainState) -> list[DeltaPrediction]:
    """Per-unit predictions in unit order, computed one shape bucket at a time."""
    preds: list[DeltaPrediction | None] = [None] * len(state.contexts)
    for cb in state.batches:
        delta, z_t, z_s, ent = predict_batch(cb, state.params)
        for j, i in enumerate(cb.members):
            tc = state.contexts[i]
            preds[i] = DeltaPrediction(tc.ctx.unit, delta[j], float(ent[j]), z_t[j], z_s[j])
    return preds


def batch_rdm(state: TrainState, z: torch.Tensor, members: list[int], step: int, side: int) -> torch.Tensor:
    """RDM for a stacked (U, n, d) slab; unit i draws its prior from its own step seed."""
    seed = state.rdm_cfg.seed
    draws = [prior_sampler(state.rdm_cfg, step_seed(seed, step, i, side)) for i in members]

    def noise(shape):
        return np.stack([draw(shape[1:]) for draw in draws])

    return rdm_loss(z, state.rdm_cfg, state.bank, noise)


@contextmanager
def patched(live_b: dict[ModuleKey, torch.Tensor], patches: dict[ModuleKey, torch.Tensor]):
    """Temporarily swap patched B tensors into the live map; always restore."""
    originals = {k: live_b[k] for k in patches}
    try:
        live_b.update(patches)
        yield live_b
    finally:
        live_b.update(originals)


def joint_objective(state: TrainState, batch, step: int | None = None, wrt=None) -> ObjectiveTerms:
    """Surrogate loss on the patched target plus the averaged group RDM terms.

    With ``wrt`` (a list of tensors) the backward pass runs while the patch is
    still applied, and the gradients are returned in ``grads``.
    """
    step = state.step if step is None else step
    params = state.params
    G = state.n_groups
    lam = state.train_cfg.lambda_reg
    rdm_sum = torch.zeros(G, dtype=params.dtype)
    rdm_count = torch.zeros(G, dtype=params.dtype)
    patches = {}
    deltas: list[torch.Tensor | None] = [None] * len(state.contexts)
    for cb in state.batches:
        delta, z_t, z_s, _ = predict_batch(cb, params)
        for j, i in enumerate(cb.members):
            tc = state.contexts[i]
            key = tc.ctx.unit.target_pair.key
            patches[key] = state.live_b[key] + params.alphas[tc.group] * delta[j]
            deltas[i] = delta[j]
        if lam != 0:
            per_unit = batch_rdm(state, z_t, cb.members, step, 0) + batch_rdm(state, z_s, cb.members, step, 1)
            rdm_sum = rdm_sum.index_add(0, cb.groups, per_unit)
        rdm_count = rdm_count.index_add(0, cb.groups, torch.ones(len(cb.members), dtype=params.dtype))
    group_terms = rdm_sum / rdm_count.clamp_min(1)
    grads = None
    with patched(state.live_b, patches) as live:
        surr = state.surrogate.loss(live, batch)
        total = surr + lam * group_terms.sum() / G
        if wrt is not None:
            grads = torch.autograd.grad(total, wrt, allow_unused=True)
            grads = [torch.zeros_like(p) if g is None else g for p, g in zip(wrt, grads)]
    return ObjectiveTerms(total, surr, group_terms, deltas, grads)


def training_step(state: TrainState, batch) -> dict[str, float]:
    """One micro-step; every ``grad_accum`` micro-steps the optimizer updates."""
    params = list(state.params.named_parameters())
    terms = joint_objective(state, batch, wrt=[p for _, p in params])
    grads = terms.grads
    if not torch.isfinite(terms.total) or not all(torch.isfinite(g).all() for g in grads):
        raise TrainingAborted(f"non-finite loss or gradient at micro-step {state.step}")

    for (name, _), g in zip(params, grads):
        state.accum[name] = state.accum[name] + g if name in state.accum else g.clone()
    state.accum_count += 1
    state.step += 1
    if state.accum_count == state.train_cfg.grad_accum:
        for name, p in params:
            p.grad = state.accum[name] / state.accum_count
        state.optimizer.step()
        state.optimizer.zero_grad(set_to_none=True)
        state.accum.clear()
        state.accum_count = 0
        state.updates += 1
    rdm_mean = terms.rdm.detach().sum().item() / state.n_groups
    return {
        "step": state.step,
        "surrogate": terms.surrogate.item(),
        "rdm": rdm_mean,
        "total": terms.total.item(),
    }


def fit(state: TrainState, dataset: Sequence, epochs: int | None = None) -> list[dict[str, float]]:
    if not dataset:
        raise ValueError("dataset is empty")
    epochs = state.train_cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(state.train_cfg.seed)
    curve = []
    for epoch in range(epochs):
        for idx in rng.permutation(len(dataset)):
            curve.append(training_step(state, dataset[idx]))
        log.debug("epoch %d: last total %.6g", epoch, curve[-1]["total"] if curve else float("nan"))
    return curve


def grad_check(state: TrainState, batch, tolerance: float = 1e-4, n_coords: int = 20,
               seed: int = 0) -> GradReport:
    """Compare autograd against central differences, per parameter tensor."""
    params = list(state.params.named_parameters())

    def total() -> torch.Tensor:
        return joint_objective(state, batch, step=0).total

    analytic = joint_objective(state, batch, step=0, wrt=[p for _, p in params]).grads
    rng = np.random.default_rng(seed)
    used_rows = None
    if state.params.cfg.use_positions:
        used_rows = 1 + max(int(max(tc.pos_t.max(), tc.pos_s.max())) for tc in state.contexts)

    errors, counts = {}, {}
    for (name, p), g in zip(params, analytic):
        flat = p.data.view(-1)
        numel = flat.numel()
        if name == "positions.table" and used_rows is not None:
            numel = used_rows * p.shape[1]  # rows past the longest sequence are never read
        idx = rng.choice(numel, size=min(n_coords, numel), replace=False)
        worst = 0.0
        for j in idx:
            orig = flat[j].item()
            h = 1e-5 * (1.0 + abs(orig))
            with torch.no_grad():
                flat[j] = orig + h
                f_plus = total().item()
                flat[j] = orig - h
                f_minus = total().item()
                flat[j] = orig
            fd = (f_plus - f_minus) / (2 * h)
            ga = g.view(-1)[j].item()
            rel = abs(ga - fd) / max(1e-8, abs(ga) + abs(fd))
            worst = max(worst, rel)
        errors[name] = worst
        counts[name] = len(idx)
    return GradReport(errors, tolerance, counts)


def live_bytes(state: TrainState) -> dict[ModuleKey, bytes]:
    return {k: v.detach().cpu().numpy().tobytes() for k, v in state.live_b.items()}


def loss_curve_csv(curve: Iterable[dict[str, float]]) -> str:
    lines = ["step,surrogate,rdm,total"]
    for row in curve:
        lines.append(f"{row['step']},{row['surrogate']!r},{row['rdm']!r},{row['total']!r}")
    return "\n".join(lines) + "\n"
