import numpy as np
import pytest
import torch

from adapterfuse.denoise import RdmConfig
from adapterfuse.hypernet import HyperNetConfig, HyperNetParams
from adapterfuse.store import AdapterSet, LoraPair, ModuleKey, default_prefix
from adapterfuse.topology import build_groups, make_layer_maps, select_active_units
from adapterfuse.trainer import ResidualMlpSurrogate, TrainConfig, make_state

MODULES = ("up_proj", "down_proj")


def random_adapter(rng, family_id, layers, width, rank=4, modules=MODULES, scale=0.3):
    pairs = {}
    for layer in range(layers):
        for t in modules:
            key = ModuleKey(layer, t, rank)
            pairs[key] = LoraPair(
                key,
                (rng.standard_normal((rank, width)) * scale).astype(np.float32),
                (rng.standard_normal((width, rank)) * scale).astype(np.float32),
                default_prefix(key),
            )
    return AdapterSet(family_id, layers, pairs)


def random_surrogate(rng, target, width, dtype=torch.float64):
    base = {(l, t): rng.standard_normal((width, width)) * 0.5 / np.sqrt(width)
            for l in range(target.layer_count) for t in MODULES}
    readout = rng.standard_normal((3, width)) / np.sqrt(width)
    a_map = {k: p.A for k, p in target.pairs.items()}
    return ResidualMlpSurrogate(base, readout, a_map, target.layer_count, MODULES, dtype)


def random_batches(rng, width, n_batches=4, size=6):
    return [(rng.standard_normal((size, width)), rng.standard_normal((size, 3))) for _ in range(n_batches)]


class SmallFusion:
    """Random target plus sources of other depths and widths, wired into a train state."""

    def __init__(self, n_sources=2, seed=0, d=32, heads=4, lambda_reg=0.005, grad_accum=1, lr=1e-3,
                 use_positions=True, randomize=False):
        rng = np.random.default_rng(seed)
        self.width = 12
        self.target = random_adapter(rng, "target", 2, self.width)
        self.sources = [random_adapter(rng, f"s{k}", 3 + k, 10 + 2 * k) for k in range(n_sources)]
        self.groups = build_groups(self.target, self.sources)
        self.units = select_active_units(self.groups, self.target, self.sources,
                                         make_layer_maps(self.target, self.sources))
        self.cfg = HyperNetConfig(d=d, heads=heads, max_pos=64, block_rows=4, rank=4, s_len=4,
                                  n_groups=len(self.groups), n_sources=n_sources,
                                  use_positions=use_positions, seed=seed)
        self.params = HyperNetParams(self.cfg)
        if randomize:
            # move away from the zero-initialized layers so every block carries gradient
            g = torch.Generator().manual_seed(seed + 100)
            with torch.no_grad():
                self.params.dec_out.weight.normal_(0, 0.05, generator=g)
                self.params.gate.out.weight.normal_(0, 0.05, generator=g)
        self.surrogate = random_surrogate(rng, self.target, self.width)
        self.data = random_batches(rng, self.width)
        self.train_cfg = TrainConfig(learning_rate=lr, epochs=1, grad_accum=grad_accum, lambda_reg=lambda_reg,
                                     seed=seed)
        self.rdm_cfg = RdmConfig(n_proj=16, seed=seed)

    def state(self):
        return make_state(self.target, self.units, self.params, self.surrogate, self.train_cfg, self.rdm_cfg)


@pytest.fixture
def small_fusion():
    return SmallFusion
