"""Conflict-aware denoising: row/column views, the SVD-guided gate, and the
rectified distribution matching (sliced Wasserstein) regularizer."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

LN_EPS = 1e-5


@dataclass(frozen=True)
class RdmConfig:
    n_proj: int = 2048
    mu_target: float = 0.0
    sigma_target: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_proj < 1:
            raise ValueError("n_proj must be >= 1")
        if not self.sigma_target > 0:
            raise ValueError("sigma_target must be > 0")


def glorot_(weight: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    fan_out, fan_in = weight.shape[0], weight.shape[-1]
    bound = (6.0 / (fan_in + fan_out)) ** 0.5
    with torch.no_grad():
        weight.copy_(torch.rand(weight.shape, generator=generator, dtype=weight.dtype) * 2 * bound - bound)
    return weight


def make_linear(n_in: int, n_out: int, generator: torch.Generator, dtype, zero: bool = False,
                bias: bool = True) -> nn.Linear:
    lin = nn.Linear(n_in, n_out, bias=bias, dtype=dtype)
    with torch.no_grad():
        if bias:
            lin.bias.zero_()
        if zero:
            lin.weight.zero_()
        else:
            glorot_(lin.weight, generator)
    return lin


class ViewProjections(nn.Module):
    """Two affine maps of a flattened c x r block: one of the block, one of its transpose."""

    def __init__(self, c: int, r: int, d: int, generator: torch.Generator, dtype=torch.float64):
        super().__init__()
        self.c, self.r = c, r
        self.row = make_linear(c * r, d, generator, dtype)
        self.col = make_linear(c * r, d, generator, dtype)


class GateParams(nn.Module):
    def __init__(self, s_len: int, d: int, mu_gate: float, generator: torch.Generator, dtype=torch.float64):
        super().__init__()
        self.hidden = make_linear(s_len, 4 * s_len, generator, dtype)
        # zeroed output layer: the initial gate is the constant clip(relu(mu_gate), 0, 1)
        self.out = make_linear(4 * s_len, d, generator, dtype, zero=True)
        self.mu_gate = float(mu_gate)

    def mlp(self, s: torch.Tensor) -> torch.Tensor:
        return self.out(torch.relu(self.hidden(s)))


def view_features(x: torch.Tensor, views: ViewProjections) -> tuple[torch.Tensor, torch.Tensor]:
    """``x`` is (..., c, r); returns (f_row, f_col), each (..., d)."""
    if x.shape[-2:] != (views.c, views.r):
        raise ValueError(f"block shape {tuple(x.shape[-2:])} != {(views.c, views.r)}")
    f_row = views.row(x.flatten(-2))
    f_col = views.col(x.transpose(-1, -2).flatten(-2))
    return f_row, f_col


def clip01(x: torch.Tensor) -> torch.Tensor:
    # derivative 1 strictly inside (0, 1), 0 at and beyond both ends
    x = torch.relu(x)
    return torch.where(x >= 1.0, torch.ones_like(x), x)


def gate_values(s: torch.Tensor, gate: GateParams) -> torch.Tensor:
    return clip01(gate.mlp(s) + gate.mu_gate)


def layer_norm(x: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Non-affine LayerNorm over the last axis; rows with no spread map to zero."""
    if x.shape[-1] < 2:
        raise ValueError("LayerNorm needs at least 2 channels")
    mean = x.mean(dim=-1, keepdim=True)
    xc = x - mean
    var = (xc * xc).mean(dim=-1, keepdim=True)
    out = xc / torch.sqrt(var + eps)
    constant = (x.amax(dim=-1, keepdim=True) == x.amin(dim=-1, keepdim=True))
    return torch.where(constant, torch.zeros_like(out), out)


def denoise_tokens(
    x: torch.Tensor, s: torch.Tensor, views: ViewProjections, gate: GateParams
) -> torch.Tensor:
    """``x``: (..., n, c, r) token blocks, ``s``: (..., n, s_len) descriptors -> (..., n, d)."""
    if x.shape[:-2] != s.shape[:-1]:
        raise ValueError("tokens and descriptors are not aligned")
    f_row, f_col = view_features(x, views)
    return layer_norm((f_row + f_col) * gate_values(s, gate))


# -- rectified distribution matching ------------------------------------------

def projection_bank(n_proj: int, d: int, seed: int) -> np.ndarray:
    """Rows i.i.d. standard normal, scaled to unit length; fixed by (seed, n_proj, d)."""
    P = np.random.default_rng(seed).standard_normal((n_proj, d))
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def prior_sampler(cfg: RdmConfig, seed: int) -> Callable[[tuple[int, int]], np.ndarray]:
    rng = np.random.default_rng(seed)

    def draw(shape):
        return rng.normal(cfg.mu_target, cfg.sigma_target, size=shape)

    return draw


def rdm_loss(
    z: torch.Tensor,
    cfg: RdmConfig,
    bank: torch.Tensor | np.ndarray,
    noise_draw: Callable[[tuple[int, int]], np.ndarray] | None = None,
) -> torch.Tensor:
    """Mean squared gap between sorted projections of ReLU(z) and ReLU(y), y ~ prior.

    ``z`` is (n, d); a leading batch axis gives one loss per batch entry, and
    ``noise_draw`` is then asked for the full batched shape.
    """
    if z.shape[-2] == 0:
        raise ValueError("rdm_loss needs at least one token")
    if noise_draw is None:
        noise_draw = prior_sampler(cfg, cfg.seed)
    y = torch.as_tensor(noise_draw(tuple(z.shape)), dtype=z.dtype)
    P = torch.as_tensor(bank, dtype=z.dtype)
    u = torch.sort(torch.relu(z) @ P.T, dim=-2).values
    v = torch.sort(torch.relu(y) @ P.T, dim=-2).values
    return ((u - v) ** 2).mean(dim=(-2, -1))


def sw_oracle(z, y, bank) -> float:
    """Loop-by-loop reference for :func:`rdm_loss` given an explicit prior draw."""
    z = [[float(v) for v in row] for row in np.asarray(z, dtype=np.float64)]
    y = [[float(v) for v in row] for row in np.asarray(y, dtype=np.float64)]
    bank = [[float(v) for v in row] for row in np.asarray(bank, dtype=np.float64)]
    n = len(z)
    if n == 0:
        raise ValueError("sw_oracle needs at least one token")

    def insertion_sort(xs):
        xs = list(xs)
        for i in range(1, len(xs)):
            key = xs[i]
            j = i - 1
            while j >= 0 and xs[j] > key:
                xs[j + 1] = xs[j]
                j -= 1
            xs[j + 1] = key
        return xs

    total = 0.0
    for p in bank:
        u = []
        v = []
        for i in range(n):
            u.append(sum(pk * max(zk, 0.0) for pk, zk in zip(p, z[i])))
            v.append(sum(pk * max(yk, 0.0) for pk, yk in zip(p, y[i])))
        for a, b in zip(insertion_sort(u), insertion_sort(v)):
            total += (a - b) ** 2
    return total / (len(bank) * n)
