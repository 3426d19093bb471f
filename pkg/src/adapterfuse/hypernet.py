"""The transfer network: target-as-query cross-attention over denoised block
tokens, a per-token decoder whose B-segment outputs become delta-B, and the
B-only patch with its Frobenius stability bound."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .context import SEGMENTS, GroupContext
from .denoise import GateParams, ViewProjections, denoise_tokens, glorot_, make_linear
from .store import LoraPair


@dataclass(frozen=True)
class HyperNetConfig:
    d: int = 1024
    heads: int = 8
    max_pos: int = 4096
    block_rows: int = 8
    rank: int = 8  # widest rank across groups; narrower tokens are zero-padded
    s_len: int = 8
    mu_gate: float = 0.10
    alpha_init: float = 0.3
    n_groups: int = 1
    n_sources: int = 1
    use_positions: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("d must be divisible by the number of heads")


@dataclass
class TensorContext:
    """One unit's context packed as tensors for the network."""

    ctx: GroupContext
    x_t: torch.Tensor  # (n_t, c, r_max)
    s_t: torch.Tensor  # (n_t, s_len)
    pos_t: torch.Tensor
    seg_t: torch.Tensor
    x_s: torch.Tensor
    s_s: torch.Tensor
    pos_s: torch.Tensor
    seg_s: torch.Tensor
    src_s: torch.Tensor
    b_index: torch.Tensor  # target-token indices tagged TargetB
    group: int
    rank: int
    d_out: int


@dataclass
class DeltaPrediction:
    unit: object
    delta_b: torch.Tensor
    attention_entropy: float = 0.0
    z_t: torch.Tensor | None = None
    z_s: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


def pack_context(ctx: GroupContext, cfg: HyperNetConfig, dtype=torch.float64) -> TensorContext:
    def stack(tokens):
        x = np.zeros((len(tokens), cfg.block_rows, cfg.rank))
        for i, t in enumerate(tokens):
            if t.data.shape[0] != cfg.block_rows or t.data.shape[1] > cfg.rank:
                raise ValueError(f"token shape {t.data.shape} incompatible with network config")
            x[i, :, : t.data.shape[1]] = t.data
        return torch.as_tensor(x, dtype=dtype)

    def desc(ds):
        return torch.as_tensor(np.stack([d.values for d in ds]), dtype=dtype)

    def seg(tokens):
        return torch.tensor([SEGMENTS.index(t.segment) for t in tokens], dtype=torch.long)

    if not ctx.source_tokens:
        raise ValueError("no source tokens")
    tt, st = ctx.target_tokens, ctx.source_tokens
    tp = ctx.unit.target_pair
    return TensorContext(
        ctx,
        stack(tt), desc(ctx.target_descriptors),
        torch.tensor([t.run_position for t in tt]), seg(tt),
        stack(st), desc(ctx.source_descriptors),
        torch.tensor([t.run_position for t in st]), seg(st),
        torch.tensor([t.source for t in st]),
        torch.tensor([i for i, t in enumerate(tt) if t.segment == "TargetB"], dtype=torch.long),
        ctx.unit.group.alpha_index,
        tp.key.rank,
        tp.d_out,
    )


class PositionTable(nn.Module):
    def __init__(self, cfg: HyperNetConfig, generator, dtype):
        super().__init__()
        self.table = nn.Parameter(glorot_(torch.empty(cfg.max_pos, cfg.d, dtype=dtype), generator))
        self.segment_table = nn.Parameter(glorot_(torch.empty(len(SEGMENTS), cfg.d, dtype=dtype), generator))
        self.source_table = nn.Parameter(glorot_(torch.empty(max(cfg.n_sources, 1), cfg.d, dtype=dtype), generator))


class CrossAttention(nn.Module):
    def __init__(self, d: int, heads: int, generator, dtype):
        super().__init__()
        self.heads = heads
        self.q = make_linear(d, d, generator, dtype)
        # no key bias: it shifts every logit of a query equally, so softmax ignores it
        self.k = make_linear(d, d, generator, dtype, bias=False)
        self.v = make_linear(d, d, generator, dtype)
        self.o = make_linear(d, d, generator, dtype)


class HyperNetParams(nn.Module):
    """Everything trainable: the transfer network plus one scale per group."""

    def __init__(self, cfg: HyperNetConfig, dtype=torch.float64):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.views = ViewProjections(cfg.block_rows, cfg.rank, cfg.d, gen, dtype)
        self.gate = GateParams(cfg.s_len, cfg.d, cfg.mu_gate, gen, dtype)
        self.positions = PositionTable(cfg, gen, dtype)
        self.attention = CrossAttention(cfg.d, cfg.heads, gen, dtype)
        self.dec_hidden = make_linear(cfg.d, 4 * cfg.d, gen, dtype)
        # zeroed output layer: every predicted delta-B starts at exactly 0
        self.dec_out = make_linear(4 * cfg.d, cfg.block_rows * cfg.rank, gen, dtype, zero=True)
        self.alphas = nn.Parameter(torch.full((cfg.n_groups,), float(cfg.alpha_init), dtype=dtype))

    @property
    def dtype(self):
        return self.alphas.dtype


def denoised(tc: TensorContext, params: HyperNetParams) -> tuple[torch.Tensor, torch.Tensor]:
    z_t = denoise_tokens(tc.x_t, tc.s_t, params.views, params.gate)
    z_s = denoise_tokens(tc.x_s, tc.s_s, params.views, params.gate)
    return z_t, z_s


def encode(z_t, z_s, tc: TensorContext, params: HyperNetParams):
    if not params.cfg.use_positions:
        return z_t, z_s
    pos = params.positions
    longest = max(int(tc.pos_t.max()), int(tc.pos_s.max())) + 1
    if longest > params.cfg.max_pos:
        raise ValueError(f"sequence length {longest} exceeds max_pos={params.cfg.max_pos}")
    Z_t = z_t + pos.table[tc.pos_t] + pos.segment_table[tc.seg_t]
    Z_s = z_s + pos.table[tc.pos_s] + pos.segment_table[tc.seg_s] + pos.source_table[tc.src_s]
    return Z_t, Z_s


def embed_context(tc: TensorContext, params: HyperNetParams):
    z_t, z_s = denoised(tc, params)
    return encode(z_t, z_s, tc, params)


def cross_attend(Z_t: torch.Tensor, Z_s: torch.Tensor, attn: CrossAttention):
    """h-head scaled dot-product attention, queries from the target side only.

    Accepts (n, d) inputs or a leading batch axis. Returns ``(H, weights)``;
    weights are shaped (..., heads, n_t, n_s).
    """
    *lead, n_t, d = Z_t.shape
    n_s = Z_s.shape[-2]
    h = attn.heads
    dh = d // h
    q = attn.q(Z_t).view(*lead, n_t, h, dh).transpose(-2, -3)
    k = attn.k(Z_s).view(*lead, n_s, h, dh).transpose(-2, -3)
    v = attn.v(Z_s).view(*lead, n_s, h, dh).transpose(-2, -3)
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    heads = (weights @ v).transpose(-2, -3).reshape(*lead, n_t, d)
    return attn.o(heads), weights


def decode_delta(H: torch.Tensor, tc: TensorContext, params: HyperNetParams) -> torch.Tensor:
    """Decode every target token, keep only the B segment, reassemble delta-B.

    With a batched ``H`` (U, n_t, d) and a :class:`ContextBatch`, returns (U, d_out, r).
    """
    if tc.b_index.numel() == 0:
        raise ValueError("no TargetB tokens in context")
    c, r_max = params.cfg.block_rows, params.cfg.rank
    *lead, n_t, _ = H.shape
    blocks = params.dec_out(torch.relu(params.dec_hidden(H))).view(*lead, n_t, c, r_max)
    b_blocks = blocks[..., tc.b_index, :, : tc.rank]
    return b_blocks.reshape(*lead, -1, tc.rank)[..., : tc.d_out, :]


def attention_entropy(weights: torch.Tensor) -> torch.Tensor:
    """Mean entropy of the attention rows; batched weights keep their leading axis."""
    w = weights.detach()
    ent = -(w * torch.log(w.clamp_min(1e-300))).sum(-1)
    return ent.flatten(-2).mean(-1)


def predict(tc: TensorContext, params: HyperNetParams) -> DeltaPrediction:
    z_t, z_s = denoised(tc, params)
    Z_t, Z_s = encode(z_t, z_s, tc, params)
    H, weights = cross_attend(Z_t, Z_s, params.attention)
    delta_b = decode_delta(H, tc, params)
    return DeltaPrediction(tc.ctx.unit, delta_b, float(attention_entropy(weights)), z_t, z_s)


@dataclass
class ContextBatch:
    """Same-shaped unit contexts stacked along a leading axis."""

    members: list[int]  # indices into the caller's context list
    contexts: list[TensorContext]
    x_t: torch.Tensor
    s_t: torch.Tensor
    pos_t: torch.Tensor
    seg_t: torch.Tensor
    x_s: torch.Tensor
    s_s: torch.Tensor
    pos_s: torch.Tensor
    seg_s: torch.Tensor
    src_s: torch.Tensor
    b_index: torch.Tensor
    groups: torch.Tensor
    rank: int
    d_out: int


def batch_contexts(contexts: list[TensorContext]) -> list[ContextBatch]:
    def signature(tc):
        return (tuple(tc.x_t.shape), tuple(tc.x_s.shape), tuple(tc.b_index.tolist()), tc.rank, tc.d_out,
                tuple(tc.seg_t.tolist()))

    buckets: dict[tuple, list[int]] = {}
    for i, tc in enumerate(contexts):
        buckets.setdefault(signature(tc), []).append(i)
    out = []
    for members in buckets.values():
        tcs = [contexts[i] for i in members]

        def stack(name):
            return torch.stack([getattr(tc, name) for tc in tcs])

        out.append(ContextBatch(
            members, tcs,
            stack("x_t"), stack("s_t"), stack("pos_t"), stack("seg_t"),
            stack("x_s"), stack("s_s"), stack("pos_s"), stack("seg_s"), stack("src_s"),
            tcs[0].b_index, torch.tensor([tc.group for tc in tcs]), tcs[0].rank, tcs[0].d_out,
        ))
    return out


def predict_batch(cb: ContextBatch, params: HyperNetParams):
    """Batched :func:`predict`: returns (delta_b, z_t, z_s, entropy), each with a leading unit axis."""
    z_t, z_s = denoised(cb, params)
    Z_t, Z_s = encode(z_t, z_s, cb, params)
    H, weights = cross_attend(Z_t, Z_s, params.attention)
    return decode_delta(H, cb, params), z_t, z_s, attention_entropy(weights)


# -- patching ------------------------------------------------------------------

def apply_patch(pair: LoraPair, delta_b, alpha: float) -> LoraPair:
    delta_b = np.asarray(delta_b, dtype=np.float64)
    if delta_b.shape != pair.B.shape:
        raise ValueError(f"delta shape {delta_b.shape} != B shape {pair.B.shape}")
    step = float(alpha) * delta_b
    # entries with nothing to add keep their exact bytes (B + 0 would turn -0.0 into 0.0)
    B = np.where(step == 0, pair.B, (pair.B.astype(np.float64) + step).astype(pair.B.dtype))
    return LoraPair(pair.key, pair.A, B, pair.prefix)


def stability_bound(pair: LoraPair, delta_b, alpha: float) -> tuple[float, float, float]:
    """(||B'A - BA||_F, |alpha| ||dB A||_F, |alpha| ||dB||_F ||A||_2) in 64-bit."""
    A = np.asarray(pair.A, dtype=np.float64)
    B = np.asarray(pair.B, dtype=np.float64)
    dB = np.asarray(delta_b, dtype=np.float64)
    if dB.shape != B.shape:
        raise ValueError(f"delta shape {dB.shape} != B shape {B.shape}")
    lhs = np.linalg.norm((B + alpha * dB) @ A - B @ A)
    identity = abs(alpha) * np.linalg.norm(dB @ A)
    bound = abs(alpha) * np.linalg.norm(dB) * (np.linalg.norm(A, 2) if A.size else 0.0)
    return float(lhs), float(identity), float(bound)


# -- checkpoints ---------------------------------------------------------------

def params_to_tensors(params: HyperNetParams) -> dict[str, np.ndarray]:
    return {
        f"hypernet.{name}": t.detach().cpu().numpy().astype(np.float32)
        for name, t in params.state_dict().items()
    }


def params_from_tensors(params: HyperNetParams, tensors: dict[str, np.ndarray]) -> HyperNetParams:
    state = {
        name[len("hypernet."):]: torch.as_tensor(arr, dtype=params.dtype)
        for name, arr in tensors.items()
        if name.startswith("hypernet.")
    }
    params.load_state_dict(state)
    return params
