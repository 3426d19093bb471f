"""Block-token contexts with singular-value descriptors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .store import LoraPair
from .topology import TransferUnit

SEGMENTS = ("TargetA", "TargetB", "SourceA", "SourceB")


class SvdConvergenceError(RuntimeError):
    pass


@dataclass
class BlockToken:
    data: np.ndarray  # c x r, zero rows past the end of the source matrix
    segment: str
    position: int
    pad_rows: int = 0
    source: int = -1  # source index k, -1 on the target side
    run_position: int = 0  # index within its (segment side, source) run

    @property
    def valid_rows(self) -> np.ndarray:
        return self.data[: self.data.shape[0] - self.pad_rows]


@dataclass
class SvdDescriptor:
    values: np.ndarray


@dataclass
class GroupContext:
    unit: TransferUnit
    target_tokens: list[BlockToken]
    source_tokens: list[BlockToken]
    target_descriptors: list[SvdDescriptor] = field(default_factory=list)
    source_descriptors: list[SvdDescriptor] = field(default_factory=list)
    block_rows: int = 0

    @property
    def n_target_b(self) -> int:
        return sum(t.segment == "TargetB" for t in self.target_tokens)


def compute_delta_w(pair: LoraPair) -> np.ndarray:
    if pair.B.shape[1] != pair.A.shape[0]:
        raise ValueError(f"dimension mismatch: B {pair.B.shape} vs A {pair.A.shape}")
    return pair.B.astype(np.float64) @ pair.A.astype(np.float64)


def blockify(M: np.ndarray, c: int, segment: str = "TargetA", source: int = -1) -> list[BlockToken]:
    """Tile the rows of ``M`` (n x r) into ceil(n/c) zero-padded c x r blocks."""
    if c < 1:
        raise ValueError("block row count must be >= 1")
    M = np.asarray(M)
    if M.ndim != 2 or M.size == 0:
        raise ValueError("cannot blockify an empty matrix")
    n, r = M.shape
    tokens = []
    for i in range(math.ceil(n / c)):
        rows = M[i * c : min((i + 1) * c, n)]
        block = np.zeros((c, r), dtype=np.float64)
        block[: rows.shape[0]] = rows
        tokens.append(BlockToken(block, segment, i, c - rows.shape[0], source, i))
    return tokens


def unblockify(tokens, n: int) -> np.ndarray:
    if not tokens:
        raise ValueError("no tokens")
    c = tokens[0].data.shape[0]
    if len(tokens) != math.ceil(n / c):
        raise ValueError(f"{len(tokens)} tokens inconsistent with n={n}, c={c}")
    return np.concatenate([t.data for t in tokens], axis=0)[:n]


def jacobi_singular_values(M: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Singular values of a small matrix by one-sided Jacobi rotations (64-bit).

    Columns are rotated pairwise until every pair is orthogonal to ``tol``
    relative to the column norms; the column norms are then the singular values.
    """
    M = np.asarray(M, dtype=np.float64)
    full = min(M.shape)
    # zero rows carry no singular value; dropping them keeps padded blocks bit-identical
    U = M[np.any(M != 0, axis=1)].copy()
    if U.shape[0] == 0:
        return np.zeros(full)
    if U.shape[0] < U.shape[1]:
        U = U.T.copy()
    n = U.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        # near-null columns can push zeta to inf; t then rounds to 0 and the pair is skipped
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = U[:, i] @ U[:, i]
                beta = U[:, j] @ U[:, j]
                gamma = U[:, i] @ U[:, j]
                if abs(gamma) <= tol * math.sqrt(alpha) * math.sqrt(beta):
                    continue
                with np.errstate(over="ignore", divide="ignore"):
                    zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                if t == 0.0:
                    continue
                rotated = True
                cs = 1.0 / math.sqrt(1.0 + t * t)
                sn = cs * t
                ui = U[:, i].copy()
                U[:, i] = cs * ui - sn * U[:, j]
                U[:, j] = sn * ui + cs * U[:, j]
        if not rotated:
            out = np.zeros(full)
            s = np.sort(np.sqrt(np.einsum("ij,ij->j", U, U)))[::-1]
            out[: s.shape[0]] = s[:full]
            return out
    raise SvdConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")


def svd_descriptor(block: BlockToken | np.ndarray, s_len: int) -> SvdDescriptor:
    data = block.valid_rows if isinstance(block, BlockToken) else np.asarray(block)
    if not np.all(np.isfinite(data)):
        raise ValueError("block has non-finite entries")
    out = np.zeros(s_len, dtype=np.float64)
    if data.size:
        s = jacobi_singular_values(data)[:s_len]
        out[: s.shape[0]] = s
    return SvdDescriptor(out)


def build_context(unit: TransferUnit, c: int, s_len: int) -> GroupContext:
    tp = unit.target_pair
    target = blockify(tp.A.T, c, "TargetA") + blockify(tp.B, c, "TargetB")
    source = []
    for k, sp in unit.source_pairs:
        source += blockify(sp.A.T, c, "SourceA", k) + blockify(sp.B, c, "SourceB", k)
    # run positions restart per source run; context positions count through each side
    run_pos: dict[int, int] = {}
    for tokens in (target, source):
        for i, tok in enumerate(tokens):
            tok.position = i
            tok.run_position = run_pos.get(tok.source, 0) if tokens is source else i
            if tokens is source:
                run_pos[tok.source] = tok.run_position + 1
    return GroupContext(
        unit,
        target,
        source,
        [svd_descriptor(t, s_len) for t in target],
        [svd_descriptor(t, s_len) for t in source],
        c,
    )
