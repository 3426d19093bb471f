"""Adapter files: a minimal safetensors reader/writer restricted to f32.

Layout: 8-byte little-endian header length, a UTF-8 JSON header mapping
tensor name -> {dtype, shape, data_offsets}, then one contiguous buffer.
Header keys are written sorted and tensors are laid out in name order, so
saving the same set twice yields identical bytes.
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KNOWN_MODULE_TYPES = frozenset(
    {"q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj", "gate_proj"}
)

_LORA_RE = re.compile(r"^(?P<prefix>.+)\.lora_(?P<factor>[AB])\.weight$")
_LAYER_RE = re.compile(r"(?:^|\.)layers\.(\d+)(?:\.|$)")
_F32 = np.dtype("<f4")


class AdapterFormatError(ValueError):
    """Raised when an adapter file or set breaks the container contract."""


@dataclass(frozen=True, order=True)
class ModuleKey:
    layer: int
    module_type: str
    rank: int


@dataclass
class LoraPair:
    key: ModuleKey
    A: np.ndarray  # r x d_in
    B: np.ndarray  # d_out x r
    prefix: str = ""

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def tensor_names(self) -> tuple[str, str]:
        prefix = self.prefix or default_prefix(self.key)
        return f"{prefix}.lora_A.weight", f"{prefix}.lora_B.weight"


@dataclass
class AdapterSet:
    family_id: str
    layer_count: int
    pairs: dict[ModuleKey, LoraPair] = field(default_factory=dict)
    # tensors that are not LoRA factors; carried through untouched
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    vocabulary: frozenset[str] = KNOWN_MODULE_TYPES

    def module_types(self) -> set[str]:
        return {k.module_type for k in self.pairs}

    def unknown_module_types(self) -> set[str]:
        return self.module_types() - set(self.vocabulary)

    def get(self, layer: int, module_type: str) -> LoraPair | None:
        for key, pair in self.pairs.items():
            if key.layer == layer and key.module_type == module_type:
                return pair
        return None

    def copy(self) -> "AdapterSet":
        pairs = {
            k: LoraPair(k, p.A.copy(), p.B.copy(), p.prefix) for k, p in self.pairs.items()
        }
        extras = {n: t.copy() for n, t in self.extras.items()}
        return AdapterSet(self.family_id, self.layer_count, pairs, extras, self.vocabulary)


def default_prefix(key: ModuleKey) -> str:
    group = "mlp" if key.module_type in {"up_proj", "down_proj", "gate_proj"} else "self_attn"
    return f"base_model.model.layers.{key.layer}.{group}.{key.module_type}"


def classify_module(tensor_name: str) -> tuple[int, str, str]:
    """Parse ``...layers.{l}...{module_type}.lora_{A|B}.weight``.

    Returns ``(layer, module_type, factor)`` with factor ``"A"`` or ``"B"``.
    """
    m = _LORA_RE.match(tensor_name)
    if m is None:
        raise AdapterFormatError(f"unclassifiable tensor name: {tensor_name!r}")
    layer_match = _LAYER_RE.search(m["prefix"])
    if layer_match is None:
        raise AdapterFormatError(f"unclassifiable tensor name (no layer segment): {tensor_name!r}")
    module_type = m["prefix"].rsplit(".", 1)[-1]
    return int(layer_match.group(1)), module_type, m["factor"]


# -- raw container -----------------------------------------------------------

def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise AdapterFormatError("malformed header: file shorter than 8 bytes")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise AdapterFormatError("malformed header: length exceeds file size")

    def no_duplicates(items):
        out = {}
        for k, v in items:
            if k in out:
                raise AdapterFormatError(f"duplicate tensor name: {k!r}")
            out[k] = v
        return out

    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"), object_pairs_hook=no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise AdapterFormatError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise AdapterFormatError("malformed header: not a JSON object")

    buf = raw[8 + header_len:]
    tensors = {}
    for name, info in header.items():
        if name == "__metadata__":
            continue
        try:
            dtype, shape, (start, end) = info["dtype"], info["shape"], info["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise AdapterFormatError(f"malformed header entry for {name!r}") from exc
        if dtype != "F32":
            raise AdapterFormatError(f"unsupported dtype {dtype!r} for {name!r}")
        if any((not isinstance(s, int)) or s < 0 for s in shape):
            raise AdapterFormatError(f"bad shape {shape!r} for {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if end - start != nbytes or start < 0 or end > len(buf):
            raise AdapterFormatError(f"shape/dtype mismatch for {name!r}")
        tensors[name] = np.frombuffer(buf, dtype=_F32, count=nbytes // 4, offset=start).reshape(shape).copy()
    return tensors


def write_tensors(tensors: dict[str, np.ndarray], path: str | Path) -> None:
    header = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_F32)
        data = arr.tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        chunks.append(data)
        offset += len(data)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    # pad with spaces to an 8-byte boundary, as the reference format does
    header_bytes += b" " * (-len(header_bytes) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for chunk in chunks:
            fh.write(chunk)


# -- adapter sets ------------------------------------------------------------

def adapter_from_tensors(
    tensors: dict[str, np.ndarray],
    family_id: str = "",
    vocabulary: frozenset[str] = KNOWN_MODULE_TYPES,
) -> AdapterSet:
    halves: dict[str, dict[str, np.ndarray]] = {}
    extras = {}
    for name, arr in tensors.items():
        m = _LORA_RE.match(name)
        if m is None:
            extras[name] = arr
            continue
        halves.setdefault(m["prefix"], {})[m["factor"]] = arr

    pairs = {}
    for prefix, parts in sorted(halves.items()):
        if set(parts) != {"A", "B"}:
            raise AdapterFormatError(f"unpaired factor: {prefix}")
        layer, module_type, _ = classify_module(f"{prefix}.lora_A.weight")
        A, B = parts["A"], parts["B"]
        if A.ndim != 2 or B.ndim != 2:
            raise AdapterFormatError(f"shape/dtype mismatch: {prefix} factors must be 2-D")
        if A.shape[0] != B.shape[1]:
            raise AdapterFormatError(f"shape/dtype mismatch: {prefix} rank differs between A and B")
        key = ModuleKey(layer, module_type, A.shape[0])
        if key in pairs:
            raise AdapterFormatError(f"duplicate module: {prefix}")
        pairs[key] = LoraPair(key, A, B, prefix)

    layer_count = 1 + max((k.layer for k in pairs), default=-1)
    return AdapterSet(family_id, layer_count, pairs, extras, vocabulary)


def adapter_to_tensors(aset: AdapterSet) -> dict[str, np.ndarray]:
    tensors = dict(aset.extras)
    for pair in aset.pairs.values():
        name_a, name_b = pair.tensor_names()
        tensors[name_a] = pair.A
        tensors[name_b] = pair.B
    return tensors


def load_adapter(path: str | Path, family_id: str | None = None) -> AdapterSet:
    """Load an adapter file into an AdapterSet.

    Non-LoRA tensors are kept in ``extras``; unknown module types stay in
    ``pairs`` and are reported by :meth:`AdapterSet.unknown_module_types`.
    """
    path = Path(path)
    return adapter_from_tensors(read_tensors(path), family_id or path.stem)


def save_adapter(aset: AdapterSet, path: str | Path) -> None:
    for key, pair in aset.pairs.items():
        if not (np.all(np.isfinite(pair.A)) and np.all(np.isfinite(pair.B))):
            raise AdapterFormatError(f"non-finite entries @ {key}")
    for name, arr in aset.extras.items():
        if not np.all(np.isfinite(arr)):
            raise AdapterFormatError(f"non-finite entries @ {name}")
    write_tensors(adapter_to_tensors(aset), path)


def validate_adapter(aset: AdapterSet) -> list[str]:
    violations = []
    shapes: dict[str, tuple[int, int, int]] = {}
    for key in sorted(aset.pairs):
        pair = aset.pairs[key]
        A, B = pair.A, pair.B
        if A.ndim != 2 or B.ndim != 2:
            violations.append(f"non-matrix factor @ {key}")
            continue
        if A.shape[0] != B.shape[1] or A.shape[0] != key.rank:
            violations.append(f"rank mismatch @ {key}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            violations.append(f"non-finite entries @ {key}")
        if key.layer < 0 or key.layer >= aset.layer_count:
            violations.append(f"layer out of range @ {key}")
        if key.rank < 1:
            violations.append(f"rank < 1 @ {key}")
        dims = (A.shape[0], A.shape[1], B.shape[0])
        seen = shapes.setdefault(key.module_type, dims)
        msg = f"inconsistent module shape: {key.module_type}"
        if seen != dims and msg not in violations:
            violations.append(msg)
    return violations
