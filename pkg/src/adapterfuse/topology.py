"""Where transfer is allowed: layer maps, module groups and transfer units."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .store import AdapterSet, LoraPair, classify_module

__all__ = [
    "FamilySpec",
    "LayerMap",
    "TransferGroup",
    "TransferUnit",
    "classify_module",
    "map_layer",
    "make_layer_maps",
    "build_groups",
    "select_active_units",
]


@dataclass(frozen=True)
class FamilySpec:
    family_id: str
    layer_count: int
    module_vocabulary: frozenset[str]

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        if not self.module_vocabulary:
            raise ValueError("module vocabulary is empty")

    @classmethod
    def of(cls, aset: AdapterSet) -> "FamilySpec":
        return cls(aset.family_id, aset.layer_count, frozenset(aset.module_types()))


@dataclass(frozen=True)
class LayerMap:
    source_index: int
    target_layers: int
    source_layers: int

    def __call__(self, layer: int) -> int:
        return map_layer(self.target_layers, self.source_layers, layer)

    def table(self) -> list[int]:
        return [self(l) for l in range(self.target_layers)]


@dataclass(frozen=True)
class TransferGroup:
    group_id: int
    module_type: str
    rank: int
    alpha_index: int


@dataclass
class TransferUnit:
    group: TransferGroup
    target_layer: int
    target_pair: LoraPair
    source_pairs: list[tuple[int, LoraPair]] = field(default_factory=list)

    @property
    def name(self) -> str:
        return f"{self.group.module_type}.r{self.group.rank}.l{self.target_layer}"


def map_layer(L_t: int, L_s: int, layer: int) -> int:
    """Tail alignment: anchor the last target layer on the last source layer."""
    if L_s < 1 or L_t < 1:
        raise ValueError("layer counts must be >= 1")
    if not 0 <= layer < L_t:
        raise ValueError(f"layer {layer} out of range [0, {L_t})")
    return min(max(layer + (L_s - L_t), 0), L_s - 1)


def make_layer_maps(target: AdapterSet, sources: Sequence[AdapterSet]) -> list[LayerMap]:
    return [LayerMap(k, target.layer_count, s.layer_count) for k, s in enumerate(sources)]


def canonical_type(module_type: str, aliases: Mapping[str, str] | None) -> str:
    if aliases:
        return aliases.get(module_type, module_type)
    return module_type


def _fusable_keys(aset: AdapterSet, aliases) -> set[tuple[str, int]]:
    out = set()
    for key in aset.pairs:
        mtype = canonical_type(key.module_type, aliases)
        if mtype in aset.vocabulary:
            out.add((mtype, key.rank))
    return out


def build_groups(
    target: AdapterSet,
    sources: Sequence[AdapterSet],
    aliases: Mapping[str, str] | None = None,
) -> list[TransferGroup]:
    """One group per (module_type, rank) shared by the target and any source."""
    target_keys = _fusable_keys(target, aliases)
    source_keys = set()
    for src in sources:
        source_keys |= _fusable_keys(src, aliases)
    active = sorted(target_keys & source_keys)
    return [TransferGroup(g, mtype, rank, g) for g, (mtype, rank) in enumerate(active)]


def _find(aset: AdapterSet, layer: int, module_type: str, rank: int, aliases) -> LoraPair | None:
    for key, pair in aset.pairs.items():
        if (
            key.layer == layer
            and key.rank == rank
            and canonical_type(key.module_type, aliases) == module_type
        ):
            return pair
    return None


def select_active_units(
    groups: Sequence[TransferGroup],
    target: AdapterSet,
    sources: Sequence[AdapterSet],
    layer_maps: Sequence[LayerMap],
    aliases: Mapping[str, str] | None = None,
) -> list[TransferUnit]:
    if len(layer_maps) != len(sources):
        raise ValueError("layer_maps must cover every source")
    units = []
    for group in groups:
        for layer in range(target.layer_count):
            tpair = _find(target, layer, group.module_type, group.rank, aliases)
            if tpair is None:
                continue
            spairs = []
            for k, (src, lmap) in enumerate(zip(sources, layer_maps)):
                spair = _find(src, lmap(layer), group.module_type, group.rank, aliases)
                if spair is not None:
                    spairs.append((k, spair))
            if spairs:
                units.append(TransferUnit(group, layer, tpair, spairs))
    return units
