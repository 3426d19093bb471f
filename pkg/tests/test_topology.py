import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adapterfuse.store import AdapterSet, LoraPair, ModuleKey
from adapterfuse.topology import (
    FamilySpec,
    build_groups,
    make_layer_maps,
    map_layer,
    select_active_units,
)

TYPES = ["q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj", "gate_proj"]


def make(layers, entries, fam="f", width=8):
    """``entries``: iterable of (layer, module_type, rank)."""
    pairs = {}
    for layer, t, r in entries:
        key = ModuleKey(layer, t, r)
        pairs[key] = LoraPair(key, np.zeros((r, width), np.float32), np.zeros((width, r), np.float32))
    return AdapterSet(fam, layers, pairs)


@pytest.mark.parametrize("L_t, L_s, layer, expected", [
    (4, 6, 0, 2), (4, 6, 3, 5), (32, 32, 17, 17), (4, 3, 0, 0),
])
def test_map_layer_examples(L_t, L_s, layer, expected):
    assert map_layer(L_t, L_s, layer) == expected


def test_map_layer_rejects_out_of_range():
    with pytest.raises(ValueError):
        map_layer(4, 6, 4)
    with pytest.raises(ValueError):
        map_layer(4, 0, 0)


def test_map_layer_exhaustive():
    for L_t, L_s in itertools.product(range(1, 17), repeat=2):
        table = [map_layer(L_t, L_s, l) for l in range(L_t)]
        assert all(a <= b for a, b in zip(table, table[1:]))
        assert table[-1] == L_s - 1
        assert all(0 <= v < L_s for v in table)
        if L_t == L_s:
            assert table == list(range(L_t))


def test_family_spec_invariants():
    with pytest.raises(ValueError):
        FamilySpec("f", 0, frozenset({"q_proj"}))
    with pytest.raises(ValueError):
        FamilySpec("f", 2, frozenset())
    spec = FamilySpec.of(make(2, [(0, "q_proj", 8)]))
    assert spec.module_vocabulary == {"q_proj"}


def test_group_examples():
    target = make(1, [(0, "q_proj", 8)])
    assert [(g.module_type, g.rank) for g in build_groups(target, [make(1, [(0, "q_proj", 8), (0, "up_proj", 8)])])] \
        == [("q_proj", 8)]
    assert build_groups(target, [make(1, [(0, "q_proj", 16)])]) == []
    full = make(1, [(0, t, 8) for t in TYPES])
    groups = build_groups(full, [make(1, [(0, t, 8) for t in TYPES]), make(1, [(0, t, 8) for t in TYPES])])
    assert len(groups) == 7
    assert [g.module_type for g in groups] == sorted(TYPES)
    assert [g.group_id for g in groups] == list(range(7))


def test_aliases_map_foreign_tokens():
    target = make(1, [(0, "up_proj", 4)])
    source = make(1, [(0, "fc_in", 4)])
    assert build_groups(target, [source]) == []
    groups = build_groups(target, [source], {"fc_in": "up_proj"})
    assert [(g.module_type, g.rank) for g in groups] == [("up_proj", 4)]
    units = select_active_units(groups, target, [source], make_layer_maps(target, [source]), {"fc_in": "up_proj"})
    assert len(units) == 1 and units[0].source_pairs[0][1].key.module_type == "fc_in"


def test_unit_examples():
    target = make(2, [(l, "q_proj", 8) for l in range(2)])
    both = [make(2, [(l, "q_proj", 8) for l in range(2)]) for _ in range(2)]
    groups = build_groups(target, both)
    units = select_active_units(groups, target, both, make_layer_maps(target, both))
    assert len(units) == 2 and all(len(u.source_pairs) == 2 for u in units)

    partial = [make(2, [(0, "q_proj", 8)]), make(2, [(l, "q_proj", 8) for l in range(2)])]
    units = select_active_units(groups, target, partial, make_layer_maps(target, partial))
    assert [k for k, _ in units[1].source_pairs] == [1]

    missing = [make(2, [(0, "q_proj", 8)]), make(2, [(0, "q_proj", 8)])]
    units = select_active_units(groups, target, missing, make_layer_maps(target, missing))
    assert [u.target_layer for u in units] == [0]


def test_units_follow_tail_alignment():
    target = make(4, [(l, "up_proj", 8) for l in range(4)])
    source = make(6, [(l, "up_proj", 8) for l in range(6)])
    groups = build_groups(target, [source])
    units = select_active_units(groups, target, [source], make_layer_maps(target, [source]))
    assert [u.source_pairs[0][1].key.layer for u in units] == [2, 3, 4, 5]
    assert [u.name for u in units] == [f"up_proj.r8.l{l}" for l in range(4)]


def test_layer_maps_must_cover_sources():
    target = make(1, [(0, "q_proj", 8)])
    with pytest.raises(ValueError):
        select_active_units([], target, [target], [])


entries = st.sets(st.tuples(st.integers(0, 3), st.sampled_from(TYPES + ["odd_proj"]), st.sampled_from([4, 8])),
                  max_size=12)


@settings(max_examples=100, deadline=None)
@given(target=entries, sources=st.lists(entries, min_size=1, max_size=3), depths=st.lists(st.integers(1, 4), min_size=4, max_size=4))
def test_activation_matches_enumeration(target, sources, depths):
    tset = make(4, target)
    ssets = [make(max(depths[i], 1 + max((e[0] for e in s), default=0)), s, f"s{i}") for i, s in enumerate(sources)]
    # oracle: scan every (type, rank) combination explicitly
    expected = []
    for t in sorted(set(TYPES)):
        for r in (4, 8):
            in_target = any(e[1] == t and e[2] == r for e in target)
            in_source = any(any(e[1] == t and e[2] == r for e in s) for s in sources)
            if in_target and in_source:
                expected.append((t, r))
    groups = build_groups(tset, ssets)
    assert [(g.module_type, g.rank) for g in groups] == expected

    maps = make_layer_maps(tset, ssets)
    units = select_active_units(groups, tset, ssets, maps)
    want = []
    for t, r in expected:
        for l in range(4):
            if (l, t, r) not in target:
                continue
            ks = [k for k, s in enumerate(sources) if (maps[k](l), t, r) in s]
            if ks:
                want.append((t, r, l, ks))
    assert [(u.group.module_type, u.group.rank, u.target_layer, [k for k, _ in u.source_pairs]) for u in units] == want

    # permuting sources never changes the active groups
    assert build_groups(tset, ssets[::-1]) == groups
