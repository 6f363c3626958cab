import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestfed.errors import SpecError
from nestfed.models import ModelConfig, build_model, count_params, inconsistent_count, layout
from nestfed.scaling import (
    consistent_masks,
    coordinate_map,
    depth_path,
    depth_ratio,
    derive_specs,
    extract_submodel,
    full_spec,
    implant_submodel,
    make_spec,
    overshoot_steps,
    param_partition,
    round_half_up,
    sliced_width,
    validate_specs,
)

GAMMAS = [0.2, 0.4, 0.6, 0.8, 1.0]
R18 = ModelConfig("conv", ((2, 64), (2, 128), (2, 256), (2, 512)), (3, 32, 32), 10)
R56 = ModelConfig("conv", ((9, 16), (9, 32), (9, 64)), (3, 32, 32), 10)
MLP = ModelConfig("mlp", ((2, 16), (2, 32), (2, 64)), (32,), 10)
SMALL = ModelConfig("mlp", ((2, 8), (2, 8)), (6,), 3)


def test_rounding_rules():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.4999, 2.5)] == [1, 2, 2, 3]
    assert sliced_width(0.01, 8) == 1
    assert sliced_width(0.34, 64) == 22


@pytest.mark.parametrize("policy", ["W", "D", "D_O", "WD"])
def test_gamma_one_is_full_model(policy):
    spec = derive_specs(R56, [1.0], policy)[0]
    assert spec.gamma_W == 1.0 and all(spec.mask) and set(spec.init_step) == {1.0}
    assert spec.achieved == 1.0


def test_width_policy():
    specs = derive_specs(R18, GAMMAS, "W")
    for s, g in zip(specs, GAMMAS):
        assert all(s.mask) and s.gamma_D == 1.0
        assert abs(s.achieved - g) < 0.02
    assert [s.gamma_W for s in specs] == sorted(s.gamma_W for s in specs)


def test_depth_policy_resnet56():
    specs = derive_specs(R56, GAMMAS, "D")
    for s, g in zip(specs, GAMMAS):
        assert s.gamma_W == 1.0 and abs(s.achieved - g) < 0.05
        for start in R56.stage_starts:
            assert s.mask[start] == 1
        assert all(v == (1.0 if m else 0.0) for v, m in zip(s.init_step, s.mask))


def test_overshoot_resnet56_first_row():
    spec = derive_specs(R56, GAMMAS, "D_O")[0]
    for s in range(3):
        row = spec.init_step[9 * s:9 * s + 9]
        assert list(row) == [1, 8, 0, 0, 0, 0, 0, 0, 0]


def test_overshoot_rule():
    assert overshoot_steps([1, 0, 0, 1, 1, 0]) == [3, 0, 0, 1, 2, 0]
    assert overshoot_steps([1, 1, 1]) == [1, 1, 1]


def test_wd_policy_balances_width_and_depth():
    spec = derive_specs(R18, GAMMAS, "WD")[0]
    assert spec.mask == (1, 1, 1, 1, 1, 1, 1, 0)
    assert spec.gamma_W == pytest.approx(spec.gamma_D, abs=0.02)
    assert abs(spec.achieved - 0.2) < 0.01


def test_depth_path_never_drops_stage_heads():
    path = depth_path(R18)
    assert path[0] == (1,) * 8 and path[-1] == (1, 0, 1, 0, 1, 0, 1, 0)
    ratios = [depth_ratio(R18, m) for m in path]
    assert ratios == sorted(ratios, reverse=True)


def test_unreachable_ratio_reports_nearest():
    with pytest.raises(SpecError) as exc:
        derive_specs(R18, [0.2, 1.0], "D")
    assert exc.value.nearest is not None and exc.value.nearest > 0.2


@pytest.mark.parametrize("gammas", [[0.5, 0.2, 1.0], [0.2, 0.8], [], [0.0, 1.0]])
def test_gamma_list_validation(gammas):
    with pytest.raises(SpecError):
        derive_specs(MLP, gammas, "W")


def test_unknown_policy():
    with pytest.raises(SpecError):
        derive_specs(MLP, GAMMAS, "X")


def test_override_width_and_depth_row():
    rows = [{"gamma_W": 0.34, "gamma_D": 0.58, "stages": [[1, 1], [1, 1], [1, 1], [1, 0]]}, None, None, None, None]
    specs = derive_specs(R18, GAMMAS, "WD", rows)
    assert (specs[0].gamma_W, specs[0].gamma_D) == (0.34, 0.58)
    assert specs[0].mask == (1, 1, 1, 1, 1, 1, 1, 0)
    assert specs[0].stage_widths == (22, 44, 87, 174)


def test_override_nondepth_nested_masks():
    rows = [[[1, 1], [0, 0], [1, 1], [0, 0]], [[1, 0], [0, 0], [1, 0], [1, 0]],
            [[1, 1], [1, 1], [1, 1], [1, 0]], [[1, 0], [1, 1], [0, 0], [1, 1]], None]
    specs = derive_specs(R18, GAMMAS, "D", rows)
    assert specs[3].mask == (1, 0, 1, 1, 0, 0, 1, 1)
    # reference depth ratios 0.20, 0.38, 0.57, 0.81; ours also count the
    # projections kept when a stage's first block is skipped
    for spec, want in zip(specs, (0.20, 0.38, 0.57, 0.81)):
        assert abs(spec.gamma_D - want) < 0.05


@pytest.mark.parametrize("entry", [
    {"gamma_W": 0.5, "bogus": 1},
    [[1, 1], [1, 1]],
    [[1], [1, 1], [1, 1], [1, 1]],
])
def test_bad_overrides(entry):
    with pytest.raises(SpecError):
        derive_specs(R18, [0.5, 1.0], "W", [entry, None])


def test_validate_specs_rules():
    specs = derive_specs(MLP, GAMMAS, "W")
    with pytest.raises(SpecError):
        validate_specs(MLP, specs[::-1])
    with pytest.raises(SpecError):
        validate_specs(MLP, specs[:-1])
    wide, narrow = make_spec(MLP, 1, 0.8), make_spec(MLP, 2, 0.5)
    with pytest.raises(SpecError):
        validate_specs(MLP, [wide, narrow, full_spec(MLP, 3)])
    with pytest.raises(SpecError):
        validate_specs(MLP, [])


def test_make_spec_zeroes_masked_steps():
    spec = make_spec(SMALL, 1, 1.0, [1, 0, 1, 1], [2.0, 5.0, 1.0, 1.0])
    assert spec.init_step == (2.0, 0.0, 1.0, 1.0)
    with pytest.raises(SpecError):
        make_spec(SMALL, 1, 1.5)
    with pytest.raises(SpecError):
        make_spec(SMALL, 1, 1.0, [1, 1])


# ------------------------------------------------------------- partition


def test_partition_is_total_and_disjoint():
    for bn_consistent in (False, True):
        part = param_partition(MLP, bn_consistent)
        names = {t.name for t in layout(MLP)} | {"steps"}
        assert set(part.consistent) | set(part.inconsistent) == names
        assert not set(part.consistent) & set(part.inconsistent)
        assert "steps" in part.inconsistent
        assert all(n.endswith((".mean", ".var")) is False for n in part.consistent)


# --------------------------------------------------------------- slicing


def test_extract_full_is_exact_copy():
    specs = derive_specs(MLP, GAMMAS, "WD")
    store = build_model(MLP, 0, specs)
    w = extract_submodel(store, specs[-1])
    assert w.consistent.keys() == store.consistent.keys()
    assert all(np.array_equal(w.consistent[n], a) for n, a in store.consistent.items())
    assert all(np.array_equal(w.inconsistent[n], a) for n, a in store.inconsistent[-1].items())
    w.consistent["stem.w"][0, 0] += 1
    assert not np.array_equal(w.consistent["stem.w"], store.consistent["stem.w"])


def test_extract_half_width_prefix():
    cfg = ModelConfig("mlp", ((2, 8),), (4,), 2)
    spec = make_spec(cfg, 1, 0.5)
    store = build_model(cfg, 0, [spec, full_spec(cfg, 2)])
    w = extract_submodel(store, spec)
    assert w.consistent["block1.fc2.w"].shape == (4, 4)
    assert np.array_equal(w.consistent["block1.fc2.w"], store.consistent["block1.fc2.w"][:4, :4])
    assert w.consistent["head.fc.w"].shape == (4, 2)
    assert w.inconsistent["block0.bn1.scale"].shape == (4,)


def test_extract_omits_masked_blocks():
    spec = make_spec(SMALL, 1, 1.0, [1, 0, 1, 0])
    w = extract_submodel(build_model(SMALL, 0, [spec]), spec)
    assert not any(n.startswith(("block1.", "block3.")) for n in w.arrays())
    assert "stage1.proj.w" in w.consistent


def test_roundtrip_into_zeroed_store():
    specs = derive_specs(MLP, GAMMAS, "WD")
    store = build_model(MLP, 1, specs)
    zero = store.copy()
    for a in zero.consistent.values():
        a[...] = 0
    for spec in specs:
        w = extract_submodel(store, spec)
        implant_submodel(zero, spec, w)
        again = extract_submodel(zero, spec)
        assert all(np.array_equal(again.arrays()[n], a) for n, a in w.arrays().items())


widths = st.sampled_from([0.25, 0.4, 0.5, 0.75, 1.0])
masks = st.lists(st.integers(0, 1), min_size=4, max_size=4)


@settings(max_examples=40, deadline=None)
@given(widths, widths, masks)
def test_width_nesting_of_extractions(a, b, mask):
    lo, hi = sorted((a, b))
    mask[0] = mask[2] = 1
    store = build_model(SMALL, 0, [make_spec(SMALL, 1, lo, mask), make_spec(SMALL, 2, hi, mask)])
    small = extract_submodel(store, make_spec(SMALL, 1, lo, mask))
    big = extract_submodel(store, make_spec(SMALL, 2, hi, mask))
    for name, arr in small.consistent.items():
        assert np.array_equal(arr, big.consistent[name][tuple(slice(0, d) for d in arr.shape)])


# --------------------------------------------------------- coordinate maps


def test_coordinate_map_full_and_counts():
    specs = derive_specs(MLP, GAMMAS, "WD")
    total = sum(int(np.prod(t.shape)) for t in layout(MLP) if t.role in ("weight", "bias"))
    assert len(coordinate_map(MLP, specs[-1])) == total
    for s in specs:
        assert len(coordinate_map(MLP, s)) == count_params(MLP, s) - inconsistent_count(MLP, s)
        assert len(coordinate_map(MLP, s, True)) == count_params(MLP, s) - inconsistent_count(MLP, s, True)


def test_masked_block_contributes_no_coordinates():
    spec = make_spec(SMALL, 1, 1.0, [1, 0, 1, 1])
    m = consistent_masks(SMALL, spec)
    assert not m["block1.fc1.w"].any() and not m["block1.fc2.b"].any()
    assert m["block0.fc1.w"].all()


@settings(max_examples=40, deadline=None)
@given(widths, widths, masks, masks)
def test_slimmest_coverage(a, b, m1, m2):
    lo, hi = sorted((a, b))
    s1, s2 = make_spec(SMALL, 1, lo, m1), make_spec(SMALL, 2, hi, m2)
    c1 = consistent_masks(SMALL, s1)
    c2 = consistent_masks(SMALL, s2)
    info = {t.name: t for t in layout(SMALL)}
    for name in c1:
        t = info[name]
        if t.block is None or (m1[t.block] and m2[t.block]):
            assert not (c1[name] & ~c2[name]).any()
