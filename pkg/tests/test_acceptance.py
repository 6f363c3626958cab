"""End-to-end acceptance checks, one or more tests per numbered criterion."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from nestfed import tensor as T
from nestfed.aggregation import (
    group_by_submodel,
    nefedavg_consistent,
    oracle_average,
    random_uploads,
)
from nestfed.cli import main
from nestfed.config import config_from_dict, parse_config
from nestfed.data import (
    check_partition,
    gen_synthetic,
    load_cifar_binary,
    load_idx,
    partition_dirichlet,
    partition_iid,
    read_cifar_file,
    read_idx,
    write_cifar_file,
    write_idx,
)
from nestfed.federation import TRAIN, Federation, FederationConfig, local_train, rng_for
from nestfed.models import ModelConfig, build_model, forward_weights
from nestfed.runner import build_experiment, run_config
from nestfed.scaling import extract_submodel, full_spec, make_spec
from reference import residual_forward
from test_aggregation import CFG as WORKED_CFG
from test_aggregation import noisy_upload, worked_example_specs
from test_models import randomize_bn

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


# ---------------------------------------------------------------- 1: oracle


def random_family(cfg, rng):
    """Width-sorted submodels with arbitrary (possibly non-nested) block masks, plus the full model."""
    n = int(rng.integers(1, 5))
    widths = np.sort(rng.uniform(0.1, 1.0, size=n))
    specs = []
    for k, g in enumerate(widths):
        mask = rng.integers(0, 2, size=cfg.num_blocks)
        specs.append(make_spec(cfg, k + 1, float(g), mask.tolist()))
    return specs + [full_spec(cfg, n + 1)]


@pytest.mark.criterion(1)
def test_oracle_equivalence_randomized(record_property):
    configs = [ModelConfig("mlp", ((2, 6), (1, 10)), (4,), 3),
               ModelConfig("conv", ((1, 4), (2, 6)), (2, 4, 4), 3)]
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, empty_trials, trials = 0.0, 0, 200
    for t in range(trials):
        cfg = configs[t % 2]
        specs = random_family(cfg, rng)
        store = build_model(cfg, t, specs, bn_consistent=bool(t % 3 == 0))
        ups = random_uploads(store, specs, int(rng.integers(2, 11)), rng)
        groups = group_by_submodel(ups, len(specs))
        empty_trials += any(not g for g in groups)
        fast, fast_counts = nefedavg_consistent(store, groups, specs)
        ref, ref_counts = oracle_average(store, ups, specs)
        for name in ref:
            assert np.array_equal(fast_counts[name], ref_counts[name]), name
            worst = max(worst, float(np.max(np.abs(fast[name] - ref[name]), initial=0.0)))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max gap {worst:.1e} over {trials} trials ({empty_trials} with empty groups), "
                              f"{elapsed:.1f}s")
    assert worst <= 1e-12
    assert empty_trials > 0
    assert elapsed < 60


# --------------------------------------------------------- 2: worked example


@pytest.mark.criterion(2)
def test_worked_example_counts(record_property):
    specs = worked_example_specs()
    store = build_model(WORKED_CFG, 0, specs)
    plan = [1, 1, 3, 3, 3, 5, 5]
    ups = [noisy_upload(store, specs[k - 1], cid, cid) for cid, k in enumerate(plan)]
    _, counts = nefedavg_consistent(store, group_by_submodel(ups, 5), specs)
    c = counts["block0.fc1.w"]
    inner, middle, outer = c[:2, :2], c[:6, :6].copy(), c.copy()
    middle[:2, :2] = -1
    outer[:6, :6] = -1
    got = tuple({int(v) for v in ring.ravel()} - {-1} for ring in (inner, middle, outer))
    record_property("detail", f"rings {sorted(got[0])}/{sorted(got[1])}/{sorted(got[2])}")
    assert got == ({7}, {5}, {2})


# -------------------------------------------------------------- 3: gradients


@pytest.mark.criterion(3)
def test_gradients_match_finite_differences(record_property):
    start = time.perf_counter()
    cfg = ModelConfig("conv", ((1, 4), (2, 4), (1, 6)), (2, 6, 6), 3)
    spec = make_spec(cfg, 1, 1.0, None, [0.7, 1.3, 0.4, 1.1])
    store = randomize_bn(build_model(cfg, 11, [spec]))
    store.inconsistent[0]["steps"][:] = spec.init_step
    weights = extract_submodel(store, spec)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(5,) + cfg.input_shape)
    y = np.array([0, 1, 2, 1, 0])

    def loss_value():
        w = weights.copy()
        logits = forward_weights(cfg, spec, w, x, train=True)
        return T.softmax_xent(logits, y)[0].item()

    tape = T.Tape()
    logits = forward_weights(cfg, spec, weights.copy(), x, train=True, tape=tape)
    grads = T.backward(tape, T.softmax_xent(logits, y)[0])
    assert {"steps", "block0.bn1.scale", "stage1.proj.w", "head.fc.b"} <= set(grads)

    params = weights.arrays()
    names = sorted(grads)
    sizes = np.array([params[n].size for n in names], dtype=float)
    worst, h = 0.0, 1e-5
    for _ in range(100):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        arr = params[name]
        idx = tuple(int(rng.integers(d)) for d in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        up = loss_value()
        arr[idx] = old - h
        down = loss_value()
        arr[idx] = old
        num = (up - down) / (2 * h)
        ana = grads[name][idx]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
        worst = max(worst, err)
        assert err < 1e-4, (name, idx, ana, num)
    elapsed = time.perf_counter() - start
    record_property("detail", f"max relative error {worst:.1e}, {elapsed:.1f}s")
    assert elapsed < 120


# -------------------------------------------------------------- 4: reductions


@pytest.mark.criterion(4)
@pytest.mark.parametrize("kind", ["mlp", "conv"])
def test_unit_steps_reduce_to_plain_network(kind):
    cfg = (ModelConfig("mlp", ((2, 8), (2, 16)), (5,), 3) if kind == "mlp"
           else ModelConfig("conv", ((1, 4), (1, 8), (1, 8)), (2, 6, 6), 3))
    store = randomize_bn(build_model(cfg, 5))
    spec = full_spec(cfg)
    x = np.random.default_rng(1).normal(size=(6,) + cfg.input_shape)
    p = {**store.consistent, **store.inconsistent[0]}
    for train in (False, True):
        ours = forward_weights(cfg, spec, extract_submodel(store, spec), x, train=train).data
        assert np.max(np.abs(ours - residual_forward(cfg, p, x, train=train))) < 1e-12


@pytest.mark.criterion(4)
def test_single_full_model_reduces_to_fedavg(record_property):
    cfg = ModelConfig("mlp", ((1, 8), (1, 16)), (6,), 3)
    train, test = gen_synthetic(3, 60, dim=6, margin=6.0, seed=0)
    fcfg = FederationConfig(T=1, M=4, fraction=1.0, E=2, batch_size=16, lr0=0.05, N_s=1, seed=7, augment=False)
    parts = partition_iid(train, 4, 0)
    spec = full_spec(cfg)
    fed = Federation(cfg, [spec], fcfg, train, test, parts)
    start = fed.store.copy()
    fed.run_round()

    # every client trains the whole model from the broadcast weights; average directly
    locals_ = []
    for cid in range(4):
        w, _ = local_train(cfg, spec, extract_submodel(start, spec), train.subset(parts[cid]), 2, 16, 0.05,
                           rng_for(7, 0, cid, TRAIN), use_augment=False)
        locals_.append(w.arrays())
    gap = 0.0
    for name, arr in fed.store.consistent.items():
        gap = max(gap, float(np.max(np.abs(arr - np.mean([w[name] for w in locals_], axis=0)))))
    for name, arr in fed.store.inconsistent[0].items():
        gap = max(gap, float(np.max(np.abs(arr - np.mean([w[name] for w in locals_], axis=0)))))
    record_property("detail", f"max gap to direct FedAvg {gap:.1e}")
    assert gap < 1e-12


# -------------------------------------------------------- 5: override configs


@pytest.mark.criterion(5)
def test_width_depth_override_config(tmp_path):
    cfg = parse_config(CONFIGS / "conv8_wd_override.json")
    exp = build_experiment(cfg)
    first = exp.specs[0]
    assert (first.gamma_W, first.gamma_D) == (0.34, 0.58)
    assert first.mask == (1, 1, 1, 1, 1, 1, 1, 0)
    assert main(["validate", str(CONFIGS / "conv8_wd_override.json")]) == 0
    assert main(["run", str(CONFIGS / "conv8_wd_override.json"), "--out-dir", str(tmp_path), "--quiet"]) == 0
    rows = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 2 * 5


@pytest.mark.criterion(5)
def test_overshoot_override_config(tmp_path):
    exp = build_experiment(parse_config(CONFIGS / "conv27_overshoot_override.json"))
    first = exp.specs[0]
    for s in range(3):
        assert list(first.init_step[9 * s:9 * s + 9]) == [1, 8, 0, 0, 0, 0, 0, 0, 0]
    assert main(["validate", str(CONFIGS / "conv27_overshoot_override.json")]) == 0
    assert main(["run", str(CONFIGS / "conv27_overshoot_override.json"), "--out-dir", str(tmp_path), "--quiet"]) == 0
    rows = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 2 * 5


# ------------------------------------------------------------ 6 and 8: smoke


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    start = time.perf_counter()
    reports, _ = run_config(parse_config(CONFIGS / "smoke.json"), out)
    return reports, out, time.perf_counter() - start


@pytest.mark.criterion(6)
def test_iid_smoke_accuracy(smoke_run, record_property):
    reports, _, elapsed = smoke_run
    cfg = parse_config(CONFIGS / "smoke.json")
    assert len(reports) == cfg.federation.rounds == 100
    assert cfg.federation.clients == 20 and cfg.federation.fraction == 0.5 and cfg.federation.local_epochs == 2
    assert cfg.scaling.gammas == [0.2, 0.4, 0.6, 0.8, 1.0]
    last = reports[-1]
    record_property("detail", f"worst {last.worst:.3f}, mean {last.mean:.3f}, {elapsed:.0f}s")
    assert last.worst >= 0.85
    assert last.mean >= last.worst
    assert elapsed < 600


@pytest.mark.criterion(8)
def test_repeat_run_is_byte_identical(smoke_run, tmp_path, record_property):
    _, first, _ = smoke_run
    run_config(parse_config(CONFIGS / "smoke.json"), tmp_path / "again")
    raw = json.loads((CONFIGS / "smoke.json").read_text())
    raw["federation"]["workers"] = 2
    run_config(config_from_dict(raw), tmp_path / "threads")
    ref = (first / "metrics.csv").read_bytes()
    same = (tmp_path / "again" / "metrics.csv").read_bytes() == ref
    threaded = (tmp_path / "threads" / "metrics.csv").read_bytes() == ref
    record_property("detail", f"repeat identical={same}, two workers identical={threaded}")
    assert same and threaded
    assert (tmp_path / "again" / "diagnostics.csv").read_bytes() == (first / "diagnostics.csv").read_bytes()


# ---------------------------------------------------------- 7: non-IID order


def noniid_worst(seed: int, ablation: bool) -> float:
    raw = json.loads((CONFIGS / "noniid.json").read_text())
    if ablation:
        raw["federation"].update(learnable_steps=False, bn_consistent=True)
    exp = build_experiment(config_from_dict(raw), seed=seed)
    return exp.federation().run()[-1].worst


@pytest.mark.criterion(7)
def test_noniid_learned_steps_not_worse_than_ablation(record_property):
    rows = [(s, noniid_worst(s, False), noniid_worst(s, True)) for s in range(3)]
    text = ", ".join(f"seed {s}: {a:.3f} vs {b:.3f}" for s, a, b in rows)
    mean_gap = np.mean([a - b for _, a, b in rows])
    record_property("detail", f"{text}; mean gap {mean_gap:+.3f}")
    for s, ours, ablation in rows:
        assert ours >= ablation - 0.01, f"seed {s}: {ours:.3f} < {ablation:.3f} - 0.01"


# ------------------------------------------------------------ 9: data pipeline


@pytest.mark.criterion(9)
def test_dirichlet_partitions_on_fifty_seeds():
    train, _ = gen_synthetic(10, 120, seed=0)
    for seed in range(50):
        parts = partition_dirichlet(train, 20, 0.5, seed)
        check_partition(parts, len(train))
        assert sum(len(p) for p in parts) == len(train)


@pytest.mark.criterion(9)
def test_idx_fixture_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(9, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=9).astype(np.uint8)
    write_idx(tmp_path / "images.idx", images)
    write_idx(tmp_path / "labels.idx", labels)
    assert np.array_equal(read_idx(tmp_path / "images.idx"), images)
    assert np.array_equal(read_idx(tmp_path / "labels.idx"), labels)
    data = load_idx(tmp_path / "images.idx", tmp_path / "labels.idx")
    assert np.array_equal(np.rint(data.x[:, 0] * 255).astype(np.uint8), images)
    write_idx(tmp_path / "again.idx", read_idx(tmp_path / "images.idx"))
    assert (tmp_path / "again.idx").read_bytes() == (tmp_path / "images.idx").read_bytes()


@pytest.mark.criterion(9)
def test_cifar_fixture_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    px = rng.integers(0, 256, size=(6, 3, 32, 32), dtype=np.uint8)
    lb = rng.integers(0, 10, size=6)
    write_cifar_file(tmp_path / "data_batch_1.bin", px, lb)
    write_cifar_file(tmp_path / "test_batch.bin", px[:2], lb[:2])
    got_px, got_lb = read_cifar_file(tmp_path / "data_batch_1.bin")
    assert np.array_equal(got_px, px) and np.array_equal(got_lb, lb)
    write_cifar_file(tmp_path / "copy.bin", got_px, got_lb)
    assert (tmp_path / "copy.bin").read_bytes() == (tmp_path / "data_batch_1.bin").read_bytes()
    train, test = load_cifar_binary(tmp_path)
    assert len(train) == 6 and len(test) == 2
