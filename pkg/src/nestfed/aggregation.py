"""Server-side averaging of submodel uploads.

Consistent tensors are averaged ring by ring: within one tensor, the entries
owned by width ``k`` but not by the next-narrower included width are averaged
over every upload whose submodel contains the tensor and is at least that
wide. Inconsistent tensors (step sizes, per-submodel normalization) are
averaged only within the uploads of the same submodel.

All reductions run in ascending client-id order, so the result does not depend
on the order in which uploads arrive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .models import ParameterStore, WeightSet, is_consistent, layout, uses
from .scaling import consistent_offsets, coordinate_map


@dataclass
class Upload:
    client_id: int
    k: int  # 1-based submodel index
    weights: WeightSet


@dataclass
class AggregateResult:
    consistent: dict[str, np.ndarray]
    inconsistent: list[dict[str, np.ndarray]]
    counts: dict[str, np.ndarray]  # contributors per consistent coordinate

    def to_store(self, like: ParameterStore) -> ParameterStore:
        return ParameterStore(like.config, self.consistent, self.inconsistent, like.bn_consistent, dict(like.meta))


def group_by_submodel(uploads, n_submodels: int) -> list[list[Upload]]:
    """``groups[k - 1]`` holds the uploads of submodel ``k``, sorted by client id."""
    groups: list[list[Upload]] = [[] for _ in range(n_submodels)]
    for up in sorted(uploads, key=lambda u: u.client_id):
        if not 1 <= up.k <= n_submodels:
            raise ContractError(f"upload from client {up.client_id} names unknown submodel {up.k}")
        groups[up.k - 1].append(up)
    return groups


def _prefix(shape):
    return tuple(slice(0, d) for d in shape)


def check_uploads(store: ParameterStore, groups, specs) -> None:
    for k, group in enumerate(groups, start=1):
        spec = specs[k - 1]
        for up in group:
            for t in layout(store.config):
                if not is_consistent(t, store.bn_consistent):
                    continue
                arr = up.weights.consistent.get(t.name)
                if not uses(t, spec):
                    if arr is not None:
                        raise ContractError(f"client {up.client_id}: {t.name} belongs to a block submodel {k} skips")
                    continue
                want = t.sliced_shape(spec.stage_widths)
                if arr is None or arr.shape != want:
                    got = None if arr is None else arr.shape
                    raise ContractError(f"client {up.client_id}: {t.name} has shape {got}, submodel {k} needs {want}")


def nefedavg_consistent(store: ParameterStore, groups, specs) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Nested averaging of the consistent tensors; returns (tensors, contributor counts)."""
    if len(groups) != len(specs):
        raise ContractError(f"{len(groups)} groups for {len(specs)} submodels")
    check_uploads(store, groups, specs)
    new, counts = {}, {}
    for t in layout(store.config):
        if not is_consistent(t, store.bn_consistent):
            continue
        old = store.consistent[t.name]
        out = old.copy()
        cnt = np.zeros(t.shape, dtype=np.int64)
        included = [k for k in range(1, len(specs) + 1) if uses(t, specs[k - 1])]
        inner = (0,) * len(t.shape)
        for pos, k in enumerate(included):
            shape = t.sliced_shape(specs[k - 1].stage_widths)
            if any(a > b for a, b in zip(inner, shape)):
                raise ContractError(f"{t.name}: submodel {k} is narrower than a smaller submodel")
            ring = np.zeros(t.shape, dtype=bool)
            ring[_prefix(shape)] = True
            ring[_prefix(inner)] = False
            inner = shape
            if not ring.any():
                continue
            members = sorted((up for l in included[pos:] for up in groups[l - 1]), key=lambda u: u.client_id)
            if not members:
                continue
            acc = np.zeros(shape)
            for up in members:
                acc = acc + up.weights.consistent[t.name][_prefix(shape)]
            sub_ring = ring[_prefix(shape)]
            region = out[_prefix(shape)]
            region[sub_ring] = acc[sub_ring] / len(members)
            cnt[ring] = len(members)
        new[t.name] = out
        counts[t.name] = cnt
    return new, counts


def fedavg_inconsistent(groups, previous=None) -> list[dict[str, np.ndarray]]:
    """Plain per-submodel mean of the inconsistent tensors; empty groups keep ``previous``."""
    out = []
    for k, group in enumerate(groups, start=1):
        if not group:
            if previous is None:
                out.append({})
            else:
                out.append({n: a.copy() for n, a in previous[k - 1].items()})
            continue
        names = group[0].weights.inconsistent.keys()
        avg = {}
        for name in names:
            acc = np.zeros_like(group[0].weights.inconsistent[name])
            for up in group:
                arr = up.weights.inconsistent.get(name)
                if arr is None or arr.shape != acc.shape:
                    raise ContractError(f"client {up.client_id}: inconsistent tensor {name} missing or misshaped")
                acc = acc + arr
            avg[name] = acc / len(group)
        out.append(avg)
    return out


def aggregate(store: ParameterStore, uploads, specs) -> AggregateResult:
    groups = group_by_submodel(uploads, len(specs))
    cons, counts = nefedavg_consistent(store, groups, specs)
    incons = fedavg_inconsistent(groups, store.inconsistent)
    return AggregateResult(cons, incons, counts)


def oracle_average(store: ParameterStore, uploads, specs) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Coordinate-by-coordinate reference for :func:`nefedavg_consistent`.

    Every consistent scalar is addressed by its flat index in the concatenated
    global parameter vector. A coordinate's new value is the mean over the
    uploads whose coordinate map contains it, or its old value if none does.
    """
    config = store.config
    offsets = consistent_offsets(config, store.bn_consistent)
    infos = [t for t in layout(config) if is_consistent(t, store.bn_consistent)]
    size = sum(int(np.prod(t.shape)) for t in infos)
    old = np.zeros(size)
    for t in infos:
        old[offsets[t.name]:offsets[t.name] + _numel(t)] = store.consistent[t.name].ravel()
    total = np.zeros(size)
    count = np.zeros(size, dtype=np.int64)
    for up in sorted(uploads, key=lambda u: u.client_id):
        spec = specs[up.k - 1]
        idx_parts, val_parts = [], []
        for t in infos:
            if not uses(t, spec):
                continue
            arr = up.weights.consistent[t.name]
            local = np.indices(arr.shape).reshape(len(arr.shape), -1)
            idx_parts.append(offsets[t.name] + np.ravel_multi_index(local, t.shape))
            val_parts.append(arr.ravel())
        idx = np.concatenate(idx_parts) if idx_parts else np.zeros(0, dtype=np.int64)
        if set(idx.tolist()) != coordinate_map(config, spec, store.bn_consistent):
            raise ContractError(f"client {up.client_id}: upload does not cover submodel {up.k}'s coordinates")
        vals = np.concatenate(val_parts) if val_parts else np.zeros(0)
        total[idx] = total[idx] + vals
        count[idx] += 1
    flat = np.where(count > 0, total / np.maximum(count, 1), old)
    new, counts = {}, {}
    for t in infos:
        sl = slice(offsets[t.name], offsets[t.name] + _numel(t))
        new[t.name] = flat[sl].reshape(t.shape)
        counts[t.name] = count[sl].reshape(t.shape)
    return new, counts


def _numel(t) -> int:
    return int(np.prod(t.shape))


def random_uploads(store: ParameterStore, specs, n_clients: int, rng: np.random.Generator) -> list[Upload]:
    """Uploads with random submodel choices and random weights of the right shapes."""
    from .scaling import extract_submodel

    ids = rng.choice(10 * n_clients + 1, size=n_clients, replace=False)
    ups = []
    for cid in ids:
        k = int(rng.integers(1, len(specs) + 1))
        w = extract_submodel(store, specs[k - 1])
        for d in (w.consistent, w.inconsistent):
            for name in d:
                d[name] = rng.normal(size=d[name].shape)
        ups.append(Upload(int(cid), k, w))
    return ups


def differential_check(store: ParameterStore, specs, trials: int = 200, seed: int = 0,
                       max_clients: int = 10) -> float:
    """Largest elementwise gap between nested averaging and the flat oracle over random trials."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        ups = random_uploads(store, specs, int(rng.integers(2, max_clients + 1)), rng)
        fast, fast_counts = nefedavg_consistent(store, group_by_submodel(ups, len(specs)), specs)
        ref, ref_counts = oracle_average(store, ups, specs)
        for name in ref:
            if not np.array_equal(fast_counts[name], ref_counts[name]):
                raise ContractError(f"contributor counts differ on {name}")
            worst = max(worst, float(np.max(np.abs(fast[name] - ref[name]), initial=0.0)))
    return worst
