"""Submodel derivation, width/depth slicing and the consistent/inconsistent split."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError, SpecError
from .models import (
    ModelConfig,
    ParameterStore,
    WeightSet,
    count_params,
    is_consistent,
    layout,
    uses,
)

POLICIES = ("W", "D", "D_O", "WD")
_GRID = tuple(round(i / 100, 2) for i in range(1, 101))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def sliced_width(gamma_w: float, base: int) -> int:
    return max(1, round_half_up(gamma_w * base))


@dataclass(frozen=True)
class SubmodelSpec:
    k: int  # 1-based
    gamma: float  # target size ratio
    gamma_W: float
    gamma_D: float
    mask: tuple[int, ...]
    init_step: tuple[float, ...]
    stage_widths: tuple[int, ...]
    width_per_block: tuple[int, ...]
    achieved: float  # actual parameter ratio against the global model

    @property
    def is_full(self) -> bool:
        return all(self.mask) and self.gamma_W == 1.0


def make_spec(
    config: ModelConfig,
    k: int,
    gamma_W: float = 1.0,
    mask=None,
    init_step=None,
    gamma: float | None = None,
    gamma_D: float | None = None,
) -> SubmodelSpec:
    """Build a spec from an explicit width ratio, block mask and initial steps."""
    J = config.num_blocks
    mask = tuple(1 if m else 0 for m in (mask if mask is not None else [1] * J))
    if len(mask) != J:
        raise SpecError(f"submodel {k}: mask has {len(mask)} entries, model has {J} blocks")
    if init_step is None:
        init_step = [1.0 if m else 0.0 for m in mask]
    init_step = tuple(float(s) if m else 0.0 for s, m in zip(init_step, mask))
    if len(init_step) != J:
        raise SpecError(f"submodel {k}: {len(init_step)} step sizes for {J} blocks")
    if not 0 < gamma_W <= 1:
        raise SpecError(f"submodel {k}: gamma_W must lie in (0, 1], got {gamma_W}")
    widths = tuple(sliced_width(gamma_W, w) for w in config.base_widths)
    per_block = tuple(widths[config.block_stage(j)] for j in range(J))
    spec = SubmodelSpec(k, 0.0, float(gamma_W), 0.0, mask, init_step, widths, per_block, 0.0)
    full = _full_count(config)
    achieved = count_params(config, spec) / full
    if gamma_D is None:
        gamma_D = depth_ratio(config, mask)
    return SubmodelSpec(k, float(gamma if gamma is not None else achieved), float(gamma_W), float(gamma_D),
                        mask, init_step, widths, per_block, achieved)


def full_spec(config: ModelConfig, k: int = 1) -> SubmodelSpec:
    return make_spec(config, k, 1.0, gamma=1.0, gamma_D=1.0)


@lru_cache(maxsize=None)
def _full_count(config: ModelConfig) -> int:
    widths = config.base_widths
    J = config.num_blocks
    probe = SubmodelSpec(0, 1.0, 1.0, 1.0, (1,) * J, (1.0,) * J, widths,
                         tuple(widths[config.block_stage(j)] for j in range(J)), 1.0)
    return count_params(config, probe)


@lru_cache(maxsize=65536)
def _ratio(config, gamma_w, mask) -> float:
    widths = tuple(sliced_width(gamma_w, w) for w in config.base_widths)
    J = config.num_blocks
    probe = SubmodelSpec(0, 0.0, gamma_w, 0.0, tuple(mask), (1.0,) * J, widths,
                         tuple(widths[config.block_stage(j)] for j in range(J)), 0.0)
    return count_params(config, probe) / _full_count(config)


def depth_ratio(config: ModelConfig, mask) -> float:
    """Parameter ratio of a block mask at full width."""
    return _ratio(config, 1.0, tuple(mask))


def depth_path(config: ModelConfig) -> list[tuple[int, ...]]:
    """Masks visited by greedy from-the-back block removal, full model first.

    Each step drops the last kept block of the stage with the largest kept
    fraction (later stage on ties). The first block of every stage is never
    removed.
    """
    kept = [n for n, _ in config.stages]
    mask = [1] * config.num_blocks
    path = [tuple(mask)]
    starts = config.stage_starts
    while True:
        cands = [s for s, n in enumerate(kept) if n > 1]
        if not cands:
            return path
        s = max(cands, key=lambda s: (kept[s] / config.stages[s][0], s))
        mask[starts[s] + kept[s] - 1] = 0
        kept[s] -= 1
        path.append(tuple(mask))


def overshoot_steps(mask) -> list[float]:
    """Kept block followed by a run of ``r`` skipped blocks starts at step ``r + 1``."""
    steps = [1.0 if m else 0.0 for m in mask]
    last_kept = None
    for j, m in enumerate(mask):
        if m:
            last_kept = j
        elif last_kept is not None:
            steps[last_kept] += 1.0
    return steps


def _pick_width(config, gamma, mask, lower, prefer=None):
    """Width ratio on a 0.01 grid whose parameter ratio is closest to ``gamma``."""
    best = None
    for g in _GRID:
        if g < lower:
            continue
        r = _ratio(config, g, mask)
        key = (abs(r - gamma), abs(g - prefer) if prefer is not None else 0.0, -g)
        if best is None or key < best[0]:
            best = (key, g, r)
    return best[1], best[2]


def _plan_wd(config, gammas, path):
    """Jointly pick (width ratio, depth mask) per submodel for the WD policy.

    Per target, candidates are grid points whose ratio is within 0.01 of the
    best fit. A dynamic program then selects one candidate per submodel with
    non-decreasing width ratio, minimizing the total |gamma_W - gamma_D|.
    """
    layers = []
    for gamma in gammas:
        cands = []
        for mask in path:
            d = depth_ratio(config, mask)
            for g in _GRID:
                cands.append((abs(_ratio(config, g, mask) - gamma), g, d, mask))
        near = min(c[0] for c in cands)
        layers.append([c for c in cands if c[0] <= near + 0.01])
    # cost = (total imbalance, total fit error); back[i] = predecessor index
    prev = [((abs(g - d), err), None) for err, g, d, _ in layers[0]]
    history = [prev]
    for k in range(1, len(layers)):
        cur = []
        for err, g, d, _ in layers[k]:
            best = None
            for i, (cost, _) in enumerate(prev):
                if layers[k - 1][i][1] <= g and (best is None or cost < prev[best][0]):
                    best = i
            if best is None:
                cur.append(((math.inf, math.inf), None))
            else:
                c0 = prev[best][0]
                cur.append(((c0[0] + abs(g - d), c0[1] + err), best))
        history.append(cur)
        prev = cur
    i = min(range(len(prev)), key=lambda i: prev[i][0])
    if math.isinf(prev[i][0][0]):
        raise SpecError("no width-nested WD plan exists for these targets")
    plan = []
    for k in range(len(layers) - 1, -1, -1):
        _, g, d, mask = layers[k][i]
        plan.append((g, mask, d))
        i = history[k][i][1]
    return plan[::-1]


def _from_override(config, k, gamma, entry) -> SubmodelSpec:
    if isinstance(entry, dict):
        unknown = set(entry) - {"gamma_W", "gamma_D", "stages"}
        if unknown:
            raise SpecError(f"override for submodel {k}: unknown keys {sorted(unknown)}")
        rows = entry.get("stages")
        gamma_w = float(entry.get("gamma_W", 1.0))
        gamma_d = entry.get("gamma_D")
    else:
        rows, gamma_w, gamma_d = entry, 1.0, None
    if rows is None:
        rows = [[1] * n for n, _ in config.stages]
    if len(rows) != len(config.stages):
        raise SpecError(f"override for submodel {k}: {len(rows)} stage rows, model has {len(config.stages)} stages")
    values = []
    for s, (row, (n, _)) in enumerate(zip(rows, config.stages)):
        if len(row) != n:
            raise SpecError(f"override for submodel {k}: stage {s} lists {len(row)} blocks, expected {n}")
        values += [float(v) for v in row]
    mask = [1 if v != 0 else 0 for v in values]
    return make_spec(config, k, gamma_w, mask, values, gamma=gamma,
                     gamma_D=float(gamma_d) if gamma_d is not None else None)


def derive_specs(
    config: ModelConfig,
    gammas,
    policy: str = "WD",
    overrides=None,
    tol: float = 0.1,
) -> list[SubmodelSpec]:
    """One spec per target size ratio.

    ``overrides`` is an optional list aligned with ``gammas``; a non-null entry
    replaces the derived spec. An entry is either a list of per-stage rows of
    step values (0 = block skipped) or an object with ``stages`` and optional
    ``gamma_W`` / ``gamma_D``.
    """
    gammas = [float(g) for g in gammas]
    if policy not in POLICIES:
        raise SpecError(f"unknown scaling policy {policy!r}; expected one of {POLICIES}")
    if not gammas or any(b < a for a, b in zip(gammas, gammas[1:])):
        raise SpecError(f"gammas must be non-empty and ascending, got {gammas}")
    if gammas[-1] != 1.0 or gammas[0] <= 0:
        raise SpecError(f"gammas must lie in (0, 1] and end at 1, got {gammas}")
    if overrides is not None and len(overrides) != len(gammas):
        raise SpecError(f"{len(overrides)} overrides for {len(gammas)} submodels")
    path = depth_path(config)
    wd_plan = _plan_wd(config, gammas, path) if policy == "WD" else None
    specs = []
    lower = 0.0
    for i, gamma in enumerate(gammas):
        k = i + 1
        entry = overrides[i] if overrides is not None else None
        if entry is not None:
            spec = _from_override(config, k, gamma, entry)
        elif policy == "W":
            gw, r = _pick_width(config, gamma, (1,) * config.num_blocks, lower)
            spec = make_spec(config, k, gw, gamma=gamma, gamma_D=1.0)
        elif policy in ("D", "D_O"):
            mask = min(path, key=lambda m: (abs(depth_ratio(config, m) - gamma), -sum(m)))
            steps = overshoot_steps(mask) if policy == "D_O" else None
            spec = make_spec(config, k, 1.0, mask, steps, gamma=gamma)
        else:
            gw, mask, d = wd_plan[i]
            spec = make_spec(config, k, gw, mask, gamma=gamma, gamma_D=round(d, 2))
        if abs(spec.achieved - gamma) > tol and entry is None:
            raise SpecError(
                f"submodel {k}: size ratio {gamma} unreachable with policy {policy}; "
                f"nearest achievable is {spec.achieved:.3f}",
                nearest=spec.achieved,
            )
        lower = max(lower, spec.gamma_W)
        specs.append(spec)
    validate_specs(config, specs)
    return specs


def validate_specs(config: ModelConfig, specs) -> None:
    if not specs:
        raise SpecError("at least one submodel is required")
    for i, spec in enumerate(specs):
        if spec.k != i + 1:
            raise SpecError(f"submodel indices must run 1..N_s, got {spec.k} at position {i}")
        if len(spec.mask) != config.num_blocks:
            raise SpecError(f"submodel {spec.k}: mask length does not match the model")
        if any(s != 0 for s, m in zip(spec.init_step, spec.mask) if not m):
            raise SpecError(f"submodel {spec.k}: masked blocks must have zero step size")
    for a, b in zip(specs, specs[1:]):
        if any(x > y for x, y in zip(a.stage_widths, b.stage_widths)):
            raise SpecError(f"submodels {a.k} and {b.k} are not width-nested")
    last = specs[-1]
    if tuple(last.stage_widths) != config.base_widths or not all(last.mask):
        raise SpecError("the largest submodel must be the full global model")


@dataclass(frozen=True)
class ParamPartition:
    consistent: tuple[str, ...]
    inconsistent: tuple[str, ...]


def param_partition(config: ModelConfig, bn_consistent: bool = False) -> ParamPartition:
    c, ic = [], []
    for t in layout(config):
        (c if is_consistent(t, bn_consistent) else ic).append(t.name)
    ic.append("steps")
    return ParamPartition(tuple(c), tuple(ic))


# ----------------------------------------------------------- slicing views


def _prefix(shape):
    return tuple(slice(0, d) for d in shape)


def extract_submodel(store: ParameterStore, spec: SubmodelSpec) -> WeightSet:
    """Leading-prefix slices of the global consistent tensors plus the submodel's own set."""
    if not 1 <= spec.k <= len(store.inconsistent):
        raise ContractError(f"store has {len(store.inconsistent)} submodels, spec asks for {spec.k}")
    own = store.inconsistent[spec.k - 1]
    cons, incons = {}, {}
    for t in layout(store.config):
        if not uses(t, spec):
            continue
        shape = t.sliced_shape(spec.stage_widths)
        if is_consistent(t, store.bn_consistent):
            cons[t.name] = store.consistent[t.name][_prefix(shape)].copy()
        else:
            arr = own[t.name]
            if arr.shape != shape:
                raise ContractError(f"{t.name}: stored shape {arr.shape} does not match spec {shape}")
            incons[t.name] = arr.copy()
    incons["steps"] = own["steps"].copy()
    return WeightSet(cons, incons)


def implant_submodel(store: ParameterStore, spec: SubmodelSpec, weights: WeightSet) -> ParameterStore:
    """Write a submodel's weights back into the global store, in place."""
    own = store.inconsistent[spec.k - 1]
    for name, arr in weights.consistent.items():
        store.consistent[name][_prefix(arr.shape)] = arr
    for name, arr in weights.inconsistent.items():
        own[name] = arr.copy()
    return store


def consistent_masks(config: ModelConfig, spec: SubmodelSpec, bn_consistent: bool = False) -> dict[str, np.ndarray]:
    """Per consistent tensor, a boolean array marking the entries ``spec`` trains."""
    out = {}
    for t in layout(config):
        if not is_consistent(t, bn_consistent):
            continue
        m = np.zeros(t.shape, dtype=bool)
        if uses(t, spec):
            m[_prefix(t.sliced_shape(spec.stage_widths))] = True
        out[t.name] = m
    return out


def consistent_offsets(config: ModelConfig, bn_consistent: bool = False) -> dict[str, int]:
    offsets, acc = {}, 0
    for t in layout(config):
        if is_consistent(t, bn_consistent):
            offsets[t.name] = acc
            acc += int(np.prod(t.shape))
    return offsets


def coordinate_map(config: ModelConfig, spec: SubmodelSpec, bn_consistent: bool = False) -> frozenset[int]:
    """Global flat indices (over consistent tensors, layout order) trained by ``spec``."""
    offsets = consistent_offsets(config, bn_consistent)
    idx = []
    for name, m in consistent_masks(config, spec, bn_consistent).items():
        idx.append(offsets[name] + np.flatnonzero(m))
    return frozenset(np.concatenate(idx).tolist()) if idx else frozenset()
