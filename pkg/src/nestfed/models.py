"""Residual networks whose blocks can be skipped and whose widths can be sliced.

Every residual block ``j`` computes ``Y <- P(Y) + s_j * F_j(Y)`` where ``P`` is
the identity, or a projection at the first block of every stage after the
first, and ``F_j`` is a pre-activation branch (BN, ReLU, layer, BN, ReLU,
layer). With a step size of zero, or with the block masked out, only the
skip path runs, so a masked block costs nothing but its (parameter-free or
projection) shortcut.

Parameters are described by a flat *layout*: one :class:`TensorInfo` per
tensor, each axis tagged with the stage whose width governs it (or ``None``
for axes that are never sliced, such as input features and class logits).
Width slicing always keeps the leading prefix along every tagged axis.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError

if TYPE_CHECKING:
    from .scaling import SubmodelSpec

BLOCK_KINDS = ("mlp", "conv")
BN_ROLES = ("bn_scale", "bn_shift", "bn_mean", "bn_var")


@dataclass(frozen=True)
class ModelConfig:
    block_kind: str
    stages: tuple[tuple[int, int], ...]
    input_shape: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(n), int(w)) for n, w in self.stages))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"model.block_kind: expected one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if not self.stages:
            raise ConfigError("model.stages: at least one stage is required")
        for i, (n, w) in enumerate(self.stages):
            if n < 1:
                raise ConfigError(f"model.stages[{i}]: num_blocks must be >= 1, got {n}")
            if w < 4:
                raise ConfigError(f"model.stages[{i}]: base_width must be >= 4, got {w}")
        if self.num_classes < 2:
            raise ConfigError(f"model.num_classes must be >= 2, got {self.num_classes}")
        want = 1 if self.block_kind == "mlp" else 3
        if len(self.input_shape) != want or min(self.input_shape) < 1:
            raise ConfigError(f"model.input_shape: {self.block_kind} models need {want} positive dims, "
                              f"got {list(self.input_shape)}")
        if self.block_kind == "conv" and min(self.input_shape[1:]) < 3:
            raise ConfigError("model.input_shape: conv models need images of at least 3x3")

    @property
    def num_blocks(self) -> int:
        return sum(n for n, _ in self.stages)

    @property
    def base_widths(self) -> tuple[int, ...]:
        return tuple(w for _, w in self.stages)

    def block_stage(self, j: int) -> int:
        for s, first in enumerate(self.stage_starts):
            if j < first + self.stages[s][0]:
                return s
        raise IndexError(j)

    @property
    def stage_starts(self) -> tuple[int, ...]:
        starts, acc = [], 0
        for n, _ in self.stages:
            starts.append(acc)
            acc += n
        return tuple(starts)

    def is_downsample(self, j: int) -> bool:
        """First block of a stage after the first: carries the stage projection."""
        s = self.block_stage(j)
        return s > 0 and j == self.stage_starts[s]

    def stage_first(self, j: int) -> bool:
        return j == self.stage_starts[self.block_stage(j)]


@dataclass(frozen=True)
class TensorInfo:
    name: str
    shape: tuple[int, ...]
    axes: tuple[int | None, ...]  # governing stage per axis, None = never sliced
    block: int | None  # residual block owning the tensor; None = always used
    role: str  # "weight", "bias", or one of BN_ROLES

    @property
    def trainable(self) -> bool:
        return self.role not in ("bn_mean", "bn_var")

    @property
    def is_bn(self) -> bool:
        return self.role in BN_ROLES

    def sliced_shape(self, stage_widths) -> tuple[int, ...]:
        return tuple(d if a is None else stage_widths[a] for d, a in zip(self.shape, self.axes))


def _bn(prefix, stage, width, block):
    return [TensorInfo(f"{prefix}.{r[3:]}", (width,), (stage,), block, r) for r in BN_ROLES]


@lru_cache(maxsize=None)
def layout(config: ModelConfig) -> tuple[TensorInfo, ...]:
    """All parameter tensors of the global model, in a fixed canonical order."""
    conv = config.block_kind == "conv"
    w = config.base_widths
    out: list[TensorInfo] = []
    if conv:
        c = config.input_shape[0]
        out.append(TensorInfo("stem.w", (w[0], c, 3, 3), (0, None, None, None), None, "weight"))
    else:
        d = config.input_shape[0]
        out.append(TensorInfo("stem.w", (d, w[0]), (None, 0), None, "weight"))
        out.append(TensorInfo("stem.b", (w[0],), (0,), None, "bias"))
    for j in range(config.num_blocks):
        s = config.block_stage(j)
        s_in = s - 1 if config.is_downsample(j) else s
        if config.is_downsample(j):
            if conv:
                out.append(TensorInfo(f"stage{s}.proj.w", (w[s], w[s_in], 1, 1), (s, s_in, None, None), None, "weight"))
            else:
                out.append(TensorInfo(f"stage{s}.proj.w", (w[s_in], w[s]), (s_in, s), None, "weight"))
                out.append(TensorInfo(f"stage{s}.proj.b", (w[s],), (s,), None, "bias"))
        p = f"block{j}"
        out += _bn(f"{p}.bn1", s_in, w[s_in], j)
        if conv:
            out.append(TensorInfo(f"{p}.conv1.w", (w[s], w[s_in], 3, 3), (s, s_in, None, None), j, "weight"))
            out += _bn(f"{p}.bn2", s, w[s], j)
            out.append(TensorInfo(f"{p}.conv2.w", (w[s], w[s], 3, 3), (s, s, None, None), j, "weight"))
        else:
            out.append(TensorInfo(f"{p}.fc1.w", (w[s_in], w[s]), (s_in, s), j, "weight"))
            out.append(TensorInfo(f"{p}.fc1.b", (w[s],), (s,), j, "bias"))
            out += _bn(f"{p}.bn2", s, w[s], j)
            out.append(TensorInfo(f"{p}.fc2.w", (w[s], w[s]), (s, s), j, "weight"))
            out.append(TensorInfo(f"{p}.fc2.b", (w[s],), (s,), j, "bias"))
    last = len(w) - 1
    out += _bn("head.bn", last, w[last], None)
    out.append(TensorInfo("head.fc.w", (w[last], config.num_classes), (last, None), None, "weight"))
    out.append(TensorInfo("head.fc.b", (config.num_classes,), (None,), None, "bias"))
    return tuple(out)


def layout_map(config: ModelConfig) -> dict[str, TensorInfo]:
    return {t.name: t for t in layout(config)}


def is_consistent(info: TensorInfo, bn_consistent: bool = False) -> bool:
    """Shared across submodels (nested-averaged) rather than kept per submodel."""
    if info.role in ("weight", "bias"):
        return True
    return bn_consistent and info.role in ("bn_scale", "bn_shift")


def uses(info: TensorInfo, spec: SubmodelSpec) -> bool:
    return info.block is None or bool(spec.mask[info.block])


@dataclass
class WeightSet:
    """Parameters of one submodel, already sliced to its widths.

    ``inconsistent`` always holds a ``"steps"`` vector over every block of the
    global model; entries of masked blocks are zero.
    """

    consistent: dict[str, np.ndarray]
    inconsistent: dict[str, np.ndarray]

    def copy(self) -> WeightSet:
        return WeightSet({k: v.copy() for k, v in self.consistent.items()},
                         {k: v.copy() for k, v in self.inconsistent.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {**self.consistent, **self.inconsistent}


@dataclass
class ParameterStore:
    """Global consistent parameters plus one inconsistent set per submodel."""

    config: ModelConfig
    consistent: dict[str, np.ndarray]
    inconsistent: list[dict[str, np.ndarray]]
    bn_consistent: bool = False
    meta: dict = field(default_factory=dict)

    def copy(self) -> ParameterStore:
        return ParameterStore(
            self.config,
            {k: v.copy() for k, v in self.consistent.items()},
            [{k: v.copy() for k, v in d.items()} for d in self.inconsistent],
            self.bn_consistent,
            copy.deepcopy(self.meta),
        )

    def equals(self, other: ParameterStore) -> bool:
        if self.consistent.keys() != other.consistent.keys() or len(self.inconsistent) != len(other.inconsistent):
            return False
        if not all(np.array_equal(v, other.consistent[k]) for k, v in self.consistent.items()):
            return False
        for a, b in zip(self.inconsistent, other.inconsistent):
            if a.keys() != b.keys() or not all(np.array_equal(v, b[k]) for k, v in a.items()):
                return False
        return True


def _init_value(info: TensorInfo, shape, rng):
    if info.role == "weight":
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    if info.role in ("bn_scale", "bn_var"):
        return np.ones(shape)
    return np.zeros(shape)


def build_model(config: ModelConfig, seed: int, specs=None, bn_consistent: bool = False) -> ParameterStore:
    """Fresh global store. ``specs`` default to a single full-size submodel."""
    from .scaling import full_spec

    if not isinstance(config, ModelConfig):
        raise ConfigError("build_model expects a ModelConfig")
    if specs is None:
        specs = [full_spec(config)]
    rng = np.random.default_rng(seed)
    consistent = {}
    inconsistent = [dict() for _ in specs]
    for info in layout(config):
        if is_consistent(info, bn_consistent):
            consistent[info.name] = _init_value(info, info.shape, rng)
        else:
            for k, spec in enumerate(specs):
                if uses(info, spec):
                    inconsistent[k][info.name] = _init_value(info, info.sliced_shape(spec.stage_widths), rng)
    for k, spec in enumerate(specs):
        inconsistent[k]["steps"] = np.asarray(spec.init_step, dtype=np.float64).copy()
    return ParameterStore(config, consistent, inconsistent, bn_consistent)


# ------------------------------------------------------------------- forward


class _Params:
    """Resolves parameter names to tensors, watching trainable ones on the tape."""

    def __init__(self, weights: WeightSet, tape, learnable_steps):
        self.arrays = weights.arrays()
        self.tape = tape
        self.learnable_steps = learnable_steps
        self._cache = {}

    def __getitem__(self, name) -> T.Tensor:
        t = self._cache.get(name)
        if t is None:
            arr = self.arrays[name]
            trainable = not (name.endswith(".mean") or name.endswith(".var"))
            if name == "steps":
                trainable = self.learnable_steps
            if self.tape is not None and trainable:
                t = self.tape.watch(arr, name)
            else:
                t = T.Tensor(arr)
            self._cache[name] = t
        return t

    def running(self, prefix):
        return self.arrays[f"{prefix}.mean"], self.arrays[f"{prefix}.var"]


def _bn_apply(p: _Params, prefix, x, train, momentum):
    return T.batchnorm(x, p[f"{prefix}.scale"], p[f"{prefix}.shift"], p.running(prefix), train, momentum)


def forward_weights(
    config: ModelConfig,
    spec: SubmodelSpec,
    weights: WeightSet,
    x,
    train: bool = False,
    tape: T.Tape | None = None,
    learnable_steps: bool = True,
    momentum: float = T.BN_MOMENTUM,
) -> T.Tensor:
    """Logits of submodel ``spec`` given its sliced ``weights``.

    Masked blocks are skipped outright: none of their tensors is read, so none
    is recorded on ``tape``. In train mode the running BN statistics inside
    ``weights`` are updated in place.
    """
    conv = config.block_kind == "conv"
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != config.input_shape:
        raise ContractError(f"forward: batch of shape {x.shape[1:]} but model expects {config.input_shape}")
    if len(spec.mask) != config.num_blocks or len(spec.stage_widths) != len(config.stages):
        raise ContractError("forward: submodel spec does not match the model config")
    p = _Params(weights, tape, learnable_steps)
    y = T.Tensor(x)
    if conv:
        y = T.conv2d(y, p["stem.w"], 1, 1)
    else:
        y = T.affine(y, p["stem.w"], p["stem.b"])
    steps = p["steps"]
    for j in range(config.num_blocks):
        s = config.block_stage(j)
        down = config.is_downsample(j)
        stride = 2 if (conv and down) else 1
        if down:
            if conv:
                short = T.conv2d(y, p[f"stage{s}.proj.w"], stride, 0)
            else:
                short = T.affine(y, p[f"stage{s}.proj.w"], p[f"stage{s}.proj.b"])
        else:
            short = y
        if not spec.mask[j]:
            y = short
            continue
        b = f"block{j}"
        h = T.relu(_bn_apply(p, f"{b}.bn1", y, train, momentum))
        if conv:
            h = T.conv2d(h, p[f"{b}.conv1.w"], stride, 1)
            h = T.relu(_bn_apply(p, f"{b}.bn2", h, train, momentum))
            h = T.conv2d(h, p[f"{b}.conv2.w"], 1, 1)
        else:
            h = T.affine(h, p[f"{b}.fc1.w"], p[f"{b}.fc1.b"])
            h = T.relu(_bn_apply(p, f"{b}.bn2", h, train, momentum))
            h = T.affine(h, p[f"{b}.fc2.w"], p[f"{b}.fc2.b"])
        y = T.add(short, T.scale_by(h, T.take(steps, j)))
    h = T.relu(_bn_apply(p, "head.bn", y, train, momentum))
    if conv:
        h = T.mean_pool(h)
    return T.affine(h, p["head.fc.w"], p["head.fc.b"])


def forward(store: ParameterStore, spec: SubmodelSpec, batch, train: bool = False) -> T.Tensor:
    """Eval-style forward of submodel ``spec`` straight from the global store."""
    from .scaling import extract_submodel

    weights = extract_submodel(store, spec)
    return forward_weights(store.config, spec, weights, batch, train=train)


# ----------------------------------------------------------------- counting


def count_params(config: ModelConfig, spec: SubmodelSpec) -> int:
    """Trainable scalars of the sliced submodel (running BN statistics excluded)."""
    n = sum(int(np.prod(t.sliced_shape(spec.stage_widths)))
            for t in layout(config) if t.trainable and uses(t, spec))
    return n + int(sum(1 for m in spec.mask if m))


def inconsistent_count(config: ModelConfig, spec: SubmodelSpec, bn_consistent: bool = False) -> int:
    """Trainable scalars of the submodel that are kept per submodel."""
    n = sum(int(np.prod(t.sliced_shape(spec.stage_widths)))
            for t in layout(config) if t.trainable and uses(t, spec) and not is_consistent(t, bn_consistent))
    return n + int(sum(1 for m in spec.mask if m))


def count_flops(config: ModelConfig, spec: SubmodelSpec, input_shape=None) -> int:
    """Multiply-accumulates of one forward pass on one sample (linear/conv layers only)."""
    shape = tuple(input_shape) if input_shape is not None else config.input_shape
    w = spec.stage_widths
    conv = config.block_kind == "conv"
    if conv:
        c, h, wd = shape
        macs = w[0] * c * 9 * h * wd
    else:
        macs = shape[0] * w[0]
    for j in range(config.num_blocks):
        s = config.block_stage(j)
        down = config.is_downsample(j)
        w_in = w[s - 1] if down else w[s]
        if conv and down:
            h, wd = -(-h // 2), -(-wd // 2)
        area = h * wd if conv else 1
        if down:
            macs += w[s] * w_in * area
        if spec.mask[j]:
            if conv:
                macs += (w[s] * w_in * 9 + w[s] * w[s] * 9) * area
            else:
                macs += w_in * w[s] + w[s] * w[s]
    macs += w[-1] * config.num_classes
    return int(macs)
