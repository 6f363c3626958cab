"""Round loop: sampling, tiered submodel assignment, local SGD and aggregation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .aggregation import Upload, aggregate
from .data import Dataset, augment
from .errors import ConfigError, DivergenceError
from .models import ParameterStore, WeightSet, build_model, count_params, forward_weights
from .scaling import SubmodelSpec, extract_submodel

# RNG stream tags; every stream is keyed by (seed, round, client, tag)
SAMPLE, ASSIGN, TRAIN = 0, 1, 2


def rng_for(seed: int, round: int, client: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, round, client, tag]))


def default_tier_table(n_submodels: int) -> tuple[tuple[int, ...], ...]:
    """Tier ``t`` may train any submodel within two indices of ``t``."""
    return tuple(tuple(k for k in range(1, n_submodels + 1) if abs(k - t) <= 2)
                 for t in range(1, n_submodels + 1))


@dataclass(frozen=True)
class FederationConfig:
    T: int = 100
    M: int = 100
    fraction: float = 0.1
    E: int = 5
    batch_size: int = 32
    lr0: float = 0.1
    schedule: tuple[float, ...] = (0.5, 0.75)  # decay points as fractions of T
    decay: float = 0.1
    N_s: int = 5
    tier_table: tuple[tuple[int, ...], ...] | None = None
    seed: int = 0
    learnable_steps: bool = True
    static_bn: bool = False
    augment: bool = True
    workers: int = 1
    eval_batch: int = 512

    def __post_init__(self):
        if self.tier_table is None:
            object.__setattr__(self, "tier_table", default_tier_table(self.N_s))
        object.__setattr__(self, "tier_table", tuple(tuple(int(k) for k in t) for t in self.tier_table))
        object.__setattr__(self, "schedule", tuple(float(p) for p in self.schedule))
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"federation.fraction must lie in (0, 1], got {self.fraction}")
        if self.T < 0 or self.M < 1 or self.E < 0 or self.batch_size < 1 or self.N_s < 1:
            raise ConfigError("federation: rounds, clients, epochs, batch size and N_s must be positive")
        if self.lr0 < 0 or self.workers < 1:
            raise ConfigError("federation: lr must be >= 0 and workers >= 1")
        if not self.tier_table:
            raise ConfigError("federation.tiers: at least one tier is required")
        for i, tier in enumerate(self.tier_table):
            if not tier or any(not 1 <= k <= self.N_s for k in tier):
                raise ConfigError(f"federation.tiers[{i}]: allowed submodels must be a non-empty subset of "
                                  f"1..{self.N_s}, got {list(tier)}")

    @property
    def clients_per_round(self) -> int:
        return max(1, math.ceil(self.fraction * self.M - 1e-9))


@dataclass(frozen=True)
class ClientState:
    id: int
    tier: int  # 0-based index into the tier table
    indices: np.ndarray
    seed: int


def lr_at(round: int, cfg: FederationConfig) -> float:
    drops = sum(1 for p in cfg.schedule if round >= p * cfg.T)
    return cfg.lr0 * cfg.decay ** drops


def sample_clients(round: int, cfg: FederationConfig) -> list[int]:
    rng = rng_for(cfg.seed, round, 0, SAMPLE)
    ids = rng.choice(cfg.M, size=cfg.clients_per_round, replace=False)
    return sorted(int(i) for i in ids)


def client_tiers(M: int, n_tiers: int) -> list[int]:
    """Equal-sized tiers of consecutive client ids; leftovers join the last tier."""
    size = max(1, M // n_tiers)
    return [min(i // size, n_tiers - 1) for i in range(M)]


def make_clients(parts, cfg: FederationConfig) -> list[ClientState]:
    if len(parts) != cfg.M:
        raise ConfigError(f"{len(parts)} client partitions for M={cfg.M} clients")
    tiers = client_tiers(cfg.M, len(cfg.tier_table))
    return [ClientState(i, tiers[i], np.asarray(p), cfg.seed) for i, p in enumerate(parts)]


def assign_submodel(client: ClientState, round: int, cfg: FederationConfig) -> int:
    allowed = cfg.tier_table[client.tier]
    rng = rng_for(cfg.seed, round, client.id, ASSIGN)
    return int(allowed[rng.integers(len(allowed))])


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches; a trailing batch of one sample is folded into the previous one."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def local_train(
    config,
    spec: SubmodelSpec,
    weights: WeightSet,
    data: Dataset,
    E: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    learnable_steps: bool = True,
    use_augment: bool = True,
    round: int | None = None,
    client: int | None = None,
) -> tuple[WeightSet, float | None]:
    """E shuffled passes of SGD over ``data``; returns the weights and the last epoch's mean loss."""
    weights = weights.copy()
    params = weights.arrays()
    last = None
    for _ in range(E):
        losses = []
        for idx in minibatches(len(data), batch_size, rng):
            x = augment(data.x[idx], use_augment, rng)
            tape = T.Tape()
            try:
                logits = forward_weights(config, spec, weights, x, train=True, tape=tape,
                                         learnable_steps=learnable_steps)
                loss, _ = T.softmax_xent(logits, data.y[idx])
                if not math.isfinite(loss.item()):
                    raise FloatingPointError("loss is not finite")
                grads = T.backward(tape, loss)
            except FloatingPointError as exc:
                raise DivergenceError(f"local training diverged: {exc}", round, client) from exc
            T.sgd_step(params, grads, lr)
            losses.append(loss.item() * len(idx))
        last = sum(losses) / len(data)
    return weights, last


def refresh_bn_stats(config, spec: SubmodelSpec, weights: WeightSet, data: Dataset, batch_size: int) -> None:
    """Replace running statistics by their average over train-mode passes on ``data``."""
    for name, arr in weights.inconsistent.items():
        if name.endswith(".mean"):
            arr[...] = 0.0
        elif name.endswith(".var"):
            arr[...] = 1.0
    rng = np.random.default_rng(0)
    for i, idx in enumerate(minibatches(len(data), batch_size, rng)):
        forward_weights(config, spec, weights, data.x[np.sort(idx)], train=True, momentum=1.0 / (i + 1))


def evaluate(store: ParameterStore, spec: SubmodelSpec, data: Dataset, batch: int = 512) -> tuple[float, float]:
    """Eval-mode (top-1 accuracy, mean cross-entropy) of one submodel."""
    weights = extract_submodel(store, spec)
    correct, loss = 0, 0.0
    for lo in range(0, len(data), batch):
        x, y = data.x[lo:lo + batch], data.y[lo:lo + batch]
        logits = forward_weights(store.config, spec, weights, x, train=False)
        l, probs = T.softmax_xent(logits, y)
        correct += int((probs.argmax(axis=1) == y).sum())
        loss += l.item() * len(y)
    return correct / len(data), loss / len(data)


@dataclass
class SubmodelResult:
    k: int
    top1: float
    loss: float
    params: int
    achieved: float


@dataclass
class RoundReport:
    round: int
    lr: float
    sampled: list[int]
    assigned: dict[int, int]
    results: list[SubmodelResult]
    steps: list[np.ndarray]
    train_loss: float | None = None

    @property
    def worst(self) -> float:
        return min(r.top1 for r in self.results)

    @property
    def mean(self) -> float:
        return sum(r.top1 for r in self.results) / len(self.results)


@dataclass
class Federation:
    """Server state for one experiment."""

    model_config: object
    specs: list[SubmodelSpec]
    cfg: FederationConfig
    train: Dataset
    test: Dataset
    parts: list[np.ndarray]
    bn_consistent: bool = False
    store: ParameterStore | None = None
    round: int = 0
    trained_counts: list[int] = field(default_factory=list)
    last_uploads: list[Upload] = field(default_factory=list)

    def __post_init__(self):
        if len(self.specs) != self.cfg.N_s:
            raise ConfigError(f"{len(self.specs)} submodels but N_s={self.cfg.N_s}")
        self.clients = make_clients(self.parts, self.cfg)
        if self.store is None:
            self.store = build_model(self.model_config, self.cfg.seed, self.specs, self.bn_consistent)
        self.trained_counts = [0] * len(self.specs)

    def _client_update(self, cid: int, k: int, lr: float, r: int) -> tuple[Upload, float | None]:
        client = self.clients[cid]
        spec = self.specs[k - 1]
        weights = extract_submodel(self.store, spec)
        weights, loss = local_train(
            self.model_config, spec, weights, self.train.subset(client.indices), self.cfg.E,
            self.cfg.batch_size, lr, rng_for(self.cfg.seed, r, cid, TRAIN),
            learnable_steps=self.cfg.learnable_steps, use_augment=self.cfg.augment, round=r, client=cid,
        )
        return Upload(cid, k, weights), loss

    def run_round(self) -> RoundReport:
        r = self.round
        lr = lr_at(r, self.cfg)
        sampled = sample_clients(r, self.cfg)
        assigned = {cid: assign_submodel(self.clients[cid], r, self.cfg) for cid in sampled}
        jobs = [(cid, assigned[cid], lr, r) for cid in sampled]
        if self.cfg.workers > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                done = list(pool.map(lambda a: self._client_update(*a), jobs))
        else:
            done = [self._client_update(*a) for a in jobs]
        uploads = [u for u, _ in done]
        self.store = aggregate(self.store, uploads, self.specs).to_store(self.store)
        self.last_uploads = uploads
        for u in uploads:
            self.trained_counts[u.k - 1] += 1
        losses = [l for _, l in done if l is not None]
        report = RoundReport(r, lr, sampled, assigned, self.evaluate_all(),
                             [self.store.inconsistent[k]["steps"].copy() for k in range(len(self.specs))],
                             sum(losses) / len(losses) if losses else None)
        self.round += 1
        return report

    def evaluate_all(self) -> list[SubmodelResult]:
        if self.cfg.static_bn:
            for spec in self.specs:
                w = extract_submodel(self.store, spec)
                refresh_bn_stats(self.model_config, spec, w, self.train, self.cfg.eval_batch)
                own = self.store.inconsistent[spec.k - 1]
                for name, arr in w.inconsistent.items():
                    if name.endswith(".mean") or name.endswith(".var"):
                        own[name] = arr
        out = []
        for spec in self.specs:
            top1, loss = evaluate(self.store, spec, self.test, self.cfg.eval_batch)
            out.append(SubmodelResult(spec.k, top1, loss, count_params(self.model_config, spec), spec.achieved))
        return out

    def run(self, rounds: int | None = None, callback=None) -> list[RoundReport]:
        reports = []
        for _ in range(self.cfg.T if rounds is None else rounds):
            rep = self.run_round()
            reports.append(rep)
            if callback is not None:
                callback(rep)
        return reports


def run_experiment(model_config, specs, cfg: FederationConfig, train: Dataset, test: Dataset, parts,
                   bn_consistent: bool = False) -> tuple[list[RoundReport], Federation]:
    fed = Federation(model_config, specs, cfg, train, test, parts, bn_consistent)
    return fed.run(), fed
