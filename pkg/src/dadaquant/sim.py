"""Deterministic single-process FedProx simulation with quantized uplink."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import codecs
from .control import (
    ControllerParams,
    ControllerState,
    allocate_client_levels,
    next_level_adaquantfl_baseline,
    next_level_time_adaptive,
    normalize_weights,
    record_global_loss,
    update_running_loss,
)
from .data import N_PARAMS, ClientData, FederatedDataset, evaluate, mlr_loss, sgd_epochs
from .quantizers import QuantizedUpdate, dequantize, quantize_fixed_point, quantize_fp8

log = logging.getLogger(__name__)

COMPRESSORS = ("none", "fp8", "qsgd", "fedpaq", "fxpq_gzip")
LEVEL_COMPRESSORS = ("qsgd", "fedpaq", "fxpq_gzip")
CONTROLLERS = ("none", "static", "time", "client", "dadaquant", "adaquantfl")

LOSS_SCALAR_BYTES = 4
FLOAT_BYTES = 4

_CODECS = {
    "qsgd": (codecs.pack_update, codecs.unpack_update),
    "fedpaq": (codecs.fedpaq_pack, codecs.fedpaq_unpack),
    "fxpq_gzip": (codecs.deflate_pack, codecs.deflate_unpack),
}


@dataclass(frozen=True)
class TrainingConfig:
    rounds: int = 500
    cohort: int = 10
    epochs: int = 20
    batch_size: int = 10
    lr: float = 0.01
    mu: float = 1.0
    compressor: str = "qsgd"
    controller: str = "dadaquant"
    # static level, and the default q_max for adaptive controllers
    q: int = 8
    q_min: int = 1
    q_max: int | None = None
    psi: float = 0.9
    phi: int | None = None
    heterogeneity: bool = True
    eval_interval: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.cohort < 1:
            raise ValueError("cohort must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.compressor not in COMPRESSORS:
            raise ValueError(f"unknown compressor {self.compressor!r}; choose from {COMPRESSORS}")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}; choose from {CONTROLLERS}")
        if (self.compressor in LEVEL_COMPRESSORS) != (self.controller != "none"):
            raise ValueError(
                f"compressor {self.compressor!r} and controller {self.controller!r} do not combine: "
                "level-based compressors need a level controller, 'none'/'fp8' take controller 'none'"
            )
        self.controller_params()

    def controller_params(self) -> ControllerParams:
        q_max = self.q if self.q_max is None else self.q_max
        phi = max(1, self.rounds // 10) if self.phi is None else self.phi
        return ControllerParams(psi=self.psi, phi=phi, q_min=min(self.q_min, q_max), q_max=q_max)

    def with_(self, **changes) -> "TrainingConfig":
        return replace(self, **changes)


@dataclass
class RoundLog:
    round: int
    clients: tuple[int, ...]
    levels: tuple[int, ...]
    # per-client uplink: encoded update plus the loss scalar
    uplink_bytes: tuple[int, ...]
    level: int
    loss: float
    running_loss: float
    accuracy: float | None = None
    test_loss: float | None = None

    @property
    def total_bytes(self) -> int:
        return int(sum(self.uplink_bytes))


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def client_stream(seed: int, client: int, t: int) -> np.random.Generator:
    return _stream(seed, 1, client, t)


def sample_cohort(rng: np.random.Generator, n: int, k: int) -> list[int]:
    """``k`` distinct client ids drawn uniformly without replacement, ascending."""
    if k > n:
        raise ValueError(f"cohort size {k} exceeds client count {n}")
    if k < 1:
        raise ValueError("cohort size must be >= 1")
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def apply_system_heterogeneity(rng: np.random.Generator, cohort: Sequence[int], epochs: int, enabled: bool = True) -> dict[int, int]:
    """Per-client epoch counts: floor(0.9 K) random clients get ``U{1..E}``, the rest ``E``."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    counts = {int(c): epochs for c in cohort}
    if not enabled or epochs == 1:
        return counts
    n_slow = int(np.floor(0.9 * len(cohort)))
    slow = rng.choice(len(cohort), size=n_slow, replace=False)
    reduced = rng.integers(1, epochs + 1, size=n_slow)
    for idx, e in zip(slow, reduced):
        counts[int(cohort[idx])] = int(e)
    return counts


def client_local_update(
    params: np.ndarray,
    client: ClientData,
    epochs: int,
    lr: float,
    mu: float,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """FedProx local training; returns the new parameters and the pre-training loss."""
    if client.y_train.size == 0:
        raise ValueError("client has no training samples")
    loss_before = mlr_loss(params, client.x_train, client.y_train)
    new = np.array(params, dtype=np.float64, copy=True)
    if epochs > 0:
        n = client.y_train.size
        orders = np.stack([rng.permutation(n) for _ in range(epochs)])
        sgd_epochs(new, np.asarray(params, dtype=np.float64), client.x_train, client.y_train, orders, lr, mu, batch_size)
    return new, loss_before


def accumulate_updates(params: np.ndarray, contributions: Sequence[tuple[float, QuantizedUpdate | np.ndarray]]) -> np.ndarray:
    """``params + sum(w * dequantize(u))`` in the given order."""
    total = sum(w for w, _ in contributions)
    if contributions and abs(total - 1.0) > 1e-9:
        raise ValueError(f"contribution weights sum to {total}, expected 1")
    out = np.array(params, dtype=np.float64, copy=True)
    for w, update in contributions:
        delta = dequantize(update) if isinstance(update, QuantizedUpdate) else np.asarray(update, dtype=np.float64)
        if delta.shape != out.shape:
            raise ValueError(f"update has shape {delta.shape}, parameters {out.shape}")
        out += w * delta
    return out


def compress_delta(delta: np.ndarray, compressor: str, level: int, rng: np.random.Generator):
    """Encode one client delta; returns (reconstruction the server sees, payload bytes)."""
    if compressor == "none":
        return delta, FLOAT_BYTES * delta.size
    if compressor == "fp8":
        return quantize_fp8(delta), delta.size
    pack, unpack = _CODECS[compressor]
    blob = pack(quantize_fixed_point(delta, level, rng))
    return unpack(blob.data), len(blob.data)


@dataclass
class FederatedSimulation:
    config: TrainingConfig
    dataset: FederatedDataset
    params: np.ndarray = field(default_factory=lambda: np.zeros(N_PARAMS))
    logs: list[RoundLog] = field(default_factory=list)

    def __post_init__(self):
        cfg = self.config
        n = self.dataset.num_clients
        if cfg.controller != "adaquantfl" and cfg.cohort > n:
            raise ValueError(f"cohort size {cfg.cohort} exceeds client count {n}")
        self.sizes = self.dataset.train_sizes()
        self.state = ControllerState(cfg.controller_params())
        self.params = np.array(self.params, dtype=np.float64, copy=True)

    def _levels(self, weights: np.ndarray, size: int) -> tuple[int, list[int]]:
        cfg = self.config
        ctl = cfg.controller
        if ctl == "none":
            return 0, [0] * size
        if ctl == "static":
            return cfg.q, [cfg.q] * size
        if ctl == "client":
            return cfg.q, allocate_client_levels(weights, cfg.q)
        if ctl == "adaquantfl":
            q = next_level_adaquantfl_baseline(self.state)
            return q, [q] * size
        q = next_level_time_adaptive(self.state)
        if ctl == "time":
            return q, [q] * size
        return q, allocate_client_levels(weights, q)

    def step(self) -> RoundLog:
        cfg = self.config
        t = len(self.logs)
        n = self.dataset.num_clients
        if cfg.controller == "adaquantfl":
            cohort = list(range(n))
        else:
            cohort = sample_cohort(_stream(cfg.seed, 0, t), n, cfg.cohort)
        weights = normalize_weights(self.sizes[cohort])
        level, levels = self._levels(weights, len(cohort))
        epochs = apply_system_heterogeneity(_stream(cfg.seed, 2, t), cohort, cfg.epochs, cfg.heterogeneity)

        contributions = []
        losses = []
        uplink = []
        for k, w, q_k in zip(cohort, weights, levels):
            rng = client_stream(cfg.seed, k, t)
            new, loss_before = client_local_update(
                self.params, self.dataset.clients[k], epochs[k], cfg.lr, cfg.mu, cfg.batch_size, rng
            )
            received, nbytes = compress_delta(new - self.params, cfg.compressor, q_k, rng)
            contributions.append((float(w), received))
            losses.append(loss_before)
            uplink.append(nbytes + LOSS_SCALAR_BYTES)
        self.params = accumulate_updates(self.params, contributions)

        round_loss = float(np.dot(weights, losses))
        if cfg.controller == "adaquantfl":
            record_global_loss(self.state, round_loss)
        else:
            update_running_loss(self.state, round_loss)
        entry = RoundLog(
            round=t,
            clients=tuple(cohort),
            levels=tuple(int(q) for q in levels),
            uplink_bytes=tuple(uplink),
            level=int(level),
            loss=round_loss,
            running_loss=float(self.state.running_loss),
        )
        if (t + 1) % cfg.eval_interval == 0 or t + 1 == cfg.rounds:
            entry.accuracy, entry.test_loss = evaluate(self.params, self.dataset)
        self.logs.append(entry)
        return entry

    def run(self, progress: Callable[[RoundLog], None] | None = None) -> list[RoundLog]:
        while len(self.logs) < self.config.rounds:
            entry = self.step()
            if progress is not None:
                progress(entry)
        return self.logs


def run_training(config: TrainingConfig, dataset: FederatedDataset, progress=None) -> list[RoundLog]:
    return FederatedSimulation(config, dataset).run(progress)
