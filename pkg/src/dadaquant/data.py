"""Multinomial logistic regression and the Synthetic(alpha, beta) federated dataset."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

N_FEATURES = 60
N_CLASSES = 10
N_PARAMS = N_CLASSES * N_FEATURES + N_CLASSES

DATASET_MAGIC = b"DQSY"
DATASET_VERSION = 1


def unflatten(params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Views of the (10, 60) weight matrix and the bias inside a flat vector."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (N_PARAMS,):
        raise ValueError(f"expected {N_PARAMS} parameters, got shape {params.shape}")
    return params[: N_CLASSES * N_FEATURES].reshape(N_CLASSES, N_FEATURES), params[N_CLASSES * N_FEATURES :]


def flatten(weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(weights, dtype=np.float64).ravel(), np.asarray(bias, dtype=np.float64)])


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def mlr_loss(params: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    w, b = unflatten(params)
    logp = _log_softmax(x @ w.T + b)
    return float(-logp[np.arange(y.size), y].mean())


def mlr_loss_grad(params: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    if y.size == 0:
        raise ValueError("empty batch")
    w, b = unflatten(params)
    logp = _log_softmax(x @ w.T + b)
    idx = np.arange(y.size)
    loss = float(-logp[idx, y].mean())
    resid = np.exp(logp)
    resid[idx, y] -= 1.0
    resid /= y.size
    return loss, flatten(resid.T @ x, resid.sum(axis=0))


def predict(params: np.ndarray, x: np.ndarray) -> np.ndarray:
    w, b = unflatten(params)
    return np.argmax(x @ w.T + b, axis=1)


@njit(cache=True)
def sgd_epochs(params, anchor, x, y, orders, lr, mu, batch_size):
    """In-place mini-batch SGD on mean cross-entropy plus (mu/2)||p - anchor||^2.

    ``orders`` holds one permutation of the sample indices per epoch.
    """
    n_feat = x.shape[1]
    n_cls = params.shape[0] // (n_feat + 1)
    off = n_cls * n_feat
    n = x.shape[0]
    grad = np.zeros_like(params)
    logits = np.zeros(n_cls)
    for e in range(orders.shape[0]):
        order = orders[e]
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            m = stop - start
            grad[:] = 0.0
            for s in range(start, stop):
                i = order[s]
                for c in range(n_cls):
                    acc = params[off + c]
                    for j in range(n_feat):
                        acc += params[c * n_feat + j] * x[i, j]
                    logits[c] = acc
                top = logits.max()
                total = 0.0
                for c in range(n_cls):
                    logits[c] = np.exp(logits[c] - top)
                    total += logits[c]
                for c in range(n_cls):
                    r = logits[c] / total
                    if c == y[i]:
                        r -= 1.0
                    r /= m
                    for j in range(n_feat):
                        grad[c * n_feat + j] += r * x[i, j]
                    grad[off + c] += r
            for k in range(params.shape[0]):
                params[k] -= lr * (grad[k] + mu * (params[k] - anchor[k]))


# -- federated dataset ----------------------------------------------------------------


@dataclass
class ClientData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    # generating model (flat MLR parameters) when known
    model: np.ndarray | None = None

    @property
    def num_samples(self) -> int:
        return int(self.y_train.size + self.y_test.size)


@dataclass
class FederatedDataset:
    clients: list[ClientData]
    meta: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def train_sizes(self) -> np.ndarray:
        return np.array([c.y_train.size for c in self.clients], dtype=np.int64)

    def sample_counts(self) -> np.ndarray:
        return np.array([c.num_samples for c in self.clients], dtype=np.int64)


@dataclass(frozen=True)
class SampleCountModel:
    """Per-client sample count: ``round(lognormal(mean, sigma)) + offset``."""

    mean: float = 3.0
    sigma: float = 2.5
    offset: int = 45


def _client_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0, k]))


def generate_synthetic(
    alpha: float,
    beta: float,
    num_clients: int = 30,
    seed: int = 0,
    counts: SampleCountModel = SampleCountModel(),
    train_fraction: float = 0.8,
) -> FederatedDataset:
    """Non-IID Synthetic(alpha, beta) data labelled by per-client MLR models.

    Client k draws u_k ~ N(0, alpha), B_k ~ N(0, beta), model entries from
    N(u_k, 1) and a feature mean v_k with entries from N(B_k, 1); features are
    N(v_k, diag(j**-1.2)) and labels are argmax(W_k x + b_k). With alpha = 0
    the unit-variance model spread is drawn once and shared by all clients,
    and likewise the feature mean with beta = 0, so alpha = beta = 0 gives a
    homogeneous dataset. Each client's data depends only on (seed, k).
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    if num_clients < 1:
        raise ValueError("need at least one client")
    shared = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    shared_w = shared.normal(0.0, 1.0, (N_CLASSES, N_FEATURES))
    shared_b = shared.normal(0.0, 1.0, N_CLASSES)
    shared_v = shared.normal(0.0, 1.0, N_FEATURES)
    feature_std = np.arange(1, N_FEATURES + 1, dtype=np.float64) ** (-1.2 / 2)

    clients = []
    for k in range(num_clients):
        rng = _client_rng(seed, k)
        u = rng.normal(0.0, alpha) if alpha > 0 else 0.0
        big_b = rng.normal(0.0, beta) if beta > 0 else 0.0
        w_noise = rng.normal(0.0, 1.0, (N_CLASSES, N_FEATURES))
        b_noise = rng.normal(0.0, 1.0, N_CLASSES)
        v_noise = rng.normal(0.0, 1.0, N_FEATURES)
        if alpha == 0:
            w_noise, b_noise = shared_w, shared_b
        if beta == 0:
            v_noise = shared_v
        w = u + w_noise
        b = u + b_noise
        v = big_b + v_noise
        n = int(np.round(rng.lognormal(counts.mean, counts.sigma))) + counts.offset
        x = v + rng.normal(0.0, 1.0, (n, N_FEATURES)) * feature_std
        # features travel as binary32; label the stored values
        x = x.astype(np.float32).astype(np.float64)
        y = np.argmax(x @ w.T + b, axis=1).astype(np.int64)
        perm = rng.permutation(n)
        n_train = int(np.floor(train_fraction * n))
        tr, te = perm[:n_train], perm[n_train:]
        clients.append(ClientData(x[tr], y[tr], x[te], y[te], model=flatten(w, b)))
    meta = {"alpha": alpha, "beta": beta, "seed": seed, "counts": counts, "train_fraction": train_fraction}
    return FederatedDataset(clients, meta)


def evaluate(params: np.ndarray, dataset: FederatedDataset) -> tuple[float, float]:
    """Sample-weighted top-1 accuracy and mean loss over all test splits."""
    correct = 0
    loss_sum = 0.0
    total = 0
    for c in dataset.clients:
        if c.y_test.size == 0:
            continue
        correct += int(np.count_nonzero(predict(params, c.x_test) == c.y_test))
        loss_sum += mlr_loss(params, c.x_test, c.y_test) * c.y_test.size
        total += c.y_test.size
    if total == 0:
        raise ValueError("dataset has no test samples")
    return correct / total, loss_sum / total


def global_train_loss(params: np.ndarray, dataset: FederatedDataset) -> float:
    sizes = dataset.train_sizes()
    losses = [mlr_loss(params, c.x_train, c.y_train) for c in dataset.clients]
    return float(np.dot(sizes, losses) / sizes.sum())


# -- serialization ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIII")


def save_dataset(dataset: FederatedDataset, path: str | Path) -> None:
    """Write the flat binary layout.

    Header: magic, version, N, feature dim, class count (uint32 LE), then
    per-client (sample count, train count). Body per client: binary32
    features row-major (train rows first), then one byte per label.
    """
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, dataset.num_clients, N_FEATURES, N_CLASSES)]
    for c in dataset.clients:
        parts.append(struct.pack("<II", c.num_samples, c.y_train.size))
    for c in dataset.clients:
        x = np.concatenate([c.x_train, c.x_test]).astype("<f4")
        y = np.concatenate([c.y_train, c.y_test]).astype(np.uint8)
        parts += [x.tobytes(), y.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path: str | Path) -> FederatedDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    magic, version, n_clients, dim, n_cls = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path} is not a dataset file")
    if version != DATASET_VERSION or dim != N_FEATURES or n_cls != N_CLASSES:
        raise ValueError(f"unsupported dataset layout (version {version}, dim {dim}, classes {n_cls})")
    off = _HEADER.size
    counts = []
    for _ in range(n_clients):
        counts.append(struct.unpack_from("<II", raw, off))
        off += 8
    clients = []
    for n, n_train in counts:
        x = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=off).reshape(n, dim).astype(np.float64)
        off += 4 * n * dim
        y = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).astype(np.int64)
        off += n
        clients.append(ClientData(x[:n_train], y[:n_train], x[n_train:], y[n_train:]))
    if off != len(raw):
        raise ValueError(f"{path} has {len(raw) - off} trailing bytes")
    return FederatedDataset(clients, {"path": str(path)})


def dataset_stats(dataset: FederatedDataset) -> dict:
    counts = dataset.sample_counts()
    return {
        "clients": dataset.num_clients,
        "samples": int(counts.sum()),
        "mean": float(counts.mean()),
        "min": int(counts.min()),
        "max": int(counts.max()),
        "stddev": float(counts.std()),
        "cv": float(counts.std() / counts.mean()),
    }


def format_stats(stats: dict) -> str:
    return "\n".join(f"{key:>8}: {value:.4g}" if isinstance(value, float) else f"{key:>8}: {value}" for key, value in stats.items())
