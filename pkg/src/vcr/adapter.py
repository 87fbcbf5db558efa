"""Cache-based low-shot classifiers layered on top of the zero-shot path.

The cache holds the training features as keys and one-hot labels as
values; a query activates keys through phi(z) = exp(-beta * (1 - z)) on
cosine similarity, and the class scores are added to the zero-shot logits
with weight alpha.  phi(1) = 1, so a perfect key match contributes exactly
its one-hot row.  The trainable variant fine-tunes the keys by full-batch
gradient descent on softmax cross-entropy with float64 accumulation,
re-normalizing keys to unit length after every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import TextClassifier, UNIT_TOL
from .errors import InvalidArgumentError
from .refine import zero_shot_logits


@dataclass
class CacheModel:
    keys: np.ndarray  # (N, d) float32, unit rows
    values: np.ndarray  # (N, C) float32 one-hot
    class_count: int

    @property
    def size(self) -> int:
        return int(self.keys.shape[0])

    @property
    def dim(self) -> int:
        return int(self.keys.shape[1])

    def copy(self) -> "CacheModel":
        return CacheModel(self.keys.copy(), self.values.copy(), self.class_count)


@dataclass
class AdapterConfig:
    alpha: float = 1.0
    beta: float = 5.0
    alpha_range: tuple[float, float] = (0.1, 5.0)
    beta_range: tuple[float, float] = (1.0, 10.0)
    grid_steps: int = 20

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidArgumentError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta <= 0:
            raise InvalidArgumentError(f"beta must be > 0, got {self.beta}")
        for lo, hi in (self.alpha_range, self.beta_range):
            if lo > hi:
                raise InvalidArgumentError(f"search range ({lo}, {hi}) is not ordered")


def build_cache(features, labels, class_count: int) -> CacheModel:
    """Stack unit features as keys and labels as one-hot values, in order."""
    feats = [np.asarray(f, dtype=np.float32) for f in features]
    labels = [int(l) for l in labels]
    if not feats:
        raise InvalidArgumentError("cannot build a cache from an empty training set")
    if len(feats) != len(labels):
        raise InvalidArgumentError("features and labels differ in length")
    if class_count < 2:
        raise InvalidArgumentError("cache needs at least 2 classes")
    for i, l in enumerate(labels):
        if not (0 <= l < class_count):
            raise InvalidArgumentError(f"label {l} at position {i} outside [0, {class_count})")
    keys = np.stack(feats)
    norms = np.linalg.norm(keys.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise InvalidArgumentError("cache keys must be unit-norm")
    values = np.zeros((len(labels), class_count), dtype=np.float32)
    values[np.arange(len(labels)), labels] = 1.0
    return CacheModel(keys=keys, values=values, class_count=class_count)


def cache_logits(features: np.ndarray, cache: CacheModel, beta: float) -> np.ndarray:
    """phi(cos(f, keys)) @ values with phi(z) = exp(-beta * (1 - z))."""
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    if single:
        f = f[None, :]
    if f.shape[1] != cache.dim:
        raise InvalidArgumentError(f"feature dim {f.shape[1]} != cache dim {cache.dim}")
    z = f @ cache.keys.T.astype(np.float64)
    phi = np.exp(-beta * (1.0 - z))
    out = phi @ cache.values.astype(np.float64)
    return out[0] if single else out


def adapter_logits(clip_logits: np.ndarray, cache_scores: np.ndarray, alpha: float) -> np.ndarray:
    """Weighted addition: zero-shot logits plus alpha times cache scores."""
    a = np.asarray(clip_logits, dtype=np.float64)
    b = np.asarray(cache_scores, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"logit shapes differ: {a.shape} vs {b.shape}")
    return a + alpha * b


def _loss_and_key_grad(
    keys: np.ndarray,
    values: np.ndarray,
    clf: TextClassifier,
    feats: np.ndarray,
    labels: np.ndarray,
    alpha: float,
    beta: float,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the keys.

    Forward: logits = clip + alpha * phi(F K^T) V, loss = mean CE.
    Backward: dL/dK = (alpha * beta * (G V^T) * phi)^T F with
    G = (softmax - onehot) / batch.
    """
    F = feats.astype(np.float64)  # (T, d)
    K = keys.astype(np.float64)  # (N, d)
    V = values.astype(np.float64)  # (N, C)
    clip = zero_shot_logits(F, clf)  # (T, C)
    z = F @ K.T  # (T, N)
    phi = np.exp(-beta * (1.0 - z))
    logits = clip + alpha * phi @ V

    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    T_count = F.shape[0]
    idx = np.arange(T_count)
    loss = float(-np.mean(shifted[idx, labels] - np.log(e.sum(axis=1))))

    G = p.copy()
    G[idx, labels] -= 1.0
    G /= T_count  # (T, C)
    dphi = alpha * (G @ V.T)  # (T, N)
    dz = dphi * beta * phi  # (T, N)
    grad = dz.T @ F  # (N, d)
    return loss, grad


def adapter_loss(
    cache: CacheModel, clf: TextClassifier, features, labels, alpha: float, beta: float
) -> float:
    """Mean cross-entropy of the adapter on a labeled set (float64)."""
    F = np.stack([np.asarray(f, dtype=np.float64) for f in features])
    y = np.asarray(labels, dtype=np.int64)
    loss, _ = _loss_and_key_grad(cache.keys, cache.values, clf, F, y, alpha, beta)
    return loss


def train_cache_keys(
    cache: CacheModel,
    clf: TextClassifier,
    train,
    config: AdapterConfig,
    lr: float,
    epochs: int,
    seed: int = 0,
) -> CacheModel:
    """Fine-tune cache keys by full-batch gradient descent; values frozen.

    Keys are re-normalized to unit length after every step.  epochs=0
    returns an identical copy.  `seed` is reserved; the full-batch update
    consumes no randomness.
    """
    if epochs < 0:
        raise InvalidArgumentError(f"epochs must be >= 0, got {epochs}")
    if epochs > 0 and lr <= 0:
        raise InvalidArgumentError(f"learning rate must be positive, got {lr}")
    out = cache.copy()
    if epochs == 0:
        return out
    F = np.stack([np.asarray(f, dtype=np.float64) for f, _ in train])
    y = np.asarray([int(l) for _, l in train], dtype=np.int64)
    K = out.keys.astype(np.float64)
    for _ in range(epochs):
        _, grad = _loss_and_key_grad(K, out.values, clf, F, y, config.alpha, config.beta)
        K = K - lr * grad
        K /= np.linalg.norm(K, axis=1, keepdims=True)
    out.keys = K.astype(np.float32)
    return out


def grid_search(
    cache: CacheModel,
    clf: TextClassifier,
    features,
    labels,
    alpha_range: tuple[float, float] = (0.1, 5.0),
    beta_range: tuple[float, float] = (1.0, 10.0),
    steps: int = 20,
) -> tuple[float, float]:
    """Exhaustive (alpha, beta) search maximizing validation accuracy.

    Both axes are linspace(lo, hi, steps), ends inclusive; ties resolve to
    the smallest alpha, then the smallest beta, by scan order.
    """
    feats = [np.asarray(f, dtype=np.float64) for f in features]
    y = np.asarray([int(l) for l in labels], dtype=np.int64)
    if len(feats) == 0 or len(feats) != len(y):
        raise InvalidArgumentError("validation set empty or mismatched")
    if steps < 1:
        raise InvalidArgumentError(f"grid steps must be >= 1, got {steps}")

    F = np.stack(feats)
    clip = zero_shot_logits(F, clf)
    z = F @ cache.keys.T.astype(np.float64)
    V = cache.values.astype(np.float64)

    alphas = _axis(alpha_range, steps)
    betas = _axis(beta_range, steps)
    per_beta = [np.exp(-beta * (1.0 - z)) @ V for beta in betas]
    best_acc, best_pair = -1.0, (float(alphas[0]), float(betas[0]))
    for alpha in alphas:  # alpha-major scan with strict > implements the tie rule
        for cache_scores, beta in zip(per_beta, betas):
            pred = np.argmax(clip + alpha * cache_scores, axis=1)
            acc = float(np.mean(pred == y))
            if acc > best_acc:
                best_acc, best_pair = acc, (float(alpha), float(beta))
    return best_pair


def _axis(bounds: tuple[float, float], steps: int) -> np.ndarray:
    lo, hi = bounds
    if lo > hi:
        raise InvalidArgumentError(f"search range ({lo}, {hi}) is not ordered")
    if steps == 1:
        return np.array([lo], dtype=np.float64)
    return np.linspace(lo, hi, steps, dtype=np.float64)


def write_cache_model(cache: CacheModel, config: AdapterConfig, path: str) -> None:
    """Persist keys as a .vcre store with labels and adapter settings."""
    from .embeddings import make_store, write_embedding_file

    labels = [int(np.argmax(row)) for row in cache.values]
    store = make_store(
        cache.dim,
        cache.keys,
        images=[],
        row_meta=[{"image": f"key{i:05d}", "crop": "cache", "row": i} for i in range(cache.size)],
        extra={
            "labels": labels,
            "adapter": {"alpha": config.alpha, "beta": config.beta},
            "class_count": cache.class_count,
        },
    )
    write_embedding_file(store, path)


def load_cache_model(path: str) -> tuple[CacheModel, AdapterConfig]:
    from .embeddings import load_embedding_file

    store = load_embedding_file(path)
    labels = store.extra.get("labels")
    adapter = store.extra.get("adapter", {})
    if labels is None or len(labels) != store.count:
        raise InvalidArgumentError(f"{path} lacks a labels list matching its rows")
    class_count = int(store.extra.get("class_count", max(labels) + 1))
    cache = build_cache(list(store.rows), labels, class_count)
    config = AdapterConfig(alpha=float(adapter.get("alpha", 1.0)), beta=float(adapter.get("beta", 5.0)))
    return cache, config
