"""Per-slide prototype banks: K-means over fused features, cosine top-L retrieval."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import BankConfig, config_hash
from .container import read_container, write_container
from .errors import ConfigError

EPS = 1e-8
MAX_ITER = 300


@dataclass
class PrototypeBank:
    slide_id: str
    centroids: np.ndarray  # K x d
    centroid_centers: np.ndarray  # K x 2, mean (x, y) of member spots
    member_counts: np.ndarray  # K
    image_hw: tuple = (0, 0)
    seed: int = 0
    config_hash: str = ""

    @property
    def K(self):
        return int(self.centroids.shape[0])


@dataclass
class PrototypeSet:
    prototypes: np.ndarray  # L x d
    indices: np.ndarray  # L
    similarities: np.ndarray  # L, descending


def choose_cluster_count(n_patches, k_min=32, k_max=80):
    """``min(N, clamp(ceil(N / 8), k_min, k_max))``."""
    if n_patches < 1:
        raise ConfigError("need at least one patch")
    if not 1 <= k_min <= k_max:
        raise ConfigError(f"invalid cluster range [{k_min}, {k_max}]")
    k = min(max(math.ceil(n_patches / 8), k_min), k_max)
    return min(n_patches, k)


def choose_prototype_count(K, strategy="adaptive"):
    """``adaptive`` keeps half the clusters (halves round up); an integer L is capped at K."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    if strategy == "adaptive":
        return max(1, math.floor(0.5 * K + 0.5))
    try:
        L = int(strategy)
    except (TypeError, ValueError):
        raise ConfigError(f"unknown prototype strategy {strategy!r}") from None
    if L < 1:
        raise ConfigError("fixed L must be >= 1")
    return min(L, K)


def kmeans_plus_plus(X, K, rng):
    """Indices of k-means++ seeds (D^2 sampling)."""
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            cdf = np.cumsum(d2)
            idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return np.array(chosen, dtype=np.int64)


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def _repair_empty(assign, d2, K):
    counts = np.bincount(assign, minlength=K)
    for k in np.flatnonzero(counts == 0):
        own = d2[np.arange(len(assign)), assign]
        own = np.where(counts[assign] > 1, own, -np.inf)
        j = int(np.argmax(own))
        counts[assign[j]] -= 1
        assign[j] = k
        counts[k] += 1
    return assign


def lloyd(X, init, max_iter=MAX_ITER):
    """Lloyd iterations from ``init`` centroids.

    Returns ``(centroids, assignments, inertia_history)``; history holds the
    inertia after each centroid update.
    """
    X = np.asarray(X, dtype=np.float64)
    C = np.array(init, dtype=np.float64)
    K = C.shape[0]
    assign = None
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(X, C)
        new = _repair_empty(d2.argmin(1), d2, K)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        C = np.stack([X[assign == k].mean(0) for k in range(K)])
        history.append(float(((X - C[assign]) ** 2).sum()))
    return C, assign, history


def fit_kmeans(embeddings, K, seed=0, max_iter=MAX_ITER, return_history=False):
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError(f"embeddings must be N x d, got shape {X.shape}")
    if K < 1 or X.shape[0] < K:
        raise ConfigError(f"cannot fit {K} clusters to {X.shape[0]} points")
    init = X[kmeans_plus_plus(X, K, np.random.default_rng(seed))]
    C, assign, history = lloyd(X, init, max_iter)
    if return_history:
        return C, assign, history
    return C, assign


def inertia(X, C, assign):
    X = np.asarray(X, dtype=np.float64)
    return float(((X - C[assign]) ** 2).sum())


def cosine_matrix(F, C, eps=EPS):
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    C = np.asarray(C, dtype=np.float64)
    denom = np.maximum(np.linalg.norm(F, axis=1)[:, None] * np.linalg.norm(C, axis=1)[None], eps)
    # elementwise product and sum rather than a BLAS matmul: identical centroids
    # must score identically so the index tie-break applies
    return (F[:, None, :] * C[None, :, :]).sum(-1) / denom


def retrieve_indices(F, centroids, L):
    """Batched retrieval: B x L indices and similarities (ties -> lower index)."""
    sims = cosine_matrix(F, centroids)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :L]
    return order, np.take_along_axis(sims, order, axis=1)


def retrieve_prototypes(f, bank, L):
    if L < 1 or L > bank.K:
        raise ConfigError(f"L={L} outside [1, K={bank.K}]")
    idx, sims = retrieve_indices(np.asarray(f)[None], bank.centroids, L)
    return PrototypeSet(bank.centroids[idx[0]].copy(), idx[0], sims[0])


def build_bank(slide_embeddings, spot_centers, slide_id, cfg=None, seed=0, image_hw=(0, 0),
               K=None):
    """Cluster one slide's embeddings; ``K`` overrides the size rule when given."""
    cfg = cfg or BankConfig()
    X = np.asarray(slide_embeddings, dtype=np.float64)
    centers = np.asarray(spot_centers, dtype=np.float64).reshape(-1, 2)
    if X.shape[0] < 1:
        raise ConfigError(f"slide {slide_id} has no embeddings")
    if centers.shape[0] != X.shape[0]:
        raise ConfigError("embeddings and spot centers differ in length")
    if K is None:
        K = choose_cluster_count(X.shape[0], cfg.k_min, cfg.k_max)
    C, assign = fit_kmeans(X, K, seed)
    counts = np.bincount(assign, minlength=K)
    cc = np.stack([centers[assign == k].mean(0) for k in range(K)])
    return PrototypeBank(slide_id, C, cc, counts.astype(np.int64),
                         tuple(int(v) for v in image_hw), int(seed),
                         config_hash({"k_min": cfg.k_min, "k_max": cfg.k_max, "K": int(K)}))


def save_bank(bank, path):
    write_container(
        path,
        {"centroids": bank.centroids, "centroid_centers": bank.centroid_centers,
         "member_counts": bank.member_counts},
        {"kind": "prototype_bank", "slide_id": bank.slide_id, "K": bank.K,
         "image_hw": list(bank.image_hw), "seed": bank.seed, "config_hash": bank.config_hash},
    )


def load_bank(path):
    arrays, meta = read_container(path)
    return PrototypeBank(meta["slide_id"], arrays["centroids"], arrays["centroid_centers"],
                         arrays["member_counts"], tuple(meta["image_hw"]), meta["seed"],
                         meta["config_hash"])


def save_banks(banks, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for bank in banks.values():
        save_bank(bank, directory / f"{bank.slide_id}.bank")


def load_banks(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"bank directory not found: {directory}")
    banks = {}
    for path in sorted(directory.glob("*.bank")):
        bank = load_bank(path)
        banks[bank.slide_id] = bank
    return banks
