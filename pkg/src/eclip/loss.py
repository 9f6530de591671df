"""Catalog-aware symmetric InfoNCE loss and its analytic gradients."""

from __future__ import annotations

from typing import Hashable, Sequence

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import DTYPE, check_finite


def soft_label_matrix(catalog_ids: Sequence[Hashable]) -> np.ndarray:
    """Row-stochastic targets spreading mass uniformly over same-catalog batch members.

    ``z[i, j] = 1 / #{k : id[k] == id[i]}`` when ``id[i] == id[j]``, else 0.
    """
    ids = list(catalog_ids)
    codes = {}
    inv = np.array([codes.setdefault(c, len(codes)) for c in ids], dtype=np.int64)
    same = inv[:, None] == inv[None, :]
    counts = same.sum(axis=1, keepdims=True)
    return np.where(same, 1.0 / counts, 0.0).astype(DTYPE)


def hard_label_matrix(n: int) -> np.ndarray:
    return np.eye(n, dtype=DTYPE)


def similarity_matrix(x, y) -> np.ndarray:
    """``sim[i, j] = <x_i, y_j>``; cosine similarity for unit rows."""
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if x.ndim != 2 or x.shape != y.shape:
        raise DimensionError(f"embedding shapes differ: {x.shape} vs {y.shape}")
    return x @ y.T


def sharded_similarity(x, y, n_shards: int) -> np.ndarray:
    """Same as ``similarity_matrix`` but assembled from row blocks, one per shard."""
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if x.shape != y.shape:
        raise DimensionError(f"embedding shapes differ: {x.shape} vs {y.shape}")
    blocks = [xb @ y.T for xb in np.array_split(x, n_shards, axis=0) if len(xb)]
    return np.vstack(blocks)


def _log_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def eclip_loss(sim, labels, tau: float):
    """Symmetric soft-label InfoNCE over an ``N x N`` similarity matrix.

    Rows index images and columns index texts. Logits are ``sim / tau``; the
    image-to-text term uses a row softmax, the text-to-image term a column
    softmax, and the two are averaged.

    Returns ``(loss, dloss_dsim)``.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    sim = np.asarray(sim, dtype=DTYPE)
    z = np.asarray(labels, dtype=DTYPE)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or z.shape != sim.shape:
        raise DimensionError(f"need matching N x N matrices, got {sim.shape} and {z.shape}")
    n = sim.shape[0]
    logits = sim / tau
    log_p_row = _log_softmax(logits, axis=1)
    log_p_col = _log_softmax(logits, axis=0)
    loss_i2t = -np.sum(z * log_p_row) / n
    loss_t2i = -np.sum(z * log_p_col) / n
    loss = 0.5 * (loss_i2t + loss_t2i)

    # general form; reduces to (P - z) when row/column label sums are 1
    g_row = np.exp(log_p_row) * z.sum(axis=1, keepdims=True) - z
    g_col = np.exp(log_p_col) * z.sum(axis=0, keepdims=True) - z
    dsim = 0.5 * (g_row + g_col) / (n * tau)
    return float(loss), check_finite(dsim, "dloss_dsim")


def log_tau_grad(sim, dsim) -> float:
    """dL/d(log tau) given ``dL/dsim`` at fixed embeddings.

    With ``L = f(sim / tau)``: ``dL/dlog_tau = -sum(dL/dsim * sim)``.
    """
    return float(-np.sum(np.asarray(dsim) * np.asarray(sim)))


def embedding_grads(x, y, dsim):
    """Pull ``dL/dsim`` back to the two embedding matrices (``sim = x y^T``)."""
    return dsim @ y, dsim.T @ x


def loss_lower_bound(labels) -> float:
    """Loss infimum for a label matrix: mean row entropy and mean column entropy, averaged."""
    z = np.asarray(labels, dtype=DTYPE)
    zc = z / z.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        h_rows = -np.sum(np.where(z > 0, z * np.log(z), 0.0)) / z.shape[0]
        h_cols = -np.sum(np.where(zc > 0, zc * np.log(zc), 0.0) * z.sum(axis=0)) / z.shape[0]
    return float(0.5 * (h_rows + h_cols))
