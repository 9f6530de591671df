"""Downstream evaluation: zero-shot transfer, matching, clustering, probes, fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Hashable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .encoders import ModelParams, encode_backward, l2_normalize, normalize_backward
from .errors import CapacityError, DegenerateError, DimensionError, ParameterError
from .tensor import DTYPE, ParamSet
from .training import OptimizerState, PairDataset, adamw_update

logger = logging.getLogger(__name__)

MODES = ("text", "image", "multimodal")


@dataclass
class LabeledEmbeddings:
    emb: np.ndarray
    labels: list

    def __post_init__(self):
        self.emb = np.asarray(self.emb, dtype=DTYPE)
        if self.emb.ndim != 2 or len(self.labels) != self.emb.shape[0]:
            raise DimensionError("need one label per embedding row")

    def __len__(self):
        return len(self.labels)


@dataclass
class ClusteringResult:
    assignments: np.ndarray
    k: int
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0


def multimodal_embed(x, y) -> np.ndarray:
    """Average of the unit image and text embeddings, renormalized."""
    return l2_normalize((l2_normalize(x) + l2_normalize(y)) / 2.0)


def zero_shot_classify(item_img, item_txt, class_txt, mode: str = "multimodal") -> np.ndarray:
    """Index of the most similar class embedding per item (lowest index on ties)."""
    if mode == "image":
        if item_img is None:
            raise ParameterError("image mode needs image embeddings")
        items = l2_normalize(item_img)
    elif mode == "text":
        if item_txt is None:
            raise ParameterError("text mode needs text embeddings")
        items = l2_normalize(item_txt)
    elif mode == "multimodal":
        if item_img is None or item_txt is None:
            raise ParameterError("multimodal mode needs both image and text embeddings")
        items = multimodal_embed(item_img, item_txt)
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    scores = items @ l2_normalize(class_txt).T
    return np.argmax(scores, axis=1)


def top1_matching_accuracy(
    queries: LabeledEmbeddings,
    pool: Optional[LabeledEmbeddings] = None,
    self_index: Optional[Sequence[int]] = None,
) -> float:
    """Share of queries whose nearest pool row (cosine) carries the same label.

    With ``pool`` omitted the queries are matched against each other,
    leaving each query out. ``self_index[i]`` names the pool row that *is*
    query ``i`` (or -1), and that row is skipped.
    """
    if pool is None:
        pool = queries
        self_index = np.arange(len(queries))
    if len(pool) == 0:
        raise CapacityError("empty matching pool")
    scores = l2_normalize(queries.emb) @ l2_normalize(pool.emb).T
    if self_index is not None:
        for i, j in enumerate(self_index):
            if j >= 0:
                scores[i, j] = -np.inf
    if not np.all(np.isfinite(scores.max(axis=1))):
        raise CapacityError("pool has no candidates besides the query itself")
    nearest = np.argmax(scores, axis=1)
    hits = [queries.labels[i] == pool.labels[j] for i, j in enumerate(nearest)]
    return float(np.mean(hits)) if hits else 0.0


def _encode_labels(labels, vocab=None):
    if vocab is None:
        vocab = {lab: i for i, lab in enumerate(sorted(set(labels), key=str))}
    return np.array([vocab.get(lab, -1) for lab in labels], dtype=np.int64), vocab


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return float(loss), d / n


def fit_linear_head(emb, y, n_classes, epochs=300, lr=0.1, weight_decay=0.0) -> ParamSet:
    """Multinomial logistic regression by full-batch AdamW, zero-initialized."""
    emb = np.asarray(emb, dtype=DTYPE)
    head = ParamSet({"W": np.zeros((emb.shape[1], n_classes)), "b": np.zeros(n_classes)})
    state = OptimizerState()
    for _ in range(epochs):
        _, dl = _softmax_xent(emb @ head["W"] + head["b"], y)
        adamw_update(head, {"W": emb.T @ dl, "b": dl.sum(axis=0)}, state, lr, weight_decay, no_decay=("b",))
    return head


def linear_probe(
    train: LabeledEmbeddings,
    test: LabeledEmbeddings,
    epochs: int = 300,
    lr: float = 0.1,
    weight_decay: float = 0.0,
    return_predictions: bool = False,
):
    """Test accuracy of a linear classifier fit on frozen embeddings."""
    y_train, vocab = _encode_labels(train.labels)
    if len(vocab) < 2:
        raise DegenerateError("linear probe needs at least two classes")
    y_test, _ = _encode_labels(test.labels, vocab)
    head = fit_linear_head(train.emb, y_train, len(vocab), epochs, lr, weight_decay)
    pred = np.argmax(test.emb @ head["W"] + head["b"], axis=1)
    acc = float(np.mean(pred == y_test))
    if return_predictions:
        inv = {i: lab for lab, i in vocab.items()}
        return acc, [inv[p] for p in pred]
    return acc


@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray  # out_dim x d, rows orthonormal
    explained_variance: np.ndarray

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=DTYPE) - self.mean) @ self.components.T

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=DTYPE) @ self.components + self.mean


def pca_fit(X, out_dim: int) -> PCA:
    """Principal axes via SVD of the centered data, largest variance first.

    Each axis is signed so that its largest-magnitude coordinate is positive.
    """
    X = np.asarray(X, dtype=DTYPE)
    n, d = X.shape
    if not 1 <= out_dim <= min(n, d):
        raise ParameterError(f"out_dim {out_dim} outside [1, {min(n, d)}]")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:out_dim].copy()
    pivots = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(out_dim), pivots])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    var = s[:out_dim] ** 2 / max(n - 1, 1)
    return PCA(mean, comps, var)


def pca_project(X, out_dim: int) -> np.ndarray:
    return pca_fit(X, out_dim).transform(X)


def numerical_rank(X) -> int:
    X = np.asarray(X, dtype=DTYPE)
    s = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > s[0] * max(X.shape) * np.finfo(DTYPE).eps))


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X, k, rng):
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[[nxt]])[:, 0])
    return X[chosen].copy()


def kmeans(X, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6, n_init: int = 1) -> ClusteringResult:
    """Lloyd's algorithm from k-means++ seeds; best of ``n_init`` restarts by inertia.

    Ties in assignment go to the lowest-index centroid. An emptied cluster is
    re-seeded with the point farthest from its current centroid.
    """
    X = np.asarray(X, dtype=DTYPE)
    n = len(X)
    if not 1 <= k <= n:
        raise ParameterError(f"k={k} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        C = _kmeans_pp(X, k, rng)
        it = 0
        for it in range(1, max_iter + 1):
            d2 = _sq_dists(X, C)
            assign = np.argmin(d2, axis=1)
            new = C.copy()
            point_d2 = d2[np.arange(n), assign]
            for j in range(k):
                members = assign == j
                if members.any():
                    new[j] = X[members].mean(axis=0)
                else:
                    far = int(np.argmax(point_d2))
                    new[j] = X[far]
                    point_d2[far] = -1.0
            shift = float(np.sqrt(((new - C) ** 2).sum(axis=1)).max())
            C = new
            if shift < tol:
                break
        d2 = _sq_dists(X, C)
        assign = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), assign].sum())
        if best is None or inertia < best.inertia:
            best = ClusteringResult(assign, k, C, inertia, it)
    return best


def _contingency(a, b):
    ca, _ = _encode_labels(list(a))
    cb, _ = _encode_labels(list(b))
    table = np.zeros((ca.max() + 1, cb.max() + 1), dtype=np.int64)
    np.add.at(table, (ca, cb), 1)
    return table


def cluster_accuracy(assignments, gold) -> float:
    table = _contingency(assignments, gold)
    rows, cols = linear_sum_assignment(-table)
    return table[rows, cols].sum() / table.sum()


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def normalized_mutual_info(assignments, gold) -> float:
    """``I(U;V) / sqrt(H(U) H(V))``; 1 for two single-cluster partitions."""
    table = _contingency(assignments, gold)
    n = table.sum()
    if (np.count_nonzero(table, axis=0) == 1).all() and (np.count_nonzero(table, axis=1) == 1).all():
        return 1.0  # identical partitions up to relabeling
    a, b = table.sum(axis=1), table.sum(axis=0)
    h_a, h_b = _entropy(a, n), _entropy(b, n)
    if h_a == 0.0 or h_b == 0.0:
        return 0.0
    nz = table > 0
    mi = float((table[nz] / n * np.log(n * table[nz] / np.outer(a, b)[nz])).sum())
    return max(0.0, mi / np.sqrt(h_a * h_b))


def adjusted_rand_index(assignments, gold) -> float:
    """Chance-corrected pair agreement, evaluated in exact integer arithmetic."""
    table = _contingency(assignments, gold)
    n = int(table.sum())
    if n < 2:
        return 1.0
    comb2 = lambda v: int((np.asarray(v, dtype=np.int64) * (np.asarray(v, dtype=np.int64) - 1) // 2).sum())
    index = comb2(table)
    sa, sb = comb2(table.sum(axis=1)), comb2(table.sum(axis=0))
    c = n * (n - 1) // 2
    num = 2 * (c * index - sa * sb)
    den = c * (sa + sb) - 2 * sa * sb
    if den == 0:
        return 1.0
    return num / den


def clustering_metrics(assignments, gold) -> tuple[float, float, float]:
    """``(ACC, NMI, ARI)``; ACC uses Hungarian matching of clusters to labels."""
    if len(assignments) != len(gold):
        raise DimensionError("assignments and gold labels differ in length")
    if len(gold) == 0:
        raise DimensionError("empty partition")
    return cluster_accuracy(assignments, gold), normalized_mutual_info(assignments, gold), adjusted_rand_index(assignments, gold)


def f1_score(predictions, gold) -> float:
    p = np.asarray(predictions).astype(bool)
    g = np.asarray(gold).astype(bool)
    if p.shape != g.shape:
        raise DimensionError("predictions and gold differ in length")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def cluster_products(txt, img, k: int, out_dim: int = 128, seed: int = 0, n_init: int = 1) -> ClusteringResult:
    """Concatenate text and image embeddings, reduce with PCA, cluster with k-means.

    ``out_dim`` is silently lowered to the numerical rank of the data.
    """
    txt = np.asarray(txt, dtype=DTYPE)
    img = np.asarray(img, dtype=DTYPE)
    if txt.shape[0] != img.shape[0]:
        raise DimensionError("text and image embeddings differ in row count")
    X = np.hstack([txt, img])
    dim = max(1, min(out_dim, numerical_rank(X)))
    return kmeans(pca_project(X, dim), k, seed=seed, n_init=n_init)


def embed_dataset(model: ModelParams, data: PairDataset) -> dict:
    x = model.encode("image", data.image)
    y = model.encode("text", data.text)
    return {"image": x, "text": y, "multimodal": multimodal_embed(x, y)}


def fine_tune(
    model: ModelParams,
    train: PairDataset,
    train_labels: Sequence[Hashable],
    test: PairDataset,
    test_labels: Sequence[Hashable],
    modality: str = "multimodal",
    epochs: int = 100,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    probe_epochs: int = 300,
    probe_lr: float = 0.1,
) -> float:
    """End-to-end training of encoder(s) plus a linear head with cross-entropy.

    The head is warm-started from a linear probe; ``model`` itself is not modified.
    Returns test accuracy.
    """
    if modality not in MODES:
        raise ParameterError(f"unknown modality {modality!r}")
    y_train, vocab = _encode_labels(list(train_labels))
    if len(vocab) < 2:
        raise DegenerateError("fine-tuning needs at least two classes")
    y_test, _ = _encode_labels(list(test_labels), vocab)
    towers = ["text", "image"] if modality == "multimodal" else [modality]
    feats = {"text": train.text, "image": train.image}

    emb0 = embed_dataset(model, train)[modality]
    head = fit_linear_head(emb0, y_train, len(vocab), probe_epochs, probe_lr)
    ps = ParamSet()
    for t in towers:
        for name in model.tower_names(t):
            ps.add(name, model.params[name])
    ps.add("head.W", head["W"])
    ps.add("head.b", head["b"])
    work = model.copy()
    state = OptimizerState()
    for _ in range(epochs):
        for name in ps.names():
            if not name.startswith("head."):
                work.params[name] = ps[name]
        outs, caches = {}, {}
        for t in towers:
            outs[t], caches[t] = work.encode(t, feats[t], retain=True)
        if modality == "multimodal":
            s = (outs["text"] + outs["image"]) / 2.0
            norms = np.linalg.norm(s, axis=1, keepdims=True)
            e = s / norms
        else:
            e = outs[modality]
        _, dl = _softmax_xent(e @ ps["head.W"] + ps["head.b"], y_train)
        grads = {"head.W": e.T @ dl, "head.b": dl.sum(axis=0)}
        de = dl @ ps["head.W"].T
        if modality == "multimodal":
            ds = normalize_backward(e, norms, de) / 2.0
            upstream = {"text": ds, "image": ds}
        else:
            upstream = {modality: de}
        for t in towers:
            g, _ = encode_backward(work.params, work.spec(t), caches[t], upstream[t], f"{t}.")
            grads.update(g)
        adamw_update(ps, grads, state, lr, weight_decay, no_decay=("head.b",))
    for name in ps.names():
        if not name.startswith("head."):
            work.params[name] = ps[name]
    e_test = embed_dataset(work, test)[modality]
    pred = np.argmax(e_test @ ps["head.W"] + ps["head.b"], axis=1)
    return float(np.mean(pred == y_test))


def class_label(path: Sequence[str]) -> str:
    return ">".join(path)


def build_report(
    model: ModelParams,
    train: PairDataset,
    test: PairDataset,
    class_prompts: Dict[str, np.ndarray],
    adult_prefixes: Sequence[str] = (),
    tasks: Sequence[str] = ("zero_shot", "matching", "clustering", "attribute", "category", "adult"),
    pca_dim: int = 128,
    probe_epochs: int = 300,
    probe_lr: float = 0.1,
    seed: int = 0,
) -> dict:
    """Per-task, per-modality metrics on ``test`` (probes are fit on ``train``).

    ``class_prompts`` maps a leaf-category label (``"a>b"``) to the text
    features of that class's prompt.
    """
    emb_test = embed_dataset(model, test)
    classes = sorted(class_prompts)
    test_cls = [class_label(c) for c in test.categories]
    report: dict = {}

    if "zero_shot" in tasks:
        prompt_emb = model.encode("text", np.stack([class_prompts[c] for c in classes]))
        gold = np.array([classes.index(c) if c in classes else -1 for c in test_cls])
        report["zero_shot"] = {
            m: float(np.mean(zero_shot_classify(emb_test["image"], emb_test["text"], prompt_emb, m) == gold))
            for m in MODES
        }
    if "matching" in tasks:
        report["matching"] = {
            m: top1_matching_accuracy(LabeledEmbeddings(emb_test[m], list(test.catalog_ids))) for m in MODES
        }
    if "clustering" in tasks:
        k = len(set(test_cls))
        block = {}
        for m in MODES:
            if m == "multimodal":
                res = cluster_products(emb_test["text"], emb_test["image"], k, pca_dim, seed)
            else:
                X = emb_test[m]
                res = kmeans(pca_project(X, max(1, min(pca_dim, numerical_rank(X)))), k, seed=seed)
            acc, nmi, ari = clustering_metrics(res.assignments, test_cls)
            block[m] = {"acc": acc, "nmi": nmi, "ari": ari}
        report["clustering"] = block
    if "attribute" in tasks:
        # attribute value = top-level category; its prompt averages member-class prompts
        tops = sorted({c.split(">")[0] for c in classes})
        value_feats = np.stack([np.mean([class_prompts[c] for c in classes if c.split(">")[0] == v], axis=0) for v in tops])
        value_emb = model.encode("text", value_feats)
        gold = np.array([tops.index(c.split(">")[0]) for c in test_cls])
        report["attribute"] = {
            m: float(np.mean(zero_shot_classify(emb_test["image"], emb_test["text"], value_emb, m) == gold))
            for m in MODES
        }
    if "category" in tasks or "adult" in tasks:
        emb_train = embed_dataset(model, train)
        train_cls = [class_label(c) for c in train.categories]
    if "category" in tasks:
        report["category"] = {
            m: linear_probe(
                LabeledEmbeddings(emb_train[m], train_cls), LabeledEmbeddings(emb_test[m], test_cls), probe_epochs, probe_lr
            )
            for m in MODES
        }
    if "adult" in tasks and adult_prefixes:
        is_adult = lambda c: any(c == p or c.startswith(p + ">") for p in adult_prefixes)
        y_tr = [int(is_adult(c)) for c in train_cls]
        y_te = [int(is_adult(c)) for c in test_cls]
        block = {}
        for m in MODES:
            if len(set(y_tr)) < 2:
                raise DegenerateError("adult task needs both classes in the training split")
            _, pred = linear_probe(
                LabeledEmbeddings(emb_train[m], y_tr),
                LabeledEmbeddings(emb_test[m], y_te),
                probe_epochs,
                probe_lr,
                return_predictions=True,
            )
            block[m] = {"f1": f1_score(pred, y_te)}
        report["adult"] = block
    return report
