"""Full-batch and multi-stream contrastive gradient steps, AdamW, and the training loop.

The multi-stream step reproduces full-batch gradients while only ever holding
activations for one micro-batch:

1. forward every micro-batch without keeping activations, concatenate the
   embeddings, and compute the full similarity matrix, the loss, and
   ``dL/d(embeddings)`` in closed form;
2. re-run each micro-batch forward with activations kept, inject its rows of
   ``dL/d(embeddings)`` and backpropagate, summing parameter gradients.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Optional, Sequence

import numpy as np

from .batching import BatchSampler, CategoryIndex, ScheduleConfig, batch_size_schedule
from .encoders import LOG_TAU_MAX, LOG_TAU_MIN, ActivationTracker, EncoderSpec, ModelParams, save_checkpoint
from .errors import CapacityError, NumericError, ParameterError
from .loss import eclip_loss, embedding_grads, hard_label_matrix, log_tau_grad, similarity_matrix, soft_label_matrix
from .tensor import DTYPE, ParamSet, neumaier_sum

logger = logging.getLogger(__name__)


@dataclass
class PairDataset:
    """Aligned text features, image features and product metadata."""

    product_ids: list
    text: np.ndarray
    image: np.ndarray
    catalog_ids: list
    categories: list

    def __post_init__(self):
        self.text = np.asarray(self.text, dtype=DTYPE)
        self.image = np.asarray(self.image, dtype=DTYPE)
        n = len(self.product_ids)
        if not (len(self.text) == len(self.image) == len(self.catalog_ids) == len(self.categories) == n):
            raise ParameterError("dataset columns differ in length")
        self.categories = [tuple(c) for c in self.categories]
        self._row = {pid: i for i, pid in enumerate(self.product_ids)}
        if len(self._row) != n:
            raise ParameterError("duplicate product ids in dataset")

    def __len__(self) -> int:
        return len(self.product_ids)

    def rows(self, ids: Sequence[Hashable]) -> np.ndarray:
        return np.array([self._row[i] for i in ids], dtype=np.int64)

    def batch(self, ids: Sequence[Hashable]) -> "Batch":
        r = self.rows(ids)
        return Batch(self.text[r], self.image[r], [self.catalog_ids[i] for i in r])

    def subset(self, ids: Sequence[Hashable]) -> "PairDataset":
        r = self.rows(ids)
        return PairDataset(
            [self.product_ids[i] for i in r],
            self.text[r],
            self.image[r],
            [self.catalog_ids[i] for i in r],
            [self.categories[i] for i in r],
        )

    def category_index(self) -> CategoryIndex:
        return CategoryIndex(self.product_ids, self.categories)


@dataclass
class Batch:
    text: np.ndarray
    image: np.ndarray
    catalog_ids: list

    def __len__(self) -> int:
        return len(self.catalog_ids)


@dataclass
class StepResult:
    loss: float
    grads: Dict[str, np.ndarray]
    stats: dict = field(default_factory=dict)


def _labels(batch: Batch, label_mode: str) -> np.ndarray:
    if label_mode == "soft":
        return soft_label_matrix(batch.catalog_ids)
    if label_mode == "hard":
        return hard_label_matrix(len(batch))
    raise ParameterError(f"unknown label mode {label_mode!r}")


def batch_loss(model: ModelParams, batch: Batch, label_mode: str = "soft") -> float:
    x = model.encode("image", batch.image)
    y = model.encode("text", batch.text)
    loss, _ = eclip_loss(similarity_matrix(x, y), _labels(batch, label_mode), model.tau)
    return loss


def naive_step(model: ModelParams, batch: Batch, label_mode: str = "soft") -> StepResult:
    """Loss and gradients from one full-batch forward/backward pass."""
    tracker = ActivationTracker()
    x, cache_x = model.encode("image", batch.image, retain=True, tracker=tracker)
    y, cache_y = model.encode("text", batch.text, retain=True, tracker=tracker)
    sim = similarity_matrix(x, y)
    loss, dsim = eclip_loss(sim, _labels(batch, label_mode), model.tau)
    dx, dy = embedding_grads(x, y, dsim)
    grads = {}
    img_grads = model.backward("image", cache_x, dx)
    txt_grads = model.backward("text", cache_y, dy)
    for tower, g in (("text", txt_grads), ("image", img_grads)):
        if not model.freeze.get(tower, False):
            grads.update(g)
    grads["log_tau"] = np.array([log_tau_grad(sim, dsim)])
    return StepResult(loss, grads, {"peak_rows": tracker.peak_rows})


def _slices(n: int, m: int) -> list[tuple[int, int]]:
    return [(s, min(s + m, n)) for s in range(0, n, m)]


def multistream_step(
    model: ModelParams,
    batch: Batch,
    micro_batch: int,
    label_mode: str = "soft",
    workers: int = 1,
    compensated: bool = False,
    order: Optional[Sequence[int]] = None,
) -> StepResult:
    """Exact full-batch gradients computed micro-batch by micro-batch.

    ``order`` permutes the micro-batches visited in the second stream;
    ``compensated`` sums their gradients with Neumaier summation.
    ``workers > 1`` runs micro-batches on a thread pool; results are merged
    in a fixed order, so the output does not depend on scheduling.
    """
    n = len(batch)
    if not 1 <= micro_batch <= n:
        raise ParameterError(f"micro-batch size {micro_batch} outside [1, {n}]")
    slices = _slices(n, micro_batch)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    run = pool.map if pool is not None else map
    try:
        # stream 1: activations are dropped as soon as each embedding is produced
        stream1 = ActivationTracker()
        x = np.vstack(list(run(lambda s: model.encode("image", batch.image[s[0]:s[1]], tracker=stream1), slices)))
        y = np.vstack(list(run(lambda s: model.encode("text", batch.text[s[0]:s[1]], tracker=stream1), slices)))
        sim = similarity_matrix(x, y)
        loss, dsim = eclip_loss(sim, _labels(batch, label_mode), model.tau)
        dx, dy = embedding_grads(x, y, dsim)

        # stream 2: re-forward with activations, inject embedding gradients
        stream2 = ActivationTracker()
        towers = [t for t in ("text", "image") if not model.freeze.get(t, False)]
        feats = {"text": batch.text, "image": batch.image}
        upstream = {"text": dy, "image": dx}

        def local_grads(s):
            out = {}
            for tower in towers:
                _, cache = model.encode(tower, feats[tower][s[0]:s[1]], retain=True, tracker=stream2)
                out.update(model.backward(tower, cache, upstream[tower][s[0]:s[1]]))
            return out

        visit = [slices[i] for i in order] if order is not None else slices
        parts = list(run(local_grads, visit))
    finally:
        if pool is not None:
            pool.shutdown()

    grads = {}
    names = [name for t in towers for name in model.tower_names(t)]
    for name in names:
        if compensated:
            grads[name] = neumaier_sum(p[name] for p in parts)
        else:
            acc = np.zeros_like(model.params[name])
            for p in parts:
                acc += p[name]
            grads[name] = acc
    # temperature only touches the similarity matrix, so it is settled in stream 1
    grads["log_tau"] = np.array([log_tau_grad(sim, dsim)])
    stats = {
        "micro_batches": len(slices),
        "stream1_peak_mats": stream1.peak,
        "stream2_peak_mats": stream2.peak,
        "stream2_peak_rows": stream2.peak_rows,
    }
    return StepResult(loss, grads, stats)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_update(
    params: ParamSet,
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    no_decay: Sequence[str] = ("log_tau",),
) -> ParamSet:
    """One AdamW step with decoupled weight decay, applied in place.

    Tensors absent from ``grads`` (frozen towers) are left untouched.
    ``log_tau``, when present, is clamped to its allowed range afterwards.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for tensor {name!r}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        theta = params[name]
        g = np.asarray(g, dtype=DTYPE)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        new = theta
        if weight_decay and name not in no_decay:
            new = new - lr * weight_decay * theta
        new = new - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params[name] = new
    if "log_tau" in params:
        params["log_tau"] = np.clip(params["log_tau"], LOG_TAU_MIN, LOG_TAU_MAX)
    return params


@dataclass
class TrainConfig:
    text_spec: EncoderSpec
    image_spec: EncoderSpec
    B0: int = 32
    Bmax: int = 128
    total_steps: int = 1000
    micro_batch: int = 32
    lr: float = 3e-5
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    warmup_fraction: float = 0.1
    neg_prob: float = 0.5
    sampling: str = "uniform"
    category_level: Optional[int] = None
    label_mode: str = "soft"
    tau_init: float = 0.07
    freeze_text: bool = False
    freeze_image: bool = False
    eval_interval: int = 100
    checkpoint_every: int = 0
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        self.schedule  # validates B0/Bmax/steps
        if not 1 <= self.micro_batch <= self.B0:
            raise ParameterError("micro_batch must lie in [1, B0]")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ParameterError("lr and weight_decay must be >= 0, eps > 0")
        if self.eval_interval < 1:
            raise ParameterError("eval_interval must be >= 1")
        if self.label_mode not in ("soft", "hard"):
            raise ParameterError(f"unknown label mode {self.label_mode!r}")

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.B0, self.Bmax, self.total_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["text_spec"] = self.text_spec.to_dict()
        d["image_spec"] = self.image_spec.to_dict()
        d["betas"] = list(self.betas)
        return d


def init_model(config: TrainConfig) -> ModelParams:
    model = ModelParams.init(config.text_spec, config.image_spec, config.seed, config.tau_init)
    model.freeze = {"text": config.freeze_text, "image": config.freeze_image}
    return model


def train(
    config: TrainConfig,
    dataset: PairDataset,
    probe: Optional[Batch] = None,
    eval_fn: Optional[Callable[[ModelParams], dict]] = None,
    log_path=None,
    checkpoint_dir=None,
    model: Optional[ModelParams] = None,
):
    """Train both towers; returns ``(model, metrics)``.

    ``metrics`` holds one record per ``eval_interval`` steps (steps 0, k, 2k, ...),
    each ``{step, loss, batch_size, tau, sampling, eval}``. When ``log_path`` is
    given the records are also written there as JSON lines.
    """
    if len(dataset) < config.Bmax:
        raise CapacityError(f"dataset has {len(dataset)} items but Bmax is {config.Bmax}")
    if model is None:
        model = init_model(config)
    seeds = np.random.SeedSequence(config.seed).spawn(1)[0]
    tree = dataset.category_index() if config.sampling == "category" else None
    sampler = BatchSampler(
        dataset.product_ids,
        tree,
        config.sampling,
        config.warmup_fraction,
        config.neg_prob,
        config.category_level,
        seed=int(seeds.generate_state(1)[0]),
    )
    state = OptimizerState()
    metrics: List[dict] = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for t in range(config.total_steps):
            b = batch_size_schedule(t, config.schedule)
            ids, mode = sampler.draw(t, config.total_steps, b)
            res = multistream_step(
                model, dataset.batch(ids), config.micro_batch, config.label_mode, workers=config.workers
            )
            adamw_update(
                model.params, res.grads, state, config.lr, config.weight_decay, tuple(config.betas), config.eps
            )
            if t % config.eval_interval == 0:
                evals = {}
                if probe is not None:
                    evals["probe_loss"] = batch_loss(model, probe, config.label_mode)
                if eval_fn is not None:
                    evals.update(eval_fn(model))
                rec = {"step": t, "loss": res.loss, "batch_size": b, "tau": model.tau, "sampling": mode, "eval": evals}
                metrics.append(rec)
                logger.info("step %d loss %.5f B=%d tau=%.4f", t, res.loss, b, model.tau)
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
            if checkpoint_dir is not None and config.checkpoint_every and (t + 1) % config.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"step_{t + 1:06d}.json", model, step=t + 1)
    finally:
        if log_file is not None:
            log_file.close()
    return model, metrics
