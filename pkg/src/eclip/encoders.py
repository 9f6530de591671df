"""Small MLP text/image towers with hand-written backward passes.

Each tower maps a feature vector (or a T-step sequence of them) to a unit
vector in the shared embedding space. Sequence inputs are mean-pooled over
steps at the top layer before normalization.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import DegenerateError, DimensionError, ParameterError
from .tensor import DTYPE, ParamSet, check_finite

LOG_TAU_MIN = math.log(0.01)
LOG_TAU_MAX = 0.0
TOWERS = ("text", "image")
CHECKPOINT_FORMAT = "eclip-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden_dims: Tuple[int, ...] = ()
    output_dim: int = 32
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.activation not in ("relu", "tanh"):
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ParameterError("layer widths must be >= 1")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d.get("hidden_dims", ())),
            output_dim=int(d["output_dim"]),
            activation=d.get("activation", "relu"),
        )


class ActivationTracker:
    """Counts activation matrices held for a later backward pass."""

    def __init__(self):
        self.live = 0
        self.live_rows = 0
        self.peak = 0
        self.peak_rows = 0
        self._lock = threading.Lock()

    def hold(self, n_mats: int, n_rows: int) -> None:
        with self._lock:
            self.live += n_mats
            self.live_rows += n_rows
            self.peak = max(self.peak, self.live)
            self.peak_rows = max(self.peak_rows, self.live_rows)

    def drop(self, n_mats: int, n_rows: int) -> None:
        with self._lock:
            self.live -= n_mats
            self.live_rows -= n_rows


@dataclass
class ForwardCache:
    layer_inputs: list
    out: np.ndarray
    norms: np.ndarray
    steps: int
    tracker: Optional[ActivationTracker] = None
    released: bool = False

    def release(self) -> None:
        if not self.released and self.tracker is not None:
            self.tracker.drop(len(self.layer_inputs), sum(a.shape[0] for a in self.layer_inputs))
        self.layer_inputs = []
        self.released = True


def pool_mean(token_reprs) -> np.ndarray:
    """Mean over the step axis: ``T x d -> d`` or ``N x T x d -> N x d``."""
    x = np.asarray(token_reprs, dtype=DTYPE)
    if x.ndim not in (2, 3):
        raise DimensionError(f"expected T x d or N x T x d, got shape {x.shape}")
    if x.shape[-2] == 0:
        raise DegenerateError("cannot pool an empty sequence")
    return x.mean(axis=-2)


def l2_normalize(v, min_norm: float = 1e-12) -> np.ndarray:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v, dtype=DTYPE)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= min_norm):
        raise DegenerateError("cannot normalize a near-zero vector")
    return v / norms


def normalize_backward(out: np.ndarray, norms: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull ``g = dL/d(out)`` back through ``out = h / |h|``."""
    return (g - out * np.sum(out * g, axis=-1, keepdims=True)) / norms


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, a):
    return (a > 0.0).astype(DTYPE) if name == "relu" else 1.0 - a * a


def init_tower(spec: EncoderSpec, rng: np.random.Generator, prefix: str = "") -> Dict[str, np.ndarray]:
    gain = 2.0 if spec.activation == "relu" else 1.0
    tensors = {}
    n_layers = len(spec.layer_dims)
    for l, (d_in, d_out) in enumerate(spec.layer_dims):
        scale = math.sqrt((gain if l < n_layers - 1 else 1.0) / d_in)
        tensors[f"{prefix}W{l}"] = rng.normal(0.0, scale, size=(d_in, d_out))
        tensors[f"{prefix}b{l}"] = np.zeros(d_out, dtype=DTYPE)
    return tensors


def encode(
    params: ParamSet,
    spec: EncoderSpec,
    batch,
    prefix: str = "",
    retain: bool = False,
    tracker: Optional[ActivationTracker] = None,
):
    """Forward pass of one tower.

    ``batch`` is ``N x input_dim`` or ``N x T x input_dim``. Returns the unit
    embeddings, plus a ``ForwardCache`` when ``retain`` is set.
    """
    x = np.asarray(batch, dtype=DTYPE)
    if x.ndim == 2:
        n, steps = x.shape[0], 1
    elif x.ndim == 3:
        n, steps = x.shape[0], x.shape[1]
        if steps == 0:
            raise DegenerateError("cannot pool an empty sequence")
        x = x.reshape(n * steps, x.shape[2])
    else:
        raise DimensionError(f"batch must be 2-D or 3-D, got shape {x.shape}")
    if x.shape[1] != spec.input_dim:
        raise DimensionError(f"batch has {x.shape[1]} features, encoder expects {spec.input_dim}")

    if not retain and tracker is not None:
        # only the current layer's activation is alive at any time
        tracker.hold(1, x.shape[0])
    inputs = []
    a = x
    last = len(spec.layer_dims) - 1
    for l in range(last + 1):
        if retain:
            inputs.append(a)
        z = a @ params[f"{prefix}W{l}"] + params[f"{prefix}b{l}"]
        a = _act(spec.activation, z) if l < last else z
    h = pool_mean(a.reshape(n, steps, -1)) if steps > 1 else a
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise DegenerateError("encoder produced a near-zero embedding")
    out = check_finite(h / norms, "embedding")
    if not retain:
        if tracker is not None:
            tracker.drop(1, x.shape[0])
        return out
    if tracker is not None:
        tracker.hold(len(inputs), sum(m.shape[0] for m in inputs))
    return out, ForwardCache(inputs, out, norms, steps, tracker)


def encode_backward(
    params: ParamSet,
    spec: EncoderSpec,
    cache: ForwardCache,
    grad_out,
    prefix: str = "",
    need_input_grad: bool = False,
):
    """Backward pass from ``dL/d(embedding)``; returns ``(param_grads, dL/d(batch) or None)``.

    Releases the cache.
    """
    if cache.released:
        raise RuntimeError("forward cache already consumed")
    g = np.asarray(grad_out, dtype=DTYPE)
    if g.shape != cache.out.shape:
        raise DimensionError(f"gradient shape {g.shape} != embedding shape {cache.out.shape}")
    dz = normalize_backward(cache.out, cache.norms, g)
    if cache.steps > 1:
        dz = np.repeat(dz / cache.steps, cache.steps, axis=0)
    grads = {}
    dx = None
    for l in range(len(spec.layer_dims) - 1, -1, -1):
        a = cache.layer_inputs[l]
        w = params[f"{prefix}W{l}"]
        grads[f"{prefix}W{l}"] = a.T @ dz
        grads[f"{prefix}b{l}"] = dz.sum(axis=0)
        if l > 0:
            dz = (dz @ w.T) * _act_grad(spec.activation, a)
        elif need_input_grad:
            dx = dz @ w.T
    if need_input_grad and cache.steps > 1:
        dx = dx.reshape(-1, cache.steps, spec.input_dim)
    cache.release()
    return grads, dx


@dataclass
class ModelParams:
    """Both towers plus the learnable log-temperature, in one ParamSet.

    Tensor names are ``text.W0``, ``text.b0``, ..., ``image.W0``, ..., ``log_tau``.
    """

    text_spec: EncoderSpec
    image_spec: EncoderSpec
    params: ParamSet
    freeze: Dict[str, bool] = field(default_factory=lambda: {"text": False, "image": False})

    @classmethod
    def init(cls, text_spec: EncoderSpec, image_spec: EncoderSpec, seed: int = 0, tau_init: float = 0.07):
        if text_spec.output_dim != image_spec.output_dim:
            raise DimensionError("text and image towers must share the output dimension")
        rng = np.random.default_rng(seed)
        ps = ParamSet()
        for tower, spec in (("text", text_spec), ("image", image_spec)):
            for name, v in init_tower(spec, rng, f"{tower}.").items():
                ps.add(name, v)
        ps.add("log_tau", np.array([math.log(tau_init)]))
        model = cls(text_spec, image_spec, ps)
        model.clamp_log_tau()
        return model

    @property
    def tau(self) -> float:
        return float(math.exp(self.params["log_tau"][0]))

    def clamp_log_tau(self) -> None:
        self.params["log_tau"] = np.clip(self.params["log_tau"], LOG_TAU_MIN, LOG_TAU_MAX)

    def spec(self, tower: str) -> EncoderSpec:
        return self.text_spec if tower == "text" else self.image_spec

    def tower_names(self, tower: str) -> list[str]:
        return [n for n in self.params.names() if n.startswith(tower + ".")]

    def encode(self, tower: str, batch, retain=False, tracker=None):
        return encode(self.params, self.spec(tower), batch, f"{tower}.", retain, tracker)

    def backward(self, tower: str, cache: ForwardCache, grad_out):
        grads, _ = encode_backward(self.params, self.spec(tower), cache, grad_out, f"{tower}.")
        return grads

    def copy(self) -> "ModelParams":
        return ModelParams(self.text_spec, self.image_spec, self.params.copy(), dict(self.freeze))


def save_checkpoint(path, model: ModelParams, step: Optional[int] = None) -> None:
    """Write a JSON checkpoint.

    Top-level keys in order: ``format``, ``version``, ``step``, ``text_spec``,
    ``image_spec``, ``freeze``, ``tensors``. ``tensors`` is a list of
    ``{"name", "shape", "data"}`` records in ParamSet order, ``data`` being the
    row-major flattened values. Floats are written with full round-trip precision.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": step,
        "text_spec": model.text_spec.to_dict(),
        "image_spec": model.image_spec.to_dict(),
        "freeze": dict(model.freeze),
        "tensors": [
            {"name": n, "shape": list(model.params[n].shape), "data": model.params[n].reshape(-1).tolist()}
            for n in model.params.names()
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an e-CLIP checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    ps = ParamSet()
    for t in doc["tensors"]:
        ps.add(t["name"], np.asarray(t["data"], dtype=DTYPE).reshape(t["shape"]))
    return ModelParams(
        EncoderSpec.from_dict(doc["text_spec"]),
        EncoderSpec.from_dict(doc["image_spec"]),
        ps,
        dict(doc.get("freeze", {"text": False, "image": False})),
    )
