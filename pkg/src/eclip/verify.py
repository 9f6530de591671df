"""Self-check suite behind ``eclip verify``: each check pits a fast path against an oracle."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import oracles
from .batching import ScheduleConfig, batch_size_schedule
from .encoders import EncoderSpec, ModelParams
from .evaluation import clustering_metrics, pca_fit
from .loss import eclip_loss, similarity_matrix, soft_label_matrix
from .preprocess import ImageBuffer, patch_hash
from .tensor import finite_diff_check, matmul
from .training import Batch, batch_loss, multistream_step, naive_step


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def random_model(rng, activation="tanh", text_dim=5, image_dim=7, hidden=(6,), out=4):
    text_spec = EncoderSpec(text_dim, hidden, out, activation)
    image_spec = EncoderSpec(image_dim, hidden, out, activation)
    model = ModelParams.init(text_spec, image_spec, seed=int(rng.integers(1 << 31)), tau_init=float(rng.uniform(0.05, 0.9)))
    for name in model.params.names():
        if name != "log_tau":
            model.params[name] = model.params[name] + rng.normal(0, 0.1, model.params[name].shape)
    return model


def random_batch(rng, model: ModelParams, n: int, n_catalogs: int | None = None, seq: int = 0) -> Batch:
    n_catalogs = n_catalogs or max(1, n // 2)
    tshape = (n, seq, model.text_spec.input_dim) if seq else (n, model.text_spec.input_dim)
    return Batch(
        rng.normal(size=tshape),
        rng.normal(size=(n, model.image_spec.input_dim)),
        rng.integers(0, n_catalogs, size=n).tolist(),
    )


def gradient_equivalence(trials: int, seed: int = 0, max_n: int = 32) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, max_n + 1))
        model = random_model(rng, activation=str(rng.choice(["relu", "tanh"])), hidden=(int(rng.integers(3, 9)),))
        batch = random_batch(rng, model, n)
        ref = naive_step(model, batch)
        for m in sorted({1, 2, 4, n} & set(range(1, n + 1))):
            got = multistream_step(model, batch, m)
            worst = max(worst, oracles.max_relative_discrepancy(got.grads, ref.grads), abs(got.loss - ref.loss))
    return worst


def fd_audit(trials: int, seed: int = 0, n: int = 4) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(trials):
        seq = 3 if trial % 2 else 0
        model = random_model(rng, activation="tanh" if trial % 3 else "relu")
        batch = random_batch(rng, model, n, seq=seq)
        grads = naive_step(model, batch).grads
        worst = max(worst, finite_diff_check(lambda _: batch_loss(model, batch), model.params, grads))
    return worst


def _check(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crash is a failed check, not a crashed suite
        ok, detail = False, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name, ok, f"{detail} ({time.perf_counter() - t0:.2f}s)")


def run_all(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def matmul_check():
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        err = float(np.max(np.abs(matmul(a, b) - oracles.naive_matmul(a, b))))
        return err < 1e-12, f"max abs err {err:.2e}"

    def grad_equiv():
        err = gradient_equivalence(10, seed, max_n=16)
        return err < 1e-9, f"max rel discrepancy {err:.2e} over 10 trials"

    def fd():
        err = fd_audit(4, seed)
        return err < 1e-5, f"max rel err {err:.2e}"

    def soft_labels():
        for _ in range(100):
            ids = rng.integers(0, 5, size=int(rng.integers(1, 12))).tolist()
            z = soft_label_matrix(ids)
            exact = oracles.rational_soft_labels(ids)
            if any(sum(row) != 1 for row in exact) or not np.allclose(z, np.array(exact, dtype=float), atol=0, rtol=1e-15):
                return False, f"mismatch for {ids}"
            if np.max(np.abs(z.sum(axis=1) - 1)) > 1e-12:
                return False, f"row sums off for {ids}"
        return True, "100 random id vectors"

    def hard_reduction():
        worst = 0.0
        for _ in range(20):
            n = int(rng.integers(1, 10))
            sim = rng.uniform(-1, 1, size=(n, n))
            tau = float(rng.uniform(0.02, 1.0))
            loss, _ = eclip_loss(sim, soft_label_matrix(list(range(n))), tau)
            worst = max(worst, abs(loss - oracles.hard_clip_loss(sim.tolist(), tau)))
        return worst < 1e-12, f"max abs diff {worst:.2e}"

    def schedule():
        cfg = ScheduleConfig(8, 256, 12)
        got = [batch_size_schedule(t, cfg) for t in (0, 3, 6, 8)]
        seq = [batch_size_schedule(t, ScheduleConfig(8, 256, 1000)) for t in range(1000)]
        ok = got == [8, 8, 16, 32] and batch_size_schedule(0, ScheduleConfig(8, 256, 10)) == 8
        ok = ok and batch_size_schedule(9, ScheduleConfig(8, 256, 10)) == 256
        ok = ok and all(a <= b for a, b in zip(seq, seq[1:]))
        return ok, f"p=0,1/4,1/2,2/3 -> {got}"

    def metrics():
        count = 0
        for n in range(1, 5):
            parts = list(oracles.set_partitions(n))
            for u in parts:
                for v in parts:
                    acc, nmi, ari = clustering_metrics(u, v)
                    if acc != oracles.brute_force_acc(u, v) or ari != oracles.pair_counting_ari(u, v):
                        return False, f"mismatch at {u} vs {v}"
                    count += 1
        return True, f"{count} partition pairs exact"

    def hashes():
        gray = ImageBuffer(np.full((100, 100, 3), 128, dtype=np.uint8))
        black = ImageBuffer(np.zeros((100, 100, 3), dtype=np.uint8))
        ok = patch_hash(gray) == "5" * 25 + "0101" and patch_hash(black) == "0" * 25 + "0101"
        return ok, "uniform gray/black reference keys"

    def pca():
        X = rng.normal(size=(50, 8))
        p = pca_fit(X, 3)
        cov = np.cov(X - X.mean(axis=0), rowvar=False)
        w, v = np.linalg.eigh(cov)
        top = v[:, np.argsort(w)[::-1][:3]]
        err = float(np.max(np.abs(p.components.T @ p.components - top @ top.T)))
        return err < 1e-8, f"projector diff {err:.2e}"

    def sim_loop():
        x = rng.normal(size=(5, 3))
        y = rng.normal(size=(5, 3))
        err = float(np.max(np.abs(similarity_matrix(x, y) - oracles.loop_similarity(x, y))))
        return err < 1e-12, f"max abs err {err:.2e}"

    for name, fn in [
        ("matmul vs triple loop", matmul_check),
        ("similarity vs dot-product loop", sim_loop),
        ("multi-stream vs full-batch gradients", grad_equiv),
        ("finite-difference gradient audit", fd),
        ("soft-label rows (rational)", soft_labels),
        ("unique catalogs reduce to hard-label loss", hard_reduction),
        ("batch-size schedule", schedule),
        ("clustering metrics vs brute force", metrics),
        ("patch hash reference keys", hashes),
        ("PCA vs covariance eigenvectors", pca),
    ]:
        results.append(_check(name, fn))
    return results
