"""Training strategies for predictor heads.

Three trainers share the same curve format: full-batch Newton-CG, the
mini-batch regularized variant, and a momentum-SGD baseline.  Every
iteration solves (or steps toward) the damped update
delta = -(H + lam*I)^-1 grad with a fixed number of CG steps; SGD applies
classical momentum instead.  Curves record the loss on the original,
unaugmented dataset so runs with different strategies are comparable, and
the elapsed clock covers only optimization work, not that bookkeeping.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import heads as heads_mod
from .errors import NumericalError
from .heads import LossConfig, PredictorHead
from .linalg import LinearOperator, cg_solve

# Sub-stream tags for deriving independent RNG streams from one seed.
_AUG_STREAM = 1
_SAMPLE_STREAM = 2


def derived_rng(seed: int, *keys: int) -> np.random.Generator:
    """Deterministic child generator for (seed, stream, iteration) keys."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class AugmentConfig:
    copies: int = 5
    noise_std: float = 0.1
    dropout_rate: float = 0.5


@dataclass(frozen=True)
class NewtonConfig:
    """Newton-CG trainer settings.

    `lam` of None resolves to 0 for the full-batch trainer and 0.5 for the
    mini-batch trainer.  `max_step_norm` converts a diverging update into
    a diagnosable error instead of silent non-finite weights.
    """

    num_iterations: int = 30
    n_cg: int = 2
    lam: Optional[float] = None
    augment: Optional[AugmentConfig] = None
    seed: int = 0
    batch_images: int = 16
    max_step_norm: float = 1e3

    def __post_init__(self):
        if self.num_iterations < 1:
            raise ValueError(f"num_iterations must be >= 1, got {self.num_iterations}")
        if self.n_cg < 1:
            raise ValueError(f"n_cg must be >= 1, got {self.n_cg}")
        if self.lam is not None and self.lam < 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")
        if self.batch_images < 1:
            raise ValueError(f"batch_images must be >= 1, got {self.batch_images}")


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_images: int = 16
    num_iterations: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_images < 1 or self.num_iterations < 1:
            raise ValueError("batch_images and num_iterations must be >= 1")


@dataclass
class TrainingCurve:
    """Per-iteration (index, cumulative optimization seconds, loss)."""

    iterations: list = field(default_factory=list)
    elapsed_seconds: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def append(self, iteration: int, elapsed: float, loss: float) -> None:
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError("iterations must be strictly increasing")
        if self.elapsed_seconds and elapsed < self.elapsed_seconds[-1]:
            raise ValueError("elapsed time must be nondecreasing")
        self.iterations.append(int(iteration))
        self.elapsed_seconds.append(float(elapsed))
        self.losses.append(float(loss))

    def __len__(self) -> int:
        return len(self.iterations)

    def to_csv(self) -> str:
        lines = ["iteration,elapsed_seconds,loss"]
        for i, t, l in zip(self.iterations, self.elapsed_seconds, self.losses):
            lines.append(f"{i},{t!r},{l!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainingCurve":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "iteration,elapsed_seconds,loss":
            raise ValueError("not a training-curve CSV")
        curve = cls()
        for ln in lines[1:]:
            i, t, l = ln.split(",")
            curve.append(int(i), float(t), float(l))
        return curve


def write_curve_csv(curve: TrainingCurve, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(curve.to_csv())


def read_curve_csv(path) -> TrainingCurve:
    return TrainingCurve.from_csv(open(path, "r", encoding="utf-8").read())


@dataclass
class NewtonDiagnostics:
    loss: float
    grad_norm: float
    step_norm: float
    cg_residual_norm: float
    cg_iters: int


def solve_newton_update(grad: np.ndarray, hvp: LinearOperator, n_cg: int,
                        max_step_norm: Optional[float] = None):
    """CG-approximate damped Newton update for a flat gradient.

    Runs exactly `n_cg` CG steps (sooner only on exact convergence) on
    (H + lam I) delta = -grad, where the damping is already part of `hvp`.
    """
    result = cg_solve(hvp, -np.asarray(grad, dtype=np.float64), max_iters=n_cg, tol=0.0)
    step_norm = float(np.linalg.norm(result.x))
    if max_step_norm is not None and step_norm > max_step_norm:
        raise NumericalError(
            f"newton update norm {step_norm:.3e} exceeds the safety cap "
            f"{max_step_norm:.3e}; the step is diverging")
    return result.x, step_norm, result


def newton_step(head: PredictorHead, batch, lam: float, n_cg: int,
                loss_cfg: LossConfig = LossConfig(),
                max_step_norm: Optional[float] = 1e3):
    """One damped Newton-CG update for the head on the given batch."""
    loss_value, grad = heads_mod.loss_and_grad(head, batch, loss_cfg)
    hvp = heads_mod.hvp_operator(head, batch, loss_cfg, lam)
    delta, step_norm, cg = solve_newton_update(grad, hvp, n_cg, max_step_norm)
    diagnostics = NewtonDiagnostics(
        loss=loss_value, grad_norm=float(np.linalg.norm(grad)),
        step_norm=step_norm, cg_residual_norm=cg.residual_norm,
        cg_iters=cg.iters_used)
    return delta, diagnostics


def _record(curve, iteration, elapsed, head, dataset, loss_cfg):
    value = heads_mod.loss(head, dataset, loss_cfg)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss at iteration {iteration}")
    curve.append(iteration, elapsed, value)


def _augmented(dataset, cfg: NewtonConfig, iteration: int):
    if cfg.augment is None:
        return dataset
    aug = cfg.augment
    seed_seq = np.random.SeedSequence([int(cfg.seed), _AUG_STREAM, iteration])
    return heads_mod.augment(dataset, aug.copies, aug.noise_std, aug.dropout_rate,
                             seed=seed_seq)


def train_full_batch(head: PredictorHead, dataset, cfg: NewtonConfig = NewtonConfig(),
                     loss_cfg: LossConfig = LossConfig()):
    """Newton-CG over the whole dataset; augmentation resampled per iteration."""
    lam = 0.0 if cfg.lam is None else cfg.lam
    work = head.copy()
    curve = TrainingCurve()
    elapsed = 0.0
    for it in range(1, cfg.num_iterations + 1):
        t0 = time.perf_counter()
        batch = _augmented(dataset, cfg, it)
        delta, _ = newton_step(work, batch, lam, cfg.n_cg, loss_cfg, cfg.max_step_norm)
        work.add_flat(delta)
        elapsed += time.perf_counter() - t0
        _record(curve, it, elapsed, work, dataset, loss_cfg)
    return work, curve


def _sample_image_batch(dataset, rng: np.random.Generator, batch_images: int):
    ids = dataset.image_id_list()
    if len(ids) <= batch_images:
        return dataset
    chosen = rng.choice(ids, size=batch_images, replace=False)
    return dataset.subset(np.flatnonzero(np.isin(dataset.image_ids, chosen)))


def train_minibatch(head: PredictorHead, dataset, cfg: NewtonConfig = NewtonConfig(),
                    loss_cfg: LossConfig = LossConfig()):
    """Regularized Newton-CG on uniformly sampled 16-image batches.

    Each iteration draws `batch_images` images without replacement (all of
    them when the dataset is smaller) and applies one damped update with
    the configured lam, default 0.5.
    """
    lam = 0.5 if cfg.lam is None else cfg.lam
    work = head.copy()
    curve = TrainingCurve()
    rng = derived_rng(cfg.seed, _SAMPLE_STREAM)
    elapsed = 0.0
    for it in range(1, cfg.num_iterations + 1):
        t0 = time.perf_counter()
        batch = _sample_image_batch(dataset, rng, cfg.batch_images)
        batch = _augmented(batch, cfg, it)
        delta, _ = newton_step(work, batch, lam, cfg.n_cg, loss_cfg, cfg.max_step_norm)
        work.add_flat(delta)
        elapsed += time.perf_counter() - t0
        _record(curve, it, elapsed, work, dataset, loss_cfg)
    return work, curve


def train_sgd(head: PredictorHead, dataset, cfg: SgdConfig = SgdConfig(),
              loss_cfg: LossConfig = LossConfig()):
    """Classical momentum SGD baseline over image-sampled batches.

    Supports both regression losses; image sampling matches the mini-batch
    Newton trainer's contract.
    """
    work = head.copy()
    curve = TrainingCurve()
    rng = derived_rng(cfg.seed, _SAMPLE_STREAM)
    velocity = np.zeros(work.num_params)
    elapsed = 0.0
    for it in range(1, cfg.num_iterations + 1):
        t0 = time.perf_counter()
        batch = _sample_image_batch(dataset, rng, cfg.batch_images)
        _, grad = heads_mod.loss_and_grad(work, batch, loss_cfg)
        if not np.isfinite(grad).all():
            raise NumericalError(f"non-finite gradient at iteration {it}")
        velocity = cfg.momentum * velocity - cfg.learning_rate * grad
        work.add_flat(velocity)
        elapsed += time.perf_counter() - t0
        _record(curve, it, elapsed, work, dataset, loss_cfg)
    return work, curve
