"""MSE minimization with Adam under the fixed regimen: 60 epochs,
batch size 32, 15% evaluation holdout, deterministic under seed.

Per epoch the training windows are reshuffled (seeded), iterated in
batches (the final ragged batch is kept), and each batch applies one
hand-derived backward pass followed by one Adam step. The final-epoch
model is returned by default; keep_best snapshots the best-eval-loss
parameters instead.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import WindowedDataset
from .errors import DivergenceError
from .models import Model, ModelConfig, build_model

__all__ = ["TrainConfig", "AdamState", "TrainHistory", "mse_loss", "adam_step", "train"]

LOSS_DIVERGENCE_LIMIT = 1e6


def mse_loss(pred: np.ndarray, actual: np.ndarray) -> float:
    """Mean of squared differences; 0 iff the vectors are equal."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs actual {actual.shape}")
    if pred.size == 0:
        raise ValueError("mse_loss of empty vectors is undefined")
    d = pred - actual
    return float(np.mean(d * d))


@dataclass
class AdamState:
    """First/second moment estimates mirroring the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    scratch: np.ndarray | None = None

    @classmethod
    def for_params(cls, theta: np.ndarray) -> "AdamState":
        return cls(
            m=np.zeros_like(theta),
            v=np.zeros_like(theta),
            t=0,
            scratch=np.empty_like(theta),
        )


def adam_step(
    theta: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One Adam update, in place on theta and state.

    m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2 ; with bias-corrected
    m_hat = m/(1-b1^t), v_hat = v/(1-b2^t):
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    """
    if theta.shape != grad.shape or state.m.shape != theta.shape:
        raise ValueError(
            f"shape mismatch: theta {theta.shape}, grad {grad.shape}, m {state.m.shape}"
        )
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise DivergenceError(f"non-finite gradient ({bad} of {grad.size} entries)")
    state.t += 1
    t = state.t
    buf = state.scratch
    if buf is None or buf.shape != theta.shape:
        buf = state.scratch = np.empty_like(theta)
    state.m *= beta1
    np.multiply(grad, 1.0 - beta1, out=buf)
    state.m += buf
    state.v *= beta2
    np.square(grad, out=buf)
    buf *= 1.0 - beta2
    state.v += buf
    # buf <- sqrt(v_hat) + eps, then theta -= lr * m_hat / buf
    np.divide(state.v, 1.0 - beta2**t, out=buf)
    np.sqrt(buf, out=buf)
    buf += eps
    np.divide(state.m, buf, out=buf)
    buf *= lr / (1.0 - beta1**t)
    theta -= buf
    return theta, state


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "gru"
    epochs: int = 60
    batch_size: int = 32
    eval_fraction: float = 0.15
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    window: int = 20
    horizon: int = 1
    hidden: int = 50
    activation_mode: str = "paper"
    multi_horizon: bool = False
    shuffle_split: bool = False
    keep_best: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 < self.eval_fraction < 1.0):
            raise ValueError(f"eval_fraction must lie in (0, 1), got {self.eval_fraction}")
        for name in ("learning_rate", "beta1", "beta2", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            arch=self.arch,
            window=self.window,
            horizon=self.horizon,
            hidden=self.hidden,
            activation_mode=self.activation_mode,
            out_dim=self.horizon if self.multi_horizon else 1,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    eval_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    best_epoch: int | None = None

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "eval_loss": self.eval_loss,
            "epoch_seconds": self.epoch_seconds,
            "config": self.config,
            "best_epoch": self.best_epoch,
        }


def _eval_loss(model: Model, ds: WindowedDataset, chunk: int = 512) -> float:
    total = 0.0
    n = len(ds)
    out_dim = model.config.out_dim
    for a in range(0, n, chunk):
        X = ds.inputs[a : a + chunk]
        t = ds.targets[a : a + chunk]
        y = model.forward_batch(X).reshape(X.shape[0], out_dim)
        d = y - t.reshape(X.shape[0], out_dim)
        total += float(np.sum(d * d))
    return total / (n * out_dim)


def train(
    train_ds: WindowedDataset,
    eval_ds: WindowedDataset,
    config: TrainConfig,
) -> tuple[Model, TrainHistory]:
    """Run the full regimen; deterministic for fixed (data, config, seed)."""
    if len(train_ds) == 0:
        raise ValueError("training set is empty")
    if train_ds.window != config.window or train_ds.horizon != config.horizon:
        raise ValueError(
            f"dataset (W={train_ds.window}, H={train_ds.horizon}) does not match "
            f"config (W={config.window}, H={config.horizon})"
        )
    model = build_model(config.model_config())
    state = AdamState.for_params(model.theta)
    # salted so the shuffle stream is distinct from the init streams
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x5AFE)))
    history = TrainHistory(config=config.to_dict())

    n = len(train_ds)
    bs = config.batch_size
    grad = np.empty_like(model.theta)
    best = (np.inf, None)
    # single-threaded BLAS wins for these small GEMMs and keeps parallel
    # sweep workers from oversubscribing the cores
    with threadpool_limits(limits=1):
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            perm = rng.permutation(n)
            inputs = train_ds.inputs[perm]
            targets = train_ds.targets[perm]
            weighted = 0.0
            for a in range(0, n, bs):
                X = inputs[a : a + bs]
                t = targets[a : a + bs]
                loss = model.loss_and_grad_into(X, t, grad)
                if not np.isfinite(loss) or loss > LOSS_DIVERGENCE_LIMIT:
                    raise DivergenceError(
                        f"loss diverged at epoch {epoch}, batch {a // bs}: {loss}"
                    )
                adam_step(
                    model.theta, grad, state,
                    lr=config.learning_rate, beta1=config.beta1,
                    beta2=config.beta2, eps=config.epsilon,
                )
                weighted += loss * X.shape[0]
            history.train_loss.append(weighted / n)
            ev = _eval_loss(model, eval_ds) if len(eval_ds) else float("nan")
            history.eval_loss.append(ev)
            history.epoch_seconds.append(time.perf_counter() - t0)
            if config.keep_best and len(eval_ds) and ev < best[0]:
                best = (ev, model.theta.copy())
                history.best_epoch = epoch

    if config.keep_best and best[1] is not None:
        model.theta[:] = best[1]
    return model, history
