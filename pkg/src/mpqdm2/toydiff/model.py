"""Tiny MLP noise predictor for 2-D data and its full-precision training."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .. import numkit
from ..errors import ContractError, NumericalError
from .data import sample_data

EMB_DIM = 16
HIDDEN = 64
DEPTH = 4  # linear layers


@dataclass(frozen=True)
class Schedule:
    betas: np.ndarray

    @classmethod
    def linear(cls, steps: int = 10, beta_start: float = 1e-4, beta_end: float = 0.2) -> "Schedule":
        if steps < 1:
            raise ContractError("schedule needs at least one step")
        return cls(np.linspace(beta_start, beta_end, steps))

    @property
    def steps(self) -> int:
        return len(self.betas)

    @property
    def alpha_bar(self) -> np.ndarray:
        """Index 0 is the clean signal (1.0); index t in [1, T] after t steps."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])


def timestep_embedding(t: int, dim: int = EMB_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def silu(a):
    return a / (1.0 + np.exp(-a))


def silu_grad(a):
    sig = 1.0 / (1.0 + np.exp(-a))
    return sig * (1.0 + a * (1.0 - sig))


@dataclass
class ToyDiffusionModel:
    """``[x, emb(t)] -> 64 -> 64 -> 64 -> 2`` with SiLU; predicts the added noise."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    schedule: Schedule
    dataset: str = "two-moons"
    emb_dim: int = EMB_DIM

    @property
    def timesteps(self) -> int:
        return self.schedule.steps

    @property
    def data_dim(self) -> int:
        return self.weights[-1].shape[0]

    def embed_input(self, x, t: int) -> np.ndarray:
        if not 1 <= t <= self.timesteps:
            raise ContractError(f"timestep {t} outside [1, {self.timesteps}]")
        x = np.asarray(x, dtype=np.float64)
        emb = np.broadcast_to(timestep_embedding(t, self.emb_dim), (x.shape[0], self.emb_dim))
        return np.concatenate([x, emb], axis=1)

    def forward_trace(self, x, t: int):
        """Returns (output, layer inputs, pre-activations)."""
        h = self.embed_input(x, t)
        inputs, pre = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = h @ w.T + b
            pre.append(a)
            h = silu(a) if i < len(self.weights) - 1 else a
        return h, inputs, pre

    def predict(self, x, t: int):
        """Noise estimate and final-block features (input of the last layer)."""
        out, inputs, _ = self.forward_trace(x, t)
        return out, inputs[-1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (*self.weights, *self.biases, self.schedule.betas):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "ToyDiffusionModel":
        return ToyDiffusionModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                                 self.schedule, self.dataset, self.emb_dim)


def init_model(rng: np.random.Generator, schedule: Schedule, dataset: str, data_dim: int = 2,
               hidden: int = HIDDEN, depth: int = DEPTH) -> ToyDiffusionModel:
    sizes = [data_dim + EMB_DIM] + [hidden] * (depth - 1) + [data_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(size=(fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    weights[-1] *= 0.1
    return ToyDiffusionModel(weights, biases, schedule, dataset)


def noisy_batch(schedule: Schedule, x0, t, rng):
    """``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` scalar or per-row."""
    ab = schedule.alpha_bar[np.asarray(t)]
    if np.ndim(ab):
        ab = ab[:, None]
    eps = rng.normal(size=x0.shape)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def _loss_and_grads(model: ToyDiffusionModel, x0, rng):
    """Noise-prediction MSE with one timestep per distinct group of rows."""
    T = model.timesteps
    ts = rng.integers(1, T + 1, x0.shape[0])
    xt, eps = noisy_batch(model.schedule, x0, ts, rng)
    gw = [np.zeros_like(w) for w in model.weights]
    gb = [np.zeros_like(b) for b in model.biases]
    total = 0.0
    n = x0.shape[0] * x0.shape[1]
    for t in np.unique(ts):
        rows = ts == t
        out, inputs, pre = model.forward_trace(xt[rows], int(t))
        diff = out - eps[rows]
        total += float(np.sum(diff * diff))
        d = 2.0 * diff / n
        for i in range(len(model.weights) - 1, -1, -1):
            gw[i] += d.T @ inputs[i]
            gb[i] += d.sum(axis=0)
            if i:
                d = (d @ model.weights[i]) * silu_grad(pre[i - 1])
    return total / n, gw, gb


def denoising_loss(model: ToyDiffusionModel, x0, rng) -> float:
    return _loss_and_grads(model, x0, rng)[0]


@dataclass
class PretrainResult:
    model: ToyDiffusionModel
    losses: list[float] = field(default_factory=list)


def pretrain_fp(dataset: str, seed: int, iterations: int = 3000, batch: int = 256, lr: float = 3e-3,
                schedule: Schedule | None = None) -> PretrainResult:
    """Adam training of the noise predictor; raises on a non-finite loss."""
    rng = numkit.make_rng(seed)
    init_rng, data_rng, noise_rng = numkit.split_rng(rng, 3)
    model = init_model(init_rng, schedule or Schedule.linear(), dataset)
    params = model.weights + model.biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    losses = []
    for it in range(iterations):
        x0 = sample_data(dataset, batch, data_rng)
        loss, gw, gb = _loss_and_grads(model, x0, noise_rng)
        if not np.isfinite(loss):
            raise NumericalError(f"pretraining diverged at iteration {it}")
        losses.append(loss)
        step = lr * 0.5 * (1.0 + np.cos(np.pi * it / iterations))
        for i, (p, g) in enumerate(zip(params, gw + gb)):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mh = m[i] / (1 - b1 ** (it + 1))
            vh = v[i] / (1 - b2 ** (it + 1))
            p -= step * mh / (np.sqrt(vh) + eps)
    return PretrainResult(model, losses)
