"""Deterministic DDIM sampling, sample-quality metric and temporal similarity maps."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import numkit
from ..errors import ContractError
from .model import Schedule

Predictor = Callable[[np.ndarray, int], tuple[np.ndarray, np.ndarray]]


@dataclass
class Trajectory:
    timesteps: list[int]  # model timesteps visited, descending
    states: list[np.ndarray]  # x_T, ..., x_0 (len(timesteps) + 1 entries)
    features: list[np.ndarray]  # final-block features at each visited timestep

    @property
    def samples(self) -> np.ndarray:
        return self.states[-1]


def sampling_timesteps(total: int, steps: int) -> list[int]:
    if not 1 <= steps <= total:
        raise ContractError(f"steps must be in [1, {total}], got {steps}")
    ts = np.unique(np.round(np.linspace(1, total, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def ddim_sample(predict: Predictor, schedule: Schedule, n: int, steps: int | None = None, eta: float = 0.0,
                seed: int = 0, x_init=None, dim: int = 2) -> Trajectory:
    """Sample ``n`` points starting from ``x_T ~ N(0, I)`` (or ``x_init``)."""
    if not 0.0 <= eta <= 1.0:
        raise ContractError(f"eta must be in [0, 1], got {eta}")
    steps = schedule.steps if steps is None else steps
    ts = sampling_timesteps(schedule.steps, steps)
    rng = numkit.make_rng(seed)
    x = rng.normal(size=(n, dim)) if x_init is None else np.array(x_init, dtype=np.float64)
    ab = schedule.alpha_bar
    states, feats = [x.copy()], []
    for i, t in enumerate(ts):
        prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps, f = predict(x, t)
        feats.append(np.array(f, copy=True))
        x0 = (x - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t])
        sigma = eta * np.sqrt((1.0 - ab[prev]) / (1.0 - ab[t]) * (1.0 - ab[t] / ab[prev]))
        x = np.sqrt(ab[prev]) * x0 + np.sqrt(max(1.0 - ab[prev] - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * rng.normal(size=x.shape)
        states.append(x.copy())
    return Trajectory(ts, states, feats)


def energy_distance(a, b) -> float:
    """``2 E|A-B| - E|A-A'| - E|B-B'|`` (within-set terms exclude the diagonal)."""
    a = numkit.as_tensor(a, "a")
    b = numkit.as_tensor(b, "b")

    def mean_dist(p, q, same):
        # coordinate-wise differences; the Gram expansion loses digits here
        d2 = np.zeros((len(p), len(q)))
        for k in range(p.shape[1]):
            d2 += (p[:, k, None] - q[None, :, k]) ** 2
        d = np.sqrt(d2)
        if same:
            k = len(p)
            return float(d.sum() / (k * (k - 1)))
        return float(d.mean())

    return 2.0 * mean_dist(a, b, False) - mean_dist(a, a, True) - mean_dist(b, b, True)


def temporal_similarity_map(trajectory) -> np.ndarray:
    """Cosine similarity between flattened features of every pair of steps."""
    feats = trajectory.features if isinstance(trajectory, Trajectory) else trajectory
    flat = np.stack([np.asarray(f, dtype=np.float64).ravel() for f in feats])
    norms = np.linalg.norm(flat, axis=1)
    zero = norms == 0
    if np.any(zero):
        warnings.warn(f"zero-norm features at steps {np.flatnonzero(zero).tolist()}; similarities set to 0")
    unit = flat / np.where(zero, 1.0, norms)[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    diag = np.where(zero, 0.0, 1.0)
    np.fill_diagonal(sim, diag)
    return sim
