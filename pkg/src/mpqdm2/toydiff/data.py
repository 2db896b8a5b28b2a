"""Synthetic 2-D datasets, standardized to roughly zero mean and unit variance."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError

TWO_MOONS = "two-moons"
GMM8 = "gaussian-mixture-8"
DATASETS = (TWO_MOONS, GMM8)

# fixed affine maps so that both datasets have approximately unit variance
_MOONS_SHIFT = np.array([0.5, 0.25])
_MOONS_SCALE = np.array([0.87, 0.51])
_GMM_RADIUS = 1.35
_GMM_STD = 0.12


def sample_data(dataset: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if dataset == TWO_MOONS:
        theta = rng.uniform(0.0, np.pi, n)
        upper = rng.uniform(size=n) < 0.5
        x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
        pts = np.stack([x, y], axis=1) + 0.05 * rng.normal(size=(n, 2))
        return (pts - _MOONS_SHIFT) / _MOONS_SCALE
    if dataset == GMM8:
        k = rng.integers(0, 8, n)
        ang = k * (np.pi / 4.0)
        centers = _GMM_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return centers + _GMM_STD * rng.normal(size=(n, 2))
    raise ContractError(f"unknown dataset {dataset!r}; expected one of {DATASETS}")
