"""Memory-based temporal relation distillation.

Full-precision features are cached in one bounded FIFO queue per timestep.
A reference bank ``F_ref`` (``R = T*k`` rows) sampled from all queues turns a
feature ``x`` into a relation distribution ``softmax(F_ref @ x / tau)``; the
distillation loss is ``KL(r_fp || r_q)`` averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .errors import ColdMemoryError, ContractError

KL = "kl"
MSE = "mse"


def sample_without_replacement(rng: np.random.Generator, population: int, n: int) -> np.ndarray:
    """Partial Fisher-Yates: ``n`` distinct indices from ``range(population)``."""
    if not 0 <= n <= population:
        raise ContractError(f"cannot draw {n} of {population} without replacement")
    idx = np.arange(population)
    for i in range(n):
        j = int(rng.integers(i, population))
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:n].copy()


class TemporalMemory:
    """``T`` ring-buffer FIFO queues of ``capacity`` feature vectors of size ``dim``.

    Timesteps are 1-based.  Only copies of full-precision features are stored.
    """

    def __init__(self, timesteps: int, capacity: int, dim: int):
        if timesteps < 1 or capacity < 1 or dim < 1:
            raise ContractError("timesteps, capacity and dim must be positive")
        self.timesteps = timesteps
        self.capacity = capacity
        self.dim = dim
        self._buf = np.zeros((timesteps, capacity, dim))
        self._count = np.zeros(timesteps, dtype=np.int64)
        self._head = np.zeros(timesteps, dtype=np.int64)  # slot of the oldest entry

    def _check_t(self, t: int) -> int:
        if not 1 <= t <= self.timesteps:
            raise ContractError(f"timestep {t} outside [1, {self.timesteps}]")
        return t - 1

    def __len__(self) -> int:
        return int(self._count.sum())

    def length(self, t: int) -> int:
        return int(self._count[self._check_t(t)])

    def append(self, t: int, rows) -> None:
        i = self._check_t(t)
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if rows.shape[1] != self.dim:
            raise ContractError(f"feature dim {rows.shape[1]} != memory dim {self.dim}")
        for row in rows:
            if self._count[i] < self.capacity:
                slot = (self._head[i] + self._count[i]) % self.capacity
                self._count[i] += 1
            else:
                slot = self._head[i]
                self._head[i] = (self._head[i] + 1) % self.capacity
            self._buf[i, slot] = row

    def contents(self, t: int) -> np.ndarray:
        """Queue ``t`` oldest-first."""
        i = self._check_t(t)
        slots = (self._head[i] + np.arange(self._count[i])) % self.capacity
        return self._buf[i, slots].copy()

    @property
    def warm(self) -> bool:
        return bool(np.all(self._count > 0))

    @property
    def fill_fraction(self) -> float:
        return float(self._count.sum()) / (self.timesteps * self.capacity)

    def stats(self) -> list[tuple[int, int, float, float]]:
        """(t, length, mean, std) of stored features for each queue."""
        out = []
        for t in range(1, self.timesteps + 1):
            c = self.contents(t)
            out.append((t, len(c), float(c.mean()) if len(c) else 0.0, float(c.std()) if len(c) else 0.0))
        return out


def push_features(mem: TemporalMemory, t: int, x_fp, n: int, rng: np.random.Generator) -> np.ndarray:
    """Append ``n`` rows of ``x_fp`` (sampled without replacement) to queue ``t``.

    Returns the chosen row indices; ``n == rows`` keeps the input order.
    """
    mem._check_t(t)
    x_fp = numkit.as_tensor(x_fp, "x_fp")
    rows = x_fp.shape[0]
    if not 1 <= n <= rows:
        raise ContractError(f"push count {n} must be in [1, {rows}]")
    idx = np.arange(rows) if n == rows else sample_without_replacement(rng, rows, n)
    mem.append(t, x_fp[idx])
    return idx


@dataclass(frozen=True)
class ReferenceMatrix:
    f_ref: np.ndarray  # R x d
    k: int
    provenance: tuple[tuple[int, int], ...]  # (timestep, queue slot) per row

    @property
    def rows(self) -> int:
        return self.f_ref.shape[0]


def build_reference(mem: TemporalMemory, k: int, rng: np.random.Generator) -> ReferenceMatrix:
    """Draw ``k`` rows from every queue (timestep-major order).

    Without replacement when the queue holds at least ``k`` vectors, with
    replacement otherwise.  An empty queue raises :class:`ColdMemoryError`.
    """
    if k < 1:
        raise ContractError("reference sample size k must be >= 1")
    blocks, prov = [], []
    for t in range(1, mem.timesteps + 1):
        size = mem.length(t)
        if size == 0:
            raise ColdMemoryError(t)
        if size >= k:
            slots = sample_without_replacement(rng, size, k)
        else:
            slots = rng.integers(0, size, k)
        blocks.append(mem.contents(t)[slots])
        prov.extend((t, int(s)) for s in slots)
    return ReferenceMatrix(np.concatenate(blocks, axis=0), k, tuple(prov))


def _bank(f_ref) -> np.ndarray:
    return f_ref.f_ref if isinstance(f_ref, ReferenceMatrix) else numkit.as_tensor(f_ref, "f_ref")


def relation_distribution(f_ref, x, tau: float) -> np.ndarray:
    """``softmax(F_ref @ x / tau)`` for a vector (-> R) or a batch (-> B x R)."""
    bank = _bank(f_ref)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != bank.shape[1]:
        raise ContractError(f"feature dim {x.shape[-1]} != reference dim {bank.shape[1]}")
    return numkit.softmax(x @ bank.T, tau)


def _pair(x_fp, x_q):
    a = np.atleast_2d(np.asarray(x_fp, dtype=np.float64))
    b = np.atleast_2d(np.asarray(x_q, dtype=np.float64))
    if a.shape != b.shape:
        raise ContractError(f"FP batch {a.shape} and quantized batch {b.shape} are misaligned")
    return a, b


def _kl_rows(bank, a, b, tau):
    """Row-wise KL from log-probabilities, so underflowing entries stay finite."""
    lp = numkit.log_softmax(a @ bank.T, tau)
    lq = numkit.log_softmax(b @ bank.T, tau)
    return np.maximum(np.sum(np.exp(lp) * (lp - lq), axis=1), 0.0)


def mtrd_loss(f_ref, x_fp_batch, x_q_batch, tau: float, metric: str = KL) -> float:
    """Mean over the batch of KL(r_fp || r_q) (or the MSE between them)."""
    a, b = _pair(x_fp_batch, x_q_batch)
    if metric == KL:
        bank = _bank(f_ref)
        if a.shape[1] != bank.shape[1]:
            raise ContractError(f"feature dim {a.shape[1]} != reference dim {bank.shape[1]}")
        return float(np.mean(_kl_rows(bank, a, b, tau)))
    p = relation_distribution(f_ref, a, tau)
    q = relation_distribution(f_ref, b, tau)
    if metric == MSE:
        return float(np.mean((p - q) ** 2))
    raise ContractError(f"unknown loss metric {metric!r}")


def mtrd_gradient(f_ref, x_fp, x_q, tau: float, metric: str = KL) -> np.ndarray:
    """Gradient of :func:`mtrd_loss` with respect to the quantized features."""
    bank = _bank(f_ref)
    single = np.asarray(x_q).ndim == 1
    a, b = _pair(x_fp, x_q)
    p = relation_distribution(bank, a, tau)
    q = relation_distribution(bank, b, tau)
    bsz = a.shape[0]
    if metric == KL:
        dz = (q - p) / bsz
    elif metric == MSE:
        g = -2.0 * (p - q) / (bsz * p.shape[1])
        dz = q * (g - np.sum(g * q, axis=1, keepdims=True))
    else:
        raise ContractError(f"unknown loss metric {metric!r}")
    grad = dz @ bank / tau
    return grad[0] if single else grad


def total_loss(align: float, mtrd: float, alpha: float = 1.0) -> float:
    if alpha < 0:
        raise ContractError("alpha must be >= 0")
    return align + alpha * mtrd
