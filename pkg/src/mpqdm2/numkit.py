"""Small dense linear-algebra and statistics kernel.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2
(row-major).  Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import ContractError, FormatError, SvdConvergenceError

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12

_T2D_MAGIC = b"T2D1"


def as_tensor(a, name: str = "tensor") -> np.ndarray:
    """Return ``a`` as a C-contiguous finite float64 matrix."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# SVD (one-sided Jacobi, round-robin pair ordering)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # m x p
    s: np.ndarray  # p, descending
    v: np.ndarray  # n x p

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        r = len(self.s) if rank is None else rank
        return (self.u[:, :r] * self.s[:r]) @ self.v[:, :r].T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Rounds of disjoint column pairs covering every pair once (circle method)."""
    idx = list(range(n))
    if n % 2:
        idx.append(-1)
    k = len(idx)
    rounds = []
    for _ in range(k - 1):
        p, q = [], []
        for i in range(k // 2):
            a, b = idx[i], idx[k - 1 - i]
            if a >= 0 and b >= 0:
                p.append(min(a, b))
                q.append(max(a, b))
        if p:
            rounds.append((np.array(p), np.array(q)))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged ``good`` with an orthonormal completion."""
    m, p = u.shape
    basis = [u[:, j] for j in range(p) if good[j]]
    out = u.copy()
    candidates = iter(np.eye(m))
    for j in range(p):
        if good[j]:
            continue
        while True:
            e = next(candidates).copy()
            for b in basis:
                e -= (b @ e) * b
            for b in basis:  # second pass for stability
                e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 1e-8:
                e /= nrm
                break
        basis.append(e)
        out[:, j] = e
    return out


def _jacobi_tall(a: np.ndarray) -> SvdResult:
    m, n = a.shape
    work = a.copy()
    v = np.eye(n)
    rounds = _round_robin(n)
    # columns whose norm is at rounding-noise level relative to ``a`` carry no
    # information; rotating them against each other never converges
    floor = (max(m, n) * np.finfo(float).eps) ** 2 * float(np.sum(a * a))
    off = 0.0
    for sweep in range(SVD_MAX_SWEEPS):
        off = 0.0
        for p, q in rounds:
            wp, wq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            denom = np.sqrt(alpha * beta)
            active = (gamma != 0.0) & (np.minimum(alpha, beta) > floor)
            if not np.any(active):
                continue
            rel = np.zeros_like(gamma)
            rel[active] = np.abs(gamma[active]) / denom[active]
            off = max(off, float(rel.max()))
            active &= rel > SVD_TOL
            if not np.any(active):
                continue
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            work[:, p], work[:, q] = c * wp - s * wq, s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if off <= SVD_TOL:
            break
    else:
        raise SvdConvergenceError(off, SVD_MAX_SWEEPS)

    sig = np.linalg.norm(work, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig = sig[order]
    work = work[:, order]
    v = v[:, order]
    scale = sig[0] if n and sig[0] > 0 else 0.0
    good = sig > max(scale * 1e-14, np.finfo(float).tiny)
    u = np.zeros_like(work)
    u[:, good] = work[:, good] / sig[good]
    if not np.all(good):
        u = _complete_basis(u, good)
        sig = np.where(good, sig, 0.0)
    return SvdResult(u=u, s=sig, v=v)


def svd(a) -> SvdResult:
    """Thin SVD ``a = u @ diag(s) @ v.T`` with ``s`` descending.

    Raises :class:`SvdConvergenceError` if the off-diagonal measure is still
    above tolerance after ``SVD_MAX_SWEEPS`` sweeps.
    """
    a = as_tensor(a, "a")
    m, n = a.shape
    if m >= n:
        return _jacobi_tall(a)
    r = _jacobi_tall(a.T.copy())
    return SvdResult(u=r.v, s=r.s, v=r.u)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def kurtosis(v) -> float:
    """Population kurtosis E[(v-mu)^4] / sigma^4.

    Zero-variance input returns 0.0; callers treat such channels as
    degenerate (see :func:`is_degenerate`).
    """
    x = np.asarray(v, dtype=np.float64).ravel()
    if x.size < 2:
        raise ContractError("kurtosis needs at least 2 elements")
    d = x - x.mean()
    var = np.mean(d * d)
    if is_degenerate(x, var):
        return 0.0
    return float(np.mean(d**4) / (var * var))


def is_degenerate(v, var: float | None = None) -> bool:
    x = np.asarray(v, dtype=np.float64).ravel()
    if var is None:
        d = x - x.mean()
        var = float(np.mean(d * d))
    scale = float(np.max(np.abs(x))) if x.size else 0.0
    return var <= (scale * 1e-12) ** 2


def softmax(v, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ContractError(f"softmax temperature must be > 0, got {tau}")
    z = np.asarray(v, dtype=np.float64) / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(v, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ContractError(f"softmax temperature must be > 0, got {tau}")
    z = np.asarray(v, dtype=np.float64) / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def kl_divergence(p, q) -> float:
    """sum p_i ln(p_i / q_i) with the convention 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractError(f"kl_divergence shape mismatch {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ContractError("kl_divergence needs non-negative entries")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ContractError("kl_divergence inputs must sum to 1")
    mask = p > 0
    if np.any(q[mask] == 0):
        raise ContractError("kl_divergence undefined: q_i == 0 where p_i > 0")
    return max(float(np.sum(p[mask] * np.log(p[mask] / q[mask]))), 0.0)


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator from a 64-bit seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child generators; the parent stream is not advanced."""
    return [np.random.Generator(np.random.Philox(ss)) for ss in rng.bit_generator.seed_seq.spawn(n)]


# ---------------------------------------------------------------------------
# T2D1 container
# ---------------------------------------------------------------------------


def tensor_to_bytes(a) -> bytes:
    a = as_tensor(a)
    rows, cols = a.shape
    return _T2D_MAGIC + struct.pack("<II", rows, cols) + a.astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one T2D1 block at ``offset``; returns (tensor, next offset)."""
    if buf[offset : offset + 4] != _T2D_MAGIC:
        raise FormatError("bad T2D1 magic")
    if len(buf) < offset + 12:
        raise FormatError("truncated T2D1 header")
    rows, cols = struct.unpack_from("<II", buf, offset + 4)
    start = offset + 12
    end = start + 8 * rows * cols
    if len(buf) < end:
        raise FormatError("truncated T2D1 payload")
    a = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=start)
    return a.reshape(rows, cols).astype(np.float64), end


def write_tensor(fh: BinaryIO, a) -> None:
    fh.write(tensor_to_bytes(a))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(12)
    if len(head) < 12 or head[:4] != _T2D_MAGIC:
        raise FormatError("bad or truncated T2D1 header")
    rows, cols = struct.unpack("<II", head[4:])
    payload = fh.read(8 * rows * cols)
    a, _ = tensor_from_bytes(head + payload)
    return a
