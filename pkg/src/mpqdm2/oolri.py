"""Low-rank adapter initialization from the quantization residual.

The residual ``E = W_hat - Q(W_hat)`` of the bare quantizer is truncated to
rank ``r`` by SVD and split symmetrically:

    L1 = [sqrt(s_i) u_i]_{i<=r},   L2 = [sqrt(s_i) v_i]^T_{i<=r}

so that ``L1 @ L2`` is the best rank-``r`` approximation of ``E``.
All matrices live in the pre-scaled weight domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import ContractError
from .quantizer import LayerQuantState, quantize_columns


@dataclass(frozen=True)
class AdapterInit:
    l1: np.ndarray
    l2: np.ndarray
    rank: int
    residual_norm_before: float
    residual_norm_after: float


def quant_residual(w, state: LayerQuantState) -> np.ndarray:
    """``W_hat - Q(W_hat)`` for the bare quantizer; any adapter in ``state`` is ignored."""
    w_hat = state.scaling.scale_weight(numkit.as_tensor(w, "w"))
    return w_hat - quantize_columns(w_hat, state)


def init_adapter(e, r: int) -> AdapterInit:
    e = numkit.as_tensor(e, "e")
    m, n = e.shape
    if not 1 <= r <= min(m, n):
        raise ContractError(f"rank must be in [1, {min(m, n)}], got {r}")
    dec = numkit.svd(e)
    root = np.sqrt(dec.s[:r])
    l1 = dec.u[:, :r] * root
    l2 = (dec.v[:, :r] * root).T
    before = float(np.linalg.norm(e))
    after = float(np.linalg.norm(e - l1 @ l2))
    return AdapterInit(l1=l1, l2=l2, rank=r, residual_norm_before=before, residual_norm_after=after)


def apply_adapter_init(w, state: LayerQuantState, r: int) -> AdapterInit:
    """Initialize ``state.l1``/``state.l2`` in place from the quantization residual."""
    init = init_adapter(quant_residual(w, state), r)
    state.l1 = init.l1.copy()
    state.l2 = init.l2.copy()
    return init


def init_loss_comparison(w, state: LayerQuantState, r: int) -> tuple[float, float]:
    """True loss ``||W_hat - Q(W_hat + L1 L2)||_F^2`` at zero init and at SVD init."""
    w_hat = state.scaling.scale_weight(numkit.as_tensor(w, "w"))
    e = w_hat - quantize_columns(w_hat, state)
    zero = float(np.sum(e**2))
    if not np.any(e):
        return zero, zero
    init = init_adapter(e, r)
    q = quantize_columns(w_hat + init.l1 @ init.l2, state)
    return zero, float(np.sum((w_hat - q) ** 2))


# ---------------------------------------------------------------------------
# Numerical checks of f(X) = ||E - X||_F^2
# ---------------------------------------------------------------------------


@dataclass
class ObjectiveReport:
    trials: int
    max_convexity_gap: float = 0.0  # max of lhs - rhs (<= tol means pass)
    max_lipschitz_error: float = 0.0
    max_gradient_error: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def _f(e, x):
    d = e - x
    return float(np.sum(d * d))


def _grad(e, x):
    return -2.0 * (e - x)


def verify_objective_properties(e, rng: np.random.Generator, trials: int = 100,
                                fd_step: float = 1e-6, directions: int = 3) -> ObjectiveReport:
    """Check convexity, the L=2 gradient-Lipschitz identity and the gradient formula.

    Each trial draws low-rank ``X1``, ``X2`` and ``lambda``.  Violations are
    recorded with the offending triple.
    """
    e = numkit.as_tensor(e, "e")
    m, n = e.shape
    scale = max(1.0, float(np.linalg.norm(e)))
    rep = ObjectiveReport(trials=trials)
    for i in range(trials):
        r = int(rng.integers(1, min(m, n) + 1))
        x1 = rng.normal(size=(m, r)) @ rng.normal(size=(r, n)) * scale / np.sqrt(m * n)
        x2 = rng.normal(size=(m, r)) @ rng.normal(size=(r, n)) * scale / np.sqrt(m * n)
        lam = float(rng.uniform())

        lhs = _f(e, lam * x1 + (1 - lam) * x2)
        rhs = lam * _f(e, x1) + (1 - lam) * _f(e, x2)
        gap = (lhs - rhs) / max(1.0, abs(rhs))
        rep.max_convexity_gap = max(rep.max_convexity_gap, gap)
        if gap > 1e-9:
            rep.failures.append(("convexity", i, x1, x2, lam))

        gdiff = float(np.linalg.norm(_grad(e, x1) - _grad(e, x2)))
        xdiff = float(np.linalg.norm(x1 - x2))
        lip = abs(gdiff - 2.0 * xdiff) / max(1.0, 2.0 * xdiff)
        rep.max_lipschitz_error = max(rep.max_lipschitz_error, lip)
        if lip > 1e-9:
            rep.failures.append(("lipschitz", i, x1, x2, lam))

        g = _grad(e, x1)
        for _ in range(directions):
            d = rng.normal(size=(m, n))
            d /= np.linalg.norm(d)
            fd = (_f(e, x1 + fd_step * d) - _f(e, x1 - fd_step * d)) / (2 * fd_step)
            an = float(np.sum(g * d))
            err = abs(fd - an) / max(abs(an), 1e-3 * float(np.linalg.norm(g)), 1e-12)
            rep.max_gradient_error = max(rep.max_gradient_error, err)
            if err > 1e-5:
                rep.failures.append(("gradient", i, x1, x2, lam))
    return rep
