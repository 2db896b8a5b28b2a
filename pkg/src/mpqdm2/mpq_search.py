"""Group-wise channel bit allocation with per-group quantizer mode selection.

Channels (input channels of a weight matrix) are ranked by kurtosis, split
into ``g`` contiguous groups, and every group receives one bit width from
``{n-1, n, n+1}`` subject to ``sum(bits) == C * n``.  The assignment that
minimizes the activation-aware output distortion

    || X W^T - Q(X_hat) Q(W_hat)^T ||^2

is found by exhaustive enumeration with budget pruning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkit
from .errors import ContractError
from .quantizer import (
    JOINT,
    SEPARATE,
    ChannelScaling,
    ChannelSpec,
    ResidualQuantizer,
    UniformQuantizer,
    compute_prescale,
    fit_step_sizes,
    fit_uniform,
    quantize_residual,
    quantize_uniform,
)


@dataclass
class ChannelGroup:
    channels: tuple[int, ...]
    kurtosis: float
    bits: int | None = None
    mode: str = JOINT


@dataclass
class AllocationResult:
    bits: np.ndarray
    modes: list[str]
    objective: float
    baseline: float
    groups: list[ChannelGroup] = field(default_factory=list)
    specs: list[ChannelSpec] = field(default_factory=list)
    scaling: ChannelScaling | None = None
    surplus_channels: tuple[int, ...] = ()

    def histogram(self) -> dict[int, int]:
        vals, counts = np.unique(self.bits, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}

    def mode_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for m in self.modes:
            out[m] = out.get(m, 0) + 1
        return out


def default_groups(c: int) -> int:
    return max(1, c // 10)


def rank_channels(w) -> list[tuple[int, float]]:
    """(channel, kurtosis) pairs, descending kurtosis, ties by index."""
    w = numkit.as_tensor(w, "w")
    kappas = [numkit.kurtosis(w[:, j]) if w.shape[0] >= 2 else 0.0 for j in range(w.shape[1])]
    order = sorted(range(len(kappas)), key=lambda j: (-kappas[j], j))
    return [(j, kappas[j]) for j in order]


def partition_groups(ranked: Sequence[tuple[int, float]], g: int) -> list[ChannelGroup]:
    c = len(ranked)
    if not 1 <= g <= c:
        raise ContractError(f"group count must be in [1, {c}], got {g}")
    base, extra = divmod(c, g)
    groups, start = [], 0
    for i in range(g):
        size = base + (1 if i < extra else 0)
        chunk = ranked[start : start + size]
        start += size
        groups.append(
            ChannelGroup(
                channels=tuple(j for j, _ in chunk),
                kurtosis=float(np.mean([k for _, k in chunk])),
            )
        )
    return groups


# ---------------------------------------------------------------------------
# Per-channel quantizer cache
# ---------------------------------------------------------------------------


def fit_channel(col, base_bits: int, tiers: int, mode: str):
    """Fitted quantizer for one pre-scaled weight column at a given tier."""
    if tiers == 0:
        return fit_uniform(col, base_bits)
    template = ResidualQuantizer(
        UniformQuantizer.from_step(base_bits, 1.0, 0), 1.0, 1.0 if tiers == 2 else None, mode
    )
    return fit_step_sizes(col, template)


def apply_channel(col, q, tiers: int):
    if tiers == 0:
        return quantize_uniform(col, q)
    return quantize_residual(col, q, tiers)


class _LayerProblem:
    """Shared state for evaluating Eq.-10 style objectives on one layer."""

    def __init__(self, w, x, base_bits: int, act_bits: int, prescale: bool = True):
        self.w = numkit.as_tensor(w, "w")
        self.x = numkit.as_tensor(x, "x_calib")
        if self.w.shape[1] != self.x.shape[1]:
            raise ContractError("weight/activation channel mismatch")
        self.scaling = compute_prescale(self.w, self.x) if prescale else ChannelScaling.identity(self.w.shape[1])
        self.w_hat = self.scaling.scale_weight(self.w)
        x_hat = self.scaling.scale_activations(self.x)
        self.act_quant = fit_uniform(x_hat, act_bits)
        self.xq = quantize_uniform(x_hat, self.act_quant)
        self.y = self.x @ self.w.T
        self.base_bits = base_bits
        self._fits: dict[tuple[int, int, str], tuple[object, np.ndarray]] = {}

    def channel(self, j: int, tiers: int, mode: str):
        key = (j, tiers, mode if tiers else JOINT)
        if key not in self._fits:
            col = self.w_hat[:, j]
            q = fit_channel(col, self.base_bits, tiers, mode)
            self._fits[key] = (q, apply_channel(col, q, tiers))
        return self._fits[key]

    def group_weight(self, chans, tiers: int, mode: str) -> np.ndarray:
        return np.stack([self.channel(j, tiers, mode)[1] for j in chans], axis=1)

    def group_mode(self, chans, tiers: int) -> str:
        if tiers == 0:
            return JOINT
        idx = list(chans)
        target = self.x[:, idx] @ self.w[:, idx].T
        errs = {}
        for mode in (JOINT, SEPARATE):
            out = self.xq[:, idx] @ self.group_weight(idx, tiers, mode).T
            errs[mode] = float(np.sum((target - out) ** 2))
        return _pick_mode(errs[JOINT], errs[SEPARATE], float(np.sum(target**2)))

    def objective(self, wq: np.ndarray) -> float:
        return float(np.sum((self.y - self.xq @ wq.T) ** 2))


def _pick_mode(err_joint: float, err_sep: float, scale: float) -> str:
    tol = 1e-12 * max(scale, 1e-300)
    return SEPARATE if err_sep < err_joint - tol else JOINT


def select_op_mode(w_group, x_calib, bits: int, base_bits: int, act_bits: int = 4) -> str:
    """Pick joint/separate optimization for a channel group by output error.

    ``w_group`` holds the group's (already pre-scaled) weight columns and
    ``x_calib`` the matching activation columns.  Ties (within 1e-12
    relative) go to ``joint``.
    """
    w_group = numkit.as_tensor(w_group, "w_group")
    if w_group.shape[1] == 0:
        raise ContractError("empty channel group")
    prob = _LayerProblem(w_group, x_calib, base_bits, act_bits, prescale=False)
    return prob.group_mode(range(w_group.shape[1]), bits - base_bits)


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


def _enumerate(sizes: list[int], choices: tuple[int, ...], target: int):
    """Yield tier-offset tuples (one per group) with sum(size*offset) == target.

    Lexicographic over ``choices`` with suffix-bound pruning.
    """
    g = len(sizes)
    lo_c, hi_c = min(choices), max(choices)
    suffix = np.zeros(g + 1, dtype=np.int64)
    for i in range(g - 1, -1, -1):
        suffix[i] = suffix[i + 1] + sizes[i]
    partial = [0] * g

    def rec(i: int, acc: int):
        if i == g:
            if acc == target:
                yield tuple(partial)
            return
        for c in choices:
            nxt = acc + sizes[i] * c
            rem = suffix[i + 1]
            if nxt + lo_c * rem > target or nxt + hi_c * rem < target:
                continue
            partial[i] = c
            yield from rec(i + 1, nxt)

    yield from rec(0, 0)


def search_allocation(w, x_calib, n: int, g: int | None = None, surplus_2bit: float = 0.0,
                      act_bits: int = 4, prescale: bool = True) -> AllocationResult:
    """Exhaustive group-wise search over {n-1, n, n+1} under the bit budget."""
    if n < 2:
        raise ContractError(f"base bit width n must be >= 2, got {n}")
    if not 0.0 <= surplus_2bit < 1.0:
        raise ContractError("surplus fraction must be in [0, 1)")
    prob = _LayerProblem(w, x_calib, n - 1, act_bits, prescale=prescale)
    c = prob.w.shape[1]
    g = default_groups(c) if g is None else g
    ranked = rank_channels(prob.w_hat)
    kappa = dict(ranked)
    groups = partition_groups(ranked, g)
    sizes = [len(gr.channels) for gr in groups]

    # per-(group, tier) contributions with the locally selected mode
    contrib: dict[tuple[int, int], np.ndarray] = {}
    modes: dict[tuple[int, int], str] = {}
    for gi, gr in enumerate(groups):
        idx = list(gr.channels)
        for t in (0, 1, 2):
            mode = prob.group_mode(idx, t)
            modes[gi, t] = mode
            contrib[gi, t] = prob.xq[:, idx] @ prob.group_weight(idx, t, mode).T

    y_norm = float(np.sum(prob.y**2))
    tol = 1e-12 * max(y_norm, 1e-300)

    def score(offsets):
        acc = np.zeros_like(prob.y)
        for gi, off in enumerate(offsets):
            acc += contrib[gi, off + 1]
        return float(np.sum((prob.y - acc) ** 2))

    best, best_obj, best_dev = None, math.inf, math.inf
    for offsets in _enumerate(sizes, (-1, 0, 1), 0):
        obj = score(offsets)
        dev = sum(s * abs(o) for s, o in zip(sizes, offsets))
        if obj < best_obj - tol or (abs(obj - best_obj) <= tol and dev < best_dev):
            best, best_obj, best_dev = offsets, obj, dev
    if best is None:  # the all-n assignment is always feasible
        raise AssertionError("no feasible bit assignment")
    baseline = score((0,) * g)

    bits = np.full(c, n, dtype=np.int64)
    chan_modes = [JOINT] * c
    for gi, gr in enumerate(groups):
        gr.bits = n + best[gi]
        gr.mode = modes[gi, best[gi] + 1]
        for j in gr.channels:
            bits[j] = gr.bits
            chan_modes[j] = gr.mode

    surplus = ()
    extra = math.ceil(surplus_2bit * c - 1e-9) if surplus_2bit > 0 else 0
    if extra:
        surplus = _upgrade_surplus(prob, bits, chan_modes, kappa, extra, n)

    specs, cols = [], []
    for j in range(c):
        t = int(bits[j]) - (n - 1)
        q, col = prob.channel(j, t, chan_modes[j])
        specs.append(ChannelSpec.from_quantizer(q))
        cols.append(col)
    wq = np.stack(cols, axis=1)
    objective = prob.objective(wq) if extra else best_obj
    return AllocationResult(
        bits=bits,
        modes=[m if int(b) > n - 1 else "uniform" for m, b in zip(chan_modes, bits)],
        objective=objective,
        baseline=baseline,
        groups=groups,
        specs=specs,
        scaling=prob.scaling,
        surplus_channels=surplus,
    )


def _upgrade_surplus(prob, bits, chan_modes, kappa, count, n):
    """Upgrade ``count`` channels one tier: lowest tier first, then kurtosis."""
    chosen = []
    for tier_bits in (n - 1, n):
        pool = [j for j in range(len(bits)) if bits[j] == tier_bits]
        pool.sort(key=lambda j: (-kappa[j], j))
        for j in pool:
            if len(chosen) == count:
                break
            chosen.append(j)
        if len(chosen) == count:
            break
    if len(chosen) < count:
        raise ContractError(f"cannot place {count} surplus channels")
    for j in chosen:
        bits[j] += 1
        t = int(bits[j]) - (n - 1)
        chan_modes[j] = prob.group_mode([j], t)
    return tuple(sorted(chosen))
