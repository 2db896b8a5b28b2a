"""Uniform affine quantization, channel pre-scaling and the residual quantizer.

Conventions
-----------
* A weight matrix ``W`` is ``C_out x C_in``; a *channel* is an input channel,
  i.e. a column of ``W`` (and of the activation matrix ``X``, ``N x C_in``).
* Residual quantizers use an ``n-1`` bit uniform base plus one or two binary
  tiers ``delta * sign(residual)`` with ``sign(0) = +1``.
* In ``joint`` mode the binary steps are tied to the base step
  (``base/4`` and ``base/8``), which makes the tiered output coincide with a
  uniform ``n`` / ``n+1`` bit grid.  ``separate`` mode leaves them free.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

JOINT = "joint"
SEPARATE = "separate"
UNIFORM = "uniform"
MODES = (UNIFORM, JOINT, SEPARATE)
MODE_CODES = {UNIFORM: 0, JOINT: 1, SEPARATE: 2}

DEGENERATE_STEP = 1e-8

# coarse-to-fine search settings
COARSE_POINTS = 64
REFINE_LEVELS = 3
GOLDEN_ITERS = 12
INNER_POINTS = 24
INNER_LEVELS = 5
OFFSET_SHIFTS = (-0.25, 0.0, 0.25)
OFFSET_POINTS = 33
_GOLD = (np.sqrt(5.0) - 1.0) / 2.0


def _sign(r):
    return np.where(r >= 0, 1.0, -1.0)


@dataclass(frozen=True)
class UniformQuantizer:
    """Affine quantizer; ``scale``/``zero_point`` may be per-channel arrays.

    Per-channel arrays broadcast along the last axis of the input (columns).
    Min/max calibration yields integer zero points; fitted quantizers may use
    a real-valued grid offset.
    """

    bits: int
    scale: float | np.ndarray
    zero_point: float | np.ndarray
    lower: float | np.ndarray
    upper: float | np.ndarray

    def __post_init__(self):
        if self.bits < 1:
            raise ContractError(f"bits must be >= 1, got {self.bits}")
        if np.any(np.asarray(self.scale) <= 0):
            raise ContractError("quantizer step must be > 0")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    @classmethod
    def from_step(cls, bits: int, scale, zero_point) -> "UniformQuantizer":
        """Build from (s, z); the clip bounds are the grid end points."""
        scale = np.asarray(scale, dtype=np.float64)
        zero_point = np.asarray(zero_point, dtype=np.float64)
        lower = -zero_point * scale
        upper = (2**bits - 1 - zero_point) * scale
        if scale.ndim == 0:
            return cls(bits, float(scale), float(zero_point), float(lower), float(upper))
        return cls(bits, scale, zero_point, lower, upper)


def grid_codes(x, s, z, qmax, rounder: Callable = np.round):
    """Integer codes ``clip(round(x/s + frac(z)) + floor(z), 0, qmax)``.

    For an integer ``z`` this is exactly ``clip(round(x/s) + z, 0, qmax)``.
    """
    z = np.asarray(z, dtype=np.float64)
    zi = np.floor(z)
    zf = z - zi
    return np.clip(rounder(np.asarray(x, dtype=np.float64) / s + zf) + zi, 0, qmax)


def quantize_uniform(x, q: UniformQuantizer, rounder: Callable = np.round) -> np.ndarray:
    """Fake-quantize: ``s * (clip(round(x/s) + z, 0, 2^N-1) - z)``."""
    s = np.asarray(q.scale, dtype=np.float64)
    z = np.asarray(q.zero_point, dtype=np.float64)
    return s * (grid_codes(x, s, z, q.qmax, rounder) - z)


def calibrate_uniform(x, bits: int, granularity: str = "per-tensor") -> UniformQuantizer:
    """Min/max calibration: ``s = (u-l)/(2^N-1)``, ``z = -round(l/s)``.

    A constant unit (``l == u == c``) gets ``s = |c|`` (or ``DEGENERATE_STEP``
    when ``c == 0``) so that the constant is reproduced exactly.
    """
    if not 1 <= bits <= 8:
        raise ContractError(f"bits must be in [1, 8], got {bits}")
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ContractError("cannot calibrate on an empty tensor")
    if granularity == "per-tensor":
        lo, hi = np.min(x), np.max(x)
    elif granularity == "per-channel":
        x2 = x.reshape(-1, x.shape[-1])
        lo, hi = x2.min(axis=0), x2.max(axis=0)
    else:
        raise ContractError(f"unknown granularity {granularity!r}")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    span = (hi - lo) / (2**bits - 1)
    const = np.maximum(np.abs(lo), DEGENERATE_STEP)
    s = np.where(span > 0, span, const)  # also catches spans that underflow
    z = -np.round(lo / s)
    if s.ndim == 0:
        return UniformQuantizer(bits, float(s), float(z), float(lo), float(hi))
    return UniformQuantizer(bits, s, z, lo, hi)


def centered_zero_point(scale, lower, upper, bits: int):
    """Integer zero point placing the grid centre on the data mid-range.

    With ``scale = (upper-lower)/(2^N-1)`` this reduces to ``-round(lower/scale)``.
    """
    return np.round(centered_offset(scale, lower, upper, bits))


def centered_offset(scale, lower, upper, bits: int):
    """Real-valued grid offset centring the ``2^N`` levels on the mid-range."""
    scale = np.asarray(scale, dtype=np.float64)
    return (2**bits - 1) / 2.0 - (lower + upper) / (2.0 * scale)


# ---------------------------------------------------------------------------
# Residual quantizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualQuantizer:
    base: UniformQuantizer
    delta_res: float
    delta_res2: float | None = None
    mode: str = SEPARATE

    def __post_init__(self):
        if self.mode not in (JOINT, SEPARATE):
            raise ContractError(f"residual mode must be joint|separate, got {self.mode!r}")
        if self.delta_res < 0 or (self.delta_res2 is not None and self.delta_res2 < 0):
            raise ContractError("residual steps must be non-negative")

    @property
    def tiers(self) -> int:
        return 1 if self.delta_res2 is None else 2

    @property
    def bits(self) -> int:
        return self.base.bits + self.tiers

    @classmethod
    def joint(cls, base: UniformQuantizer, tiers: int = 1) -> "ResidualQuantizer":
        s = float(base.scale)
        return cls(base, s / 4.0, s / 8.0 if tiers == 2 else None, JOINT)


def quantize_residual(x, q: ResidualQuantizer, tiers: int) -> np.ndarray:
    """Hierarchical output: base, base + d1*sign(r1), ... + d2*sign(r2)."""
    if tiers not in (0, 1, 2) or tiers > q.tiers:
        raise ContractError(f"tiers={tiers} not available on a {q.tiers}-tier quantizer")
    x = np.asarray(x, dtype=np.float64)
    out = quantize_uniform(x, q.base)
    if tiers >= 1:
        out = out + q.delta_res * _sign(x - out)
    if tiers == 2:
        out = out + q.delta_res2 * _sign(x - out)
    return out


# ---------------------------------------------------------------------------
# Step-size fitting
# ---------------------------------------------------------------------------


def _offset_candidates(steps, lo, hi, bits):
    """Grid offsets tried for every candidate step (``S x K``).

    The centred offset, quarter-step shifts of it, and the nearest integer
    (which puts zero exactly on the grid).
    """
    c = centered_offset(np.asarray(steps, dtype=np.float64), lo, hi, bits)
    return np.stack([c + d for d in OFFSET_SHIFTS] + [np.round(c)], axis=-1)


def _uniform_out(x, steps, offsets, bits):
    """Uniform outputs for paired (step, offset) candidates, one row each."""
    s = np.asarray(steps, dtype=np.float64)[:, None]
    z = np.asarray(offsets, dtype=np.float64)[:, None]
    return s * (grid_codes(x[None, :], s, z, 2**bits - 1) - z)


def _coarse_to_fine(f, lo: float, hi: float, extra=(), log: bool = True,
                    points: int = COARSE_POINTS, golden: int = GOLDEN_ITERS) -> float:
    """Minimize a scalar-parameter objective ``f(array) -> array``.

    Coarse grid of COARSE_POINTS, REFINE_LEVELS zoomed grids around the best
    point, then a golden-section polish inside the final bracket.  The
    ``extra`` candidates are compared at the end; ties keep the earliest.
    """
    if log:
        grid = np.geomspace(lo, hi, points)
    else:
        grid = np.linspace(lo, hi, points)
    vals = f(grid)
    for _ in range(REFINE_LEVELS):
        i = int(np.argmin(vals))
        a = grid[max(i - 1, 0)]
        b = grid[min(i + 1, len(grid) - 1)]
        if not b > a:
            break
        grid = np.linspace(a, b, points)
        vals = f(grid)
    i = int(np.argmin(vals))
    best_p, best_v = float(grid[i]), float(vals[i])
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, len(grid) - 1)]
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(np.array([c]))[0], f(np.array([d]))[0]
    for _ in range(golden):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = f(np.array([c]))[0]
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = f(np.array([d]))[0]
    for p, v in ((c, fc), (d, fd)):
        if v < best_v:
            best_p, best_v = float(p), float(v)
    extra = [float(e) for e in extra if e is not None and e > 0]
    if extra:
        ev = f(np.array(extra))
        j = int(np.argmin(ev))
        if ev[j] < best_v:
            best_p = extra[j]
    return best_p


def _search(obj, lo, hi, bits, a, b, pairs=(), points=COARSE_POINTS, golden=GOLDEN_ITERS):
    """Minimize ``obj(steps, offsets)`` over the base step and grid offset.

    Coarse-to-fine over the step (each step scored by its best offset among
    :func:`_offset_candidates`), then a dense offset sweep at the chosen
    step.  ``pairs`` are extra ``(step, offset)`` candidates; the result is
    never worse than any of them.
    """
    k = len(OFFSET_SHIFTS) + 1

    def f(steps):
        steps = np.asarray(steps, dtype=np.float64)
        offs = _offset_candidates(steps, lo, hi, bits)
        return obj(np.repeat(steps, k), offs.ravel()).reshape(len(steps), k).min(axis=1)

    def sweep(s):
        c = float(centered_offset(s, lo, hi, bits))
        zs = np.concatenate([c + np.linspace(-0.5, 0.5, OFFSET_POINTS), _offset_candidates(np.array([s]), lo, hi, bits)[0]])
        err = obj(np.full(len(zs), s), zs)
        j = int(np.argmin(err))
        return float(zs[j]), float(err[j])

    s = _coarse_to_fine(f, a, b, points=points, golden=golden)
    z, e = sweep(s)
    best = (e, s, z)
    if pairs:
        ps = np.array([p[0] for p in pairs], dtype=np.float64)
        pz = np.array([p[1] for p in pairs], dtype=np.float64)
        err = obj(ps, pz)
        j = int(np.argmin(err))
        if err[j] < best[0]:
            best = (float(err[j]), float(ps[j]), float(pz[j]))
    return best[1], best[2]


def _data_range(x):
    lo, hi = float(np.min(x)), float(np.max(x))
    return lo, hi


def _step_bounds(lo, hi, bits):
    s_mm = (hi - lo) / (2**bits - 1)
    return s_mm / 256.0, s_mm * 1.05, s_mm


def _degenerate_range(a, b) -> bool:
    return not (a > 0 and np.isfinite(b) and b > a)


def fit_uniform(x, bits: int) -> UniformQuantizer:
    """MSE-optimal per-tensor uniform quantizer over step and grid offset.

    Min/max calibration is one of the candidates, so the fit is never worse.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ContractError("cannot fit an empty vector")
    lo, hi = _data_range(x)
    a, b, s_mm = _step_bounds(lo, hi, bits)
    if hi == lo or _degenerate_range(a, b):
        return calibrate_uniform(x, bits)
    mm = calibrate_uniform(x, bits)

    def obj(steps, offs):
        return np.mean((_uniform_out(x, steps, offs, bits) - x[None, :]) ** 2, axis=1)

    s, z = _search(obj, lo, hi, bits, a, b, pairs=[(mm.scale, mm.zero_point)])
    return UniformQuantizer.from_step(bits, s, z)


def _joint_outputs(x, steps, offs, base_bits, tiers):
    q = _uniform_out(x, steps, offs, base_bits)
    s = np.asarray(steps, dtype=np.float64)[:, None]
    q = q + (s / 4.0) * _sign(x[None, :] - q)
    if tiers == 2:
        q = q + (s / 8.0) * _sign(x[None, :] - q)
    return q


def _separate_tier1(x, steps, offs, base_bits):
    """Best tier-1 output per base candidate with the closed-form delta = mean|r|."""
    q = _uniform_out(x, steps, offs, base_bits)
    r = x[None, :] - q
    d1 = np.mean(np.abs(r), axis=1)
    return q + d1[:, None] * _sign(r), d1


def _separate_tier2_inner(x, q0):
    """For each base output row, search delta1; delta2 is closed form.

    Returns (mse, delta1, delta2) per row.
    """
    r1 = x[None, :] - q0  # K x L
    sg1 = _sign(r1)
    hi = np.maximum(np.max(np.abs(r1), axis=1), 1e-300)
    lo = np.zeros_like(hi)

    def evaluate(d1):  # d1: K x J
        r2 = r1[:, None, :] - d1[:, :, None] * sg1[:, None, :]
        d2 = np.mean(np.abs(r2), axis=2)
        err = np.mean((np.abs(r2) - d2[:, :, None]) ** 2, axis=2)
        return err, d2

    for _ in range(INNER_LEVELS):
        t = np.linspace(0.0, 1.0, INNER_POINTS)[None, :]
        d1 = lo[:, None] + (hi - lo)[:, None] * t
        err, _ = evaluate(d1)
        i = np.argmin(err, axis=1)
        rows = np.arange(len(i))
        step = (hi - lo) / (INNER_POINTS - 1)
        centre = d1[rows, i]
        lo, hi = np.maximum(centre - step, 0.0), centre + step
    # candidate: the tier-1 closed form (guarantees tier2 <= tier1)
    cands = np.stack([centre, np.mean(np.abs(r1), axis=1)], axis=1)
    err, d2 = evaluate(cands)
    j = np.argmin(err, axis=1)
    rows = np.arange(len(j))
    return err[rows, j], cands[rows, j], d2[rows, j]


def _residual_fallback(x, base_bits, tiers, mode):
    """Ranges too small to search: min/max base with closed-form binary steps."""
    base = calibrate_uniform(x, base_bits)
    if mode == JOINT:
        return ResidualQuantizer.joint(base, tiers)
    q = _refit_last_delta(x, ResidualQuantizer(base, 0.0, None, SEPARATE))
    if tiers == 2:
        q = _refit_last_delta(x, replace(q, delta_res2=0.0))
    return q


def fit_step_sizes(x, q: ResidualQuantizer) -> ResidualQuantizer:
    """Fit the step sizes of ``q`` (mode and tier count kept) to ``x`` by MSE.

    joint: the base step and grid offset are free, binary steps follow the
    base step.  separate: the binary steps are free too; the last one always
    takes its closed-form optimum ``mean|residual|``.  The separate search
    also evaluates the joint optimum and the plain ``n-1`` bit optimum as
    candidates, so its error never exceeds either of them.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ContractError("cannot fit an empty vector")
    base_bits, tiers = q.base.bits, q.tiers
    lo, hi = _data_range(x)
    if hi == lo:
        return _fit_constant(x, base_bits, tiers, q.mode)
    a, b, s_mm = _step_bounds(lo, hi, base_bits)
    if _degenerate_range(a, b):
        return _residual_fallback(x, base_bits, tiers, q.mode)
    mm = calibrate_uniform(x, base_bits)
    start = [(mm.scale, mm.zero_point)]

    def joint_obj(steps, offs):
        return np.mean((_joint_outputs(x, steps, offs, base_bits, tiers) - x[None, :]) ** 2, axis=1)

    s_j, z_j = _search(joint_obj, lo, hi, base_bits, a, b, pairs=start)
    if q.mode == JOINT:
        return ResidualQuantizer.joint(UniformQuantizer.from_step(base_bits, s_j, z_j), tiers)

    plain = fit_uniform(x, base_bits)
    pairs = start + [(s_j, z_j), (plain.scale, plain.zero_point)]
    if tiers == 1:

        def sep_obj(steps, offs):
            out, _ = _separate_tier1(x, steps, offs, base_bits)
            return np.mean((out - x[None, :]) ** 2, axis=1)

        s, z = _search(sep_obj, lo, hi, base_bits, a, b, pairs=pairs)
        _, d1 = _separate_tier1(x, np.array([s]), np.array([z]), base_bits)
        return ResidualQuantizer(UniformQuantizer.from_step(base_bits, s, z), float(d1[0]), None, SEPARATE)

    def sep2_obj(steps, offs):
        err, _, _ = _separate_tier2_inner(x, _uniform_out(x, steps, offs, base_bits))
        return err

    # the tier-1 separate optimum is a candidate too (tier2 <= tier1)
    sep1 = fit_step_sizes(x, ResidualQuantizer(q.base, 1.0, None, SEPARATE)).base
    pairs.append((sep1.scale, sep1.zero_point))
    s, z = _search(sep2_obj, lo, hi, base_bits, a, b, pairs=pairs, points=32, golden=8)
    _, d1, d2 = _separate_tier2_inner(x, _uniform_out(x, np.array([s]), np.array([z]), base_bits))
    fitted = ResidualQuantizer(UniformQuantizer.from_step(base_bits, s, z), float(d1[0]), float(d2[0]), SEPARATE)
    # the exact joint parameters are a candidate as well
    jq = ResidualQuantizer.joint(UniformQuantizer.from_step(base_bits, s_j, z_j), 2)
    j_as_sep = _refit_last_delta(x, replace(jq, mode=SEPARATE))
    if _mse(x, j_as_sep, 2) < _mse(x, fitted, 2):
        return j_as_sep
    return fitted


def _refit_last_delta(x, q: ResidualQuantizer) -> ResidualQuantizer:
    mid = quantize_residual(x, q, q.tiers - 1)
    d = float(np.mean(np.abs(x - mid)))
    if q.tiers == 1:
        return replace(q, delta_res=d)
    return replace(q, delta_res2=d)


def _mse(x, q, tiers):
    return float(np.mean((quantize_residual(x, q, tiers) - x) ** 2))


def _fit_constant(x, base_bits, tiers, mode):
    c = float(x[0])
    if mode == SEPARATE:
        base = calibrate_uniform(x, base_bits)
        return ResidualQuantizer(base, 0.0, 0.0 if tiers == 2 else None, SEPARATE)
    # joint: pick a base step for which c sits exactly on the tiered grid
    mag = abs(c) if c != 0 else DEGENERATE_STEP
    s = (8.0 if tiers == 2 else 4.0) * mag
    z = float(centered_zero_point(s, c, c, base_bits))
    return ResidualQuantizer.joint(UniformQuantizer.from_step(base_bits, s, z), tiers)


# ---------------------------------------------------------------------------
# Channel pre-scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelScaling:
    delta: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=np.float64)
        if d.ndim != 1 or not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise ContractError("channel scaling must be a finite positive vector")

    def scale_activations(self, x):
        return np.asarray(x, dtype=np.float64) * self.delta

    def scale_weight(self, w):
        return np.asarray(w, dtype=np.float64) / self.delta

    @classmethod
    def identity(cls, c: int) -> "ChannelScaling":
        return cls(np.ones(c))


def compute_prescale(w, x_calib) -> ChannelScaling:
    """delta_i = sqrt(max|W[:, i]| / max|X[:, i]|); degenerate channels get 1."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x_calib, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError("calibration activations must be a nonempty N x C matrix")
    if w.shape[1] != x.shape[1]:
        raise ContractError(f"weight has {w.shape[1]} input channels, activations {x.shape[1]}")
    wmax = np.max(np.abs(w), axis=0)
    xmax = np.max(np.abs(x), axis=0)
    ok = (wmax > 0) & (xmax > 0)
    delta = np.ones(w.shape[1])
    delta[ok] = np.sqrt(wmax[ok] / xmax[ok])
    bad = ~np.isfinite(delta) | (delta <= 0)
    delta[bad] = 1.0
    return ChannelScaling(delta)


# ---------------------------------------------------------------------------
# Per-channel specs and the layer state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelSpec:
    """Serializable description of one channel's weight quantizer."""

    bits: int
    mode: str
    scale: float
    zero_point: float
    delta_res: float | None = None
    delta_res2: float | None = None

    @property
    def tiers(self) -> int:
        return int(self.delta_res is not None) + int(self.delta_res2 is not None)

    @property
    def base_bits(self) -> int:
        return self.bits - self.tiers

    def quantizer(self) -> UniformQuantizer | ResidualQuantizer:
        base = UniformQuantizer.from_step(self.base_bits, self.scale, self.zero_point)
        if self.tiers == 0:
            return base
        return ResidualQuantizer(base, self.delta_res, self.delta_res2, self.mode)

    def apply(self, x) -> np.ndarray:
        q = self.quantizer()
        if isinstance(q, UniformQuantizer):
            return quantize_uniform(x, q)
        return quantize_residual(x, q, q.tiers)

    @classmethod
    def from_quantizer(cls, q: UniformQuantizer | ResidualQuantizer) -> "ChannelSpec":
        if isinstance(q, UniformQuantizer):
            return cls(q.bits, UNIFORM, float(q.scale), float(q.zero_point))
        return cls(q.bits, q.mode, float(q.base.scale), float(q.base.zero_point), q.delta_res, q.delta_res2)


@dataclass
class LayerQuantState:
    """Everything needed to turn one FP linear layer into its quantized form.

    Channel arrays are indexed by input channel.  ``delta1``/``delta2`` are
    only meaningful where ``tiers >= 1`` / ``tiers == 2``; joint channels keep
    them tied to ``scale`` (see :meth:`residual_steps`).
    """

    scaling: ChannelScaling
    base_bits: int
    bits: np.ndarray
    modes: np.ndarray  # MODE_CODES
    scale: np.ndarray
    zero_point: np.ndarray
    delta1: np.ndarray
    delta2: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    act_bits: int = 8
    act_scale: np.ndarray = field(default_factory=lambda: np.ones(1))
    act_zero: np.ndarray = field(default_factory=lambda: np.zeros(1))

    @property
    def channels(self) -> int:
        return len(self.bits)

    @property
    def tiers(self) -> np.ndarray:
        return self.bits - self.base_bits

    @property
    def rank(self) -> int:
        return self.l1.shape[1]

    def adapter(self) -> np.ndarray:
        return self.l1 @ self.l2

    def residual_steps(self):
        joint = self.modes == MODE_CODES[JOINT]
        d1 = np.where(joint, self.scale / 4.0, self.delta1)
        d2 = np.where(joint, self.scale / 8.0, self.delta2)
        return d1, d2

    def specs(self) -> list[ChannelSpec]:
        d1, d2 = self.residual_steps()
        inv = {v: k for k, v in MODE_CODES.items()}
        out = []
        for j in range(self.channels):
            t = int(self.tiers[j])
            out.append(
                ChannelSpec(
                    int(self.bits[j]),
                    inv[int(self.modes[j])],
                    float(self.scale[j]),
                    float(self.zero_point[j]),
                    float(d1[j]) if t >= 1 else None,
                    float(d2[j]) if t >= 2 else None,
                )
            )
        return out

    @classmethod
    def from_specs(cls, specs: Sequence[ChannelSpec], scaling: ChannelScaling, c_out: int, rank: int = 0,
                   act_bits: int = 8, timesteps: int = 1) -> "LayerQuantState":
        base_bits = {s.base_bits for s in specs}
        if len(base_bits) != 1:
            raise ContractError(f"channels disagree on base bit width: {sorted(base_bits)}")
        c = len(specs)
        return cls(
            scaling=scaling,
            base_bits=base_bits.pop(),
            bits=np.array([s.bits for s in specs], dtype=np.int64),
            modes=np.array([MODE_CODES[s.mode] for s in specs], dtype=np.int64),
            scale=np.array([s.scale for s in specs]),
            zero_point=np.array([s.zero_point for s in specs], dtype=np.float64),
            delta1=np.array([s.delta_res if s.delta_res is not None else 0.0 for s in specs]),
            delta2=np.array([s.delta_res2 if s.delta_res2 is not None else 0.0 for s in specs]),
            l1=np.zeros((c_out, rank)),
            l2=np.zeros((rank, c)),
            act_bits=act_bits,
            act_scale=np.ones(timesteps),
            act_zero=np.zeros(timesteps),
        )

    def copy(self) -> "LayerQuantState":
        return LayerQuantState(
            scaling=self.scaling,
            base_bits=self.base_bits,
            bits=self.bits.copy(),
            modes=self.modes.copy(),
            scale=self.scale.copy(),
            zero_point=self.zero_point.copy(),
            delta1=self.delta1.copy(),
            delta2=self.delta2.copy(),
            l1=self.l1.copy(),
            l2=self.l2.copy(),
            act_bits=self.act_bits,
            act_scale=self.act_scale.copy(),
            act_zero=self.act_zero.copy(),
        )


def quantize_columns(v, state: LayerQuantState, rounder: Callable = np.round) -> np.ndarray:
    """Apply each channel's tiered quantizer to the matching column of ``v``."""
    v = np.asarray(v, dtype=np.float64)
    s = state.scale
    z = state.zero_point.astype(np.float64)
    q = s * (grid_codes(v, s, z, 2**state.base_bits - 1, rounder) - z)
    tiers = state.tiers
    d1, d2 = state.residual_steps()
    q = q + np.where(tiers >= 1, d1, 0.0) * _sign(v - q)
    q = q + np.where(tiers >= 2, d2, 0.0) * _sign(v - q)
    return q


def dequantized_weight(state: LayerQuantState, w) -> np.ndarray:
    """Effective weight ``Q(W_hat + L1 L2)`` in the pre-scaled domain.

    Forward passes use it as ``Q_act(X * delta) @ dequantized_weight(...).T``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (state.l1.shape[0], state.channels):
        raise ContractError(f"weight shape {w.shape} does not match state "
                            f"({state.l1.shape[0]}, {state.channels})")
    return quantize_columns(state.scaling.scale_weight(w) + state.adapter(), state)


# ---------------------------------------------------------------------------
# Storage packing (logical model: base codes + one binary mask per tier)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PackedChannel:
    length: int
    base_bits: int
    codes: np.ndarray  # uint8 base codes
    masks: tuple  # packed sign bits per tier (1 == +1)

    @property
    def stored_bits(self) -> int:
        return self.length * (self.base_bits + len(self.masks))


def pack_channel(x, q: UniformQuantizer | ResidualQuantizer, tiers: int = 0) -> PackedChannel:
    x = np.asarray(x, dtype=np.float64).ravel()
    base = q if isinstance(q, UniformQuantizer) else q.base
    s, z = float(base.scale), float(base.zero_point)
    codes = grid_codes(x, s, z, base.qmax).astype(np.uint8)
    out = s * (codes.astype(np.float64) - z)
    masks = []
    for k in range(tiers):
        d = q.delta_res if k == 0 else q.delta_res2
        sg = x - out >= 0
        masks.append(np.packbits(sg))
        out = out + d * np.where(sg, 1.0, -1.0)
    return PackedChannel(len(x), base.bits, codes, tuple(masks))


def unpack_channel(p: PackedChannel, q: UniformQuantizer | ResidualQuantizer) -> np.ndarray:
    base = q if isinstance(q, UniformQuantizer) else q.base
    s, z = float(base.scale), float(base.zero_point)
    out = s * (p.codes.astype(np.float64) - z)
    for k, m in enumerate(p.masks):
        d = q.delta_res if k == 0 else q.delta_res2
        sg = np.unpackbits(m, count=p.length).astype(bool)
        out = out + d * np.where(sg, 1.0, -1.0)
    return out
