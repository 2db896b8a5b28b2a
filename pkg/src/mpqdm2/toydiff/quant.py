"""Quantized student network with straight-through gradients.

Every low-bit linear layer computes

    y = Qa_t(h * delta) @ Qw(W / delta + L1 L2)^T + b

with per-timestep activation parameters ``(s_t, z_t)`` and per-input-channel
weight quantizers taken from a :class:`LayerQuantState`.  Gradients use the
straight-through estimator: rounding behaves as identity inside the clip
range, clipped entries pass no gradient to their input, and residual signs
are treated as constants.

A forward pass can *record* its rounding offsets, clip pattern and residual
signs and a later pass can *replay* them.  The replayed network is a smooth
function whose exact derivative is the STE gradient, which is what the
finite-difference checks compare against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericalError
from ..quantizer import (
    JOINT,
    MODE_CODES,
    SEPARATE,
    ChannelScaling,
    LayerQuantState,
    fit_uniform,
)
from .data import sample_data
from .model import ToyDiffusionModel, noisy_batch, silu, silu_grad

_JOINT = MODE_CODES[JOINT]
_SEP = MODE_CODES[SEPARATE]


def _uniform_fwd(v, s, z, qmax, rec=None):
    """Uniform fake-quantization; returns (q, record, k)."""
    u = v / s + z
    if rec is None:
        zi = np.floor(z)
        kr = np.round(u - zi) + zi  # integer-z case matches round(v/s) + z exactly
        clip = np.where(kr < 0, -1, np.where(kr > qmax, 1, 0)).astype(np.int8)
        rec = (kr - u, clip)
    off, clip = rec
    k = np.where(clip < 0, 0.0, np.where(clip > 0, float(qmax), u + off))
    return s * (k - z), rec, k


def _sign(r):
    return np.where(r >= 0, 1.0, -1.0)


@dataclass
class _LayerCache:
    h: np.ndarray  # layer input
    xq: np.ndarray  # quantized scaled activations
    act: tuple  # (record, k)
    wq: np.ndarray
    w_rec: tuple  # (uniform record, k, sign1, sign2)
    pre: np.ndarray  # layer output before the nonlinearity


def weight_forward(state: LayerQuantState, w_hat, rec=None):
    """Fake-quantized ``W_hat + L1 L2`` (pre-scaled domain)."""
    v = w_hat + state.adapter()
    qmax = 2**state.base_bits - 1
    z = state.zero_point.astype(np.float64)
    urec = None if rec is None else rec[0]
    qb, urec, k = _uniform_fwd(v, state.scale, z, qmax, urec)
    tiers = state.tiers
    d1, d2 = state.residual_steps()
    m1 = np.where(tiers >= 1, d1, 0.0)
    m2 = np.where(tiers >= 2, d2, 0.0)
    sg1 = _sign(v - qb) if rec is None else rec[2]
    q = qb + m1 * sg1
    sg2 = _sign(v - q) if rec is None else rec[3]
    q = q + m2 * sg2
    return q, (urec, k, sg1, sg2)


@dataclass
class QuantLayer:
    w: np.ndarray  # frozen FP weight (C_out x C_in)
    b: np.ndarray
    state: LayerQuantState
    trainable: bool = True

    @property
    def w_hat(self) -> np.ndarray:
        return self.state.scaling.scale_weight(self.w)


@dataclass
class LayerGrads:
    l1: np.ndarray
    l2: np.ndarray
    scale: np.ndarray
    delta1: np.ndarray
    delta2: np.ndarray
    act_scale: float
    act_zero: float


@dataclass
class QuantModel:
    fp: ToyDiffusionModel
    layers: list[QuantLayer]

    @property
    def timesteps(self) -> int:
        return self.fp.timesteps

    @property
    def schedule(self):
        return self.fp.schedule

    def copy(self) -> "QuantModel":
        return QuantModel(self.fp, [QuantLayer(l.w, l.b, l.state.copy(), l.trainable) for l in self.layers])

    def forward(self, x, t: int, record: dict | None = None, replay: dict | None = None):
        """Returns (output, caches).  ``record``/``replay`` map layer -> rounding record."""
        h = self.fp.embed_input(x, t)
        caches = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            st = layer.state
            xs = st.scaling.scale_activations(h)
            qa = 2**st.act_bits - 1
            arec = None if replay is None else replay[i][0]
            xq, arec, ak = _uniform_fwd(xs, st.act_scale[t - 1], st.act_zero[t - 1], qa, arec)
            wrec = None if replay is None else replay[i][1]
            wq, wrec = weight_forward(st, layer.w_hat, wrec)
            if record is not None:
                record[i] = (arec, wrec)
            a = xq @ wq.T + layer.b
            caches.append(_LayerCache(h, xq, (arec, ak), wq, wrec, a))
            h = silu(a) if i < last else a
        return h, caches

    def predict(self, x, t: int):
        out, caches = self.forward(x, t)
        return out, caches[-1].h

    def backward(self, t: int, caches: list[_LayerCache], d_pre: dict[int, np.ndarray],
                 d_feat: np.ndarray | None = None) -> dict[int, LayerGrads]:
        """STE gradients of a loss given dL/d(pre-activation) per layer and dL/d(features)."""
        grads: dict[int, LayerGrads] = {}
        last = len(self.layers) - 1
        first_trainable = min((i for i, l in enumerate(self.layers) if l.trainable), default=len(self.layers))
        d_h = None  # gradient w.r.t. the output h of the current layer
        for i in range(last, first_trainable - 1, -1):
            c = caches[i]
            layer = self.layers[i]
            st = layer.state
            if i == last:
                d_a = d_pre.get(i, 0.0) + (0.0 if d_h is None else d_h)
            else:
                d_a = d_h * silu_grad(c.pre) + d_pre.get(i, 0.0)
            d_a = np.broadcast_to(d_a, c.pre.shape)
            d_wq = d_a.T @ c.xq
            d_xq = d_a @ c.wq

            if layer.trainable:
                grads[i] = self._weight_grads(st, c, d_wq)
                (off, clip), ak = c.act
                s_t, z_t = st.act_scale[t - 1], st.act_zero[t - 1]
                inside = clip == 0
                grads[i].act_scale = float(np.sum(d_xq * np.where(inside, off, ak - z_t)))
                grads[i].act_zero = float(np.sum(d_xq * np.where(inside, 0.0, -s_t)))
            d_xs = d_xq * (c.act[0][1] == 0)
            d_h_in = d_xs * st.scaling.delta
            if i == last and d_feat is not None:
                d_h_in = d_h_in + d_feat
            d_h = d_h_in
        return grads

    @staticmethod
    def _weight_grads(st: LayerQuantState, c: _LayerCache, d_wq) -> LayerGrads:
        (off, clip), k, sg1, sg2 = c.w_rec
        inside = clip == 0
        z = st.zero_point.astype(np.float64)
        tiers = st.tiers
        m1 = (tiers >= 1).astype(np.float64)
        m2 = (tiers >= 2).astype(np.float64)
        joint = st.modes == _JOINT
        sep = st.modes == _SEP
        d_v = d_wq * inside
        dq_ds = np.where(inside, off, k - z) + np.where(joint, m1 * sg1 / 4.0 + m2 * sg2 / 8.0, 0.0)
        return LayerGrads(
            l1=d_v @ st.l2.T,
            l2=st.l1.T @ d_v,
            scale=np.sum(d_wq * dq_ds, axis=0),
            delta1=np.where(sep, np.sum(d_wq * sg1, axis=0) * m1, 0.0),
            delta2=np.where(sep, np.sum(d_wq * sg2, axis=0) * m2, 0.0),
            act_scale=0.0,
            act_zero=0.0,
        )


# ---------------------------------------------------------------------------
# Calibration and construction helpers
# ---------------------------------------------------------------------------


def layer_inputs(model: ToyDiffusionModel, x, t: int) -> list[np.ndarray]:
    return model.forward_trace(x, t)[1]


def collect_calibration(model: ToyDiffusionModel, dataset: str, batches: int, batch_size: int,
                        rng: np.random.Generator) -> list[list[np.ndarray]]:
    """``calib[layer][t-1]`` is the stacked input activation over ``batches`` batches."""
    calib = [[None] * model.timesteps for _ in model.weights]
    for t in range(1, model.timesteps + 1):
        per_layer = [[] for _ in model.weights]
        for _ in range(batches):
            x0 = sample_data(dataset, batch_size, rng)
            xt, _ = noisy_batch(model.schedule, x0, t, rng)
            for i, h in enumerate(layer_inputs(model, xt, t)):
                per_layer[i].append(h)
        for i in range(len(model.weights)):
            calib[i][t - 1] = np.concatenate(per_layer[i], axis=0)
    return calib


def fit_activation_params(state: LayerQuantState, calib_t: list[np.ndarray]) -> None:
    """Per-timestep MSE-fitted ``(s_t, z_t)`` on pre-scaled calibration inputs."""
    T = len(calib_t)
    state.act_scale = np.ones(T)
    state.act_zero = np.zeros(T)
    for t, x in enumerate(calib_t):
        q = fit_uniform(state.scaling.scale_activations(x), state.act_bits)
        state.act_scale[t] = float(q.scale)
        state.act_zero[t] = float(q.zero_point)


def uniform_state(w, bits: int, scaling: ChannelScaling | None = None, act_bits: int = 8,
                  rank: int = 0) -> LayerQuantState:
    """All channels uniform at ``bits`` with MSE-fitted per-channel steps."""
    from ..quantizer import ChannelSpec

    w = np.asarray(w, dtype=np.float64)
    scaling = scaling or ChannelScaling.identity(w.shape[1])
    w_hat = scaling.scale_weight(w)
    specs = [ChannelSpec.from_quantizer(fit_uniform(w_hat[:, j], bits)) for j in range(w.shape[1])]
    return LayerQuantState.from_specs(specs, scaling, w.shape[0], rank, act_bits)


def check_finite(model: QuantModel) -> None:
    for i, layer in enumerate(model.layers):
        st = layer.state
        for name in ("scale", "delta1", "delta2", "l1", "l2", "act_scale", "act_zero"):
            if not np.all(np.isfinite(getattr(st, name))):
                raise NumericalError(f"layer {i} parameter {name} is not finite")

