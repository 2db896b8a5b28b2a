"""Quantization-aware low-rank fine-tuning with temporal relation distillation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import mtrd, numkit
from ..errors import NumericalError
from .data import sample_data
from .model import noisy_batch
from .quant import QuantModel

ADAPTER_PARAMS = ("l1", "l2")
STEP_PARAMS = ("scale", "delta1", "delta2")
MIN_STEP = 1e-8


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch: int = 16
    alpha: float = 1.0
    tau: float = 0.1
    capacity: int = 512
    k: int = 32
    n_push: int = 8
    metric: str = mtrd.KL
    lr_adapter: float = 1e-3
    lr_step: float = 1e-4
    momentum: float = 0.9
    probe_every: int = 100
    probe_batch: int = 32


@dataclass
class LogRow:
    iteration: int
    t: int
    align: float
    mtrd: float
    total: float
    fill: float

    def line(self) -> str:
        return f"{self.iteration}\t{self.t}\t{self.align:.10g}\t{self.mtrd:.10g}\t{self.total:.10g}\t{self.fill:.6f}"


@dataclass
class TrainState:
    model: QuantModel
    memory: mtrd.TemporalMemory
    velocity: dict
    iteration: int
    rng: np.random.Generator
    log: list[LogRow] = field(default_factory=list)
    probe: list[tuple[int, float]] = field(default_factory=list)
    memory_dump: list = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [r.line() for r in self.log]


def relation_features(h):
    """Row-normalized final-block features used for relation distillation."""
    n = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
    return h / n


def relation_features_grad(h, g):
    """Backward of :func:`relation_features`: ``(I - u u^T) g / |h|`` per row."""
    n = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
    u = h / n
    return (g - u * np.sum(u * g, axis=1, keepdims=True)) / n


def alignment_targets(model: QuantModel, x, t: int):
    """FP pre-activations of every layer and the FP final-block features."""
    _, inputs, pre = model.fp.forward_trace(x, t)
    return pre, inputs[-1]


def alignment_loss(model: QuantModel, x, t: int, caches=None):
    """Sum over trainable layers of the output MSE against the FP teacher."""
    fp_pre, fp_feat = alignment_targets(model, x, t)
    if caches is None:
        _, caches = model.forward(x, t)
    loss, d_pre = 0.0, {}
    for i, layer in enumerate(model.layers):
        if not layer.trainable:
            continue
        diff = caches[i].pre - fp_pre[i]
        loss += float(np.mean(diff * diff))
        d_pre[i] = 2.0 * diff / diff.size
    return loss, d_pre, fp_feat, caches


def make_probe(model: QuantModel, dataset: str, n: int, seed: int):
    rng = numkit.make_rng(seed)
    batches = []
    for t in range(1, model.timesteps + 1):
        x0 = sample_data(dataset, n, rng)
        xt, _ = noisy_batch(model.schedule, x0, t, rng)
        batches.append((t, xt))
    return batches


def probe_loss(model: QuantModel, probe) -> float:
    """Alignment loss summed over a fixed batch at every timestep."""
    return float(sum(alignment_loss(model, x, t)[0] for t, x in probe))


def _apply_update(state: TrainState, grads, cfg: TrainConfig, t: int) -> None:
    for i, g in grads.items():
        st = state.model.layers[i].state
        for name in ADAPTER_PARAMS + STEP_PARAMS:
            lr = cfg.lr_adapter if name in ADAPTER_PARAMS else cfg.lr_step
            key = (i, name)
            v = cfg.momentum * state.velocity.get(key, 0.0) + getattr(g, name)
            state.velocity[key] = v
            setattr(st, name, getattr(st, name) - lr * v)
        st.scale = np.maximum(st.scale, MIN_STEP)
        st.delta1 = np.maximum(st.delta1, 0.0)
        st.delta2 = np.maximum(st.delta2, 0.0)
        for name, arr in (("act_scale", st.act_scale), ("act_zero", st.act_zero)):
            key = (i, name, t)
            v = cfg.momentum * state.velocity.get(key, 0.0) + getattr(g, name)
            state.velocity[key] = v
            arr[t - 1] -= cfg.lr_step * v
        st.act_scale[t - 1] = max(st.act_scale[t - 1], MIN_STEP)


def _diagnostic(state: TrainState, t: int, it: int) -> str:
    parts = [f"non-finite loss at iteration {it} (t={t})"]
    for i, layer in enumerate(state.model.layers):
        st = layer.state
        parts.append(
            f"layer {i}: |L1|={np.linalg.norm(st.l1):.3e} |L2|={np.linalg.norm(st.l2):.3e} "
            f"min step={np.min(st.scale):.3e} s_t={st.act_scale[t - 1]:.3e}"
        )
    return "; ".join(parts)


def finetune(model: QuantModel, cfg: TrainConfig, seed: int, dataset: str | None = None) -> TrainState:
    """Train adapters, weight step sizes and per-timestep activation params.

    Base weights are never modified.  The input ``model`` is copied.
    """
    dataset = dataset or model.fp.dataset
    rng = numkit.make_rng(seed)
    data_rng, noise_rng, mem_rng, t_rng = numkit.split_rng(rng, 4)
    student = model.copy()
    feat_dim = student.layers[-1].w.shape[1]
    memory = mtrd.TemporalMemory(student.timesteps, cfg.capacity, feat_dim)
    state = TrainState(student, memory, {}, 0, rng)
    probe = make_probe(student, dataset, cfg.probe_batch, seed + 1)
    state.probe.append((0, probe_loss(student, probe)))

    for it in range(cfg.iterations):
        t = int(t_rng.integers(1, student.timesteps + 1))
        x0 = sample_data(dataset, cfg.batch, data_rng)
        xt, _ = noisy_batch(student.schedule, x0, t, noise_rng)
        _, caches = student.forward(xt, t)
        align, d_pre, fp_feat, _ = alignment_loss(student, xt, t, caches)
        fp_rel = relation_features(fp_feat)
        mtrd.push_features(memory, t, fp_rel, min(cfg.n_push, len(fp_rel)), mem_rng)

        distill, d_feat = 0.0, None
        if cfg.alpha > 0 and memory.warm:
            ref = mtrd.build_reference(memory, cfg.k, mem_rng)
            q_raw = caches[-1].h
            q_rel = relation_features(q_raw)
            distill = mtrd.mtrd_loss(ref, fp_rel, q_rel, cfg.tau, cfg.metric)
            g = mtrd.mtrd_gradient(ref, fp_rel, q_rel, cfg.tau, cfg.metric)
            d_feat = cfg.alpha * relation_features_grad(q_raw, g)
        total = mtrd.total_loss(align, distill, cfg.alpha)
        if not np.isfinite(total):
            raise NumericalError(_diagnostic(state, t, it))

        grads = student.backward(t, caches, d_pre, d_feat)
        _apply_update(state, grads, cfg, t)
        state.iteration = it + 1
        state.log.append(LogRow(it, t, align, distill, total, memory.fill_fraction))
        if cfg.probe_every and (it + 1) % cfg.probe_every == 0:
            state.probe.append((it + 1, probe_loss(student, probe)))
    state.memory_dump = memory.stats()
    return state
