"""Quantize -> initialize -> fine-tune -> evaluate, for the toy diffusion model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .mpq_search import search_allocation
from .oolri import apply_adapter_init, init_loss_comparison
from .quantizer import ChannelScaling, LayerQuantState, compute_prescale, dequantized_weight
from .toydiff.data import sample_data
from .toydiff.model import ToyDiffusionModel
from .toydiff.quant import QuantLayer, QuantModel, collect_calibration, fit_activation_params, uniform_state
from .toydiff.sampler import ddim_sample, energy_distance, temporal_similarity_map
from .toydiff.train import TrainConfig, TrainState, finetune

FP = "FP"
PTQ = "PTQ-only"
FZRMQ = "+FZRMQ"
MTRD = "+MTRD"
OOLRI = "+OOLRI"
FULL = "full"
ABLATION = (FP, PTQ, FZRMQ, MTRD, OOLRI, FULL)


@dataclass(frozen=True)
class Variant:
    name: str
    search: bool
    oolri: bool
    finetune: bool
    alpha: float


VARIANTS = {
    PTQ: Variant(PTQ, search=False, oolri=False, finetune=False, alpha=0.0),
    FZRMQ: Variant(FZRMQ, search=True, oolri=False, finetune=True, alpha=0.0),
    MTRD: Variant(MTRD, search=True, oolri=False, finetune=True, alpha=1.0),
    OOLRI: Variant(OOLRI, search=True, oolri=True, finetune=True, alpha=0.0),
    FULL: Variant(FULL, search=True, oolri=True, finetune=True, alpha=1.0),
}


@dataclass
class QuantSettings:
    n: int = 2  # average weight bits of the low-bit layers
    act_bits: int = 4
    first_bits: int = 8
    groups: int | None = None
    surplus_2bit: float = 0.0
    rank: int = 4
    calib_batches: int = 4
    calib_batch: int = 32


@dataclass
class LayerReport:
    layer: int
    channels: int
    bit_sum: int
    budget: int
    histogram: dict
    modes: dict
    objective: float
    baseline: float
    groups: int = 0
    init_loss_zero: float = float("nan")
    init_loss_oolri: float = float("nan")


@dataclass
class QuantizeResult:
    model: QuantModel
    reports: list[LayerReport] = field(default_factory=list)


def _rank(rank: int, w) -> int:
    return max(0, min(rank, w.shape[0], w.shape[1]))


def quantize_model(fp: ToyDiffusionModel, settings: QuantSettings, seed: int, search: bool = True,
                   oolri: bool = True) -> QuantizeResult:
    """Calibrate, allocate bits (or uniform n-bit), and optionally run the SVD init."""
    rng, lora_rng = numkit.split_rng(numkit.make_rng(seed), 2)
    calib = collect_calibration(fp, fp.dataset, settings.calib_batches, settings.calib_batch, rng)
    layers, reports = [], []
    T = fp.timesteps
    for i, (w, b) in enumerate(zip(fp.weights, fp.biases)):
        pooled = np.concatenate(calib[i], axis=0)
        if i == 0:
            st = uniform_state(w, settings.first_bits, ChannelScaling.identity(w.shape[1]), settings.first_bits)
            fit_activation_params(st, calib[i])
            layers.append(QuantLayer(w, b, st, trainable=False))
            continue
        r = _rank(settings.rank, w)
        if search:
            res = search_allocation(w, pooled, settings.n, settings.groups, settings.surplus_2bit,
                                    settings.act_bits)
            st = LayerQuantState.from_specs(res.specs, res.scaling, w.shape[0], r, settings.act_bits, T)
            rep = LayerReport(i, w.shape[1], int(res.bits.sum()), w.shape[1] * settings.n, res.histogram(),
                              res.mode_counts(), res.objective, res.baseline, len(res.groups))
        else:
            st = uniform_state(w, settings.n, compute_prescale(w, pooled), settings.act_bits, r)
            rep = LayerReport(i, w.shape[1], int(st.bits.sum()), w.shape[1] * settings.n,
                              {settings.n: w.shape[1]}, {"uniform": w.shape[1]}, float("nan"), float("nan"), 1)
        fit_activation_params(st, calib[i])
        if r:
            rep.init_loss_zero, rep.init_loss_oolri = init_loss_comparison(w, st, r)
        if oolri and r:
            apply_adapter_init(w, st, r)
        elif r:
            # zero product, trainable: L1 = 0 and a small random L2
            st.l2 = lora_rng.normal(size=(r, w.shape[1])) / np.sqrt(w.shape[1])
        layers.append(QuantLayer(w, b, st, trainable=True))
        reports.append(rep)
    return QuantizeResult(QuantModel(fp, layers), reports)


def weight_mse(model: QuantModel) -> list[float]:
    """Per-layer mean squared error between FP and effective quantized weights."""
    out = []
    for layer in model.layers:
        wq = dequantized_weight(layer.state, layer.w) * layer.state.scaling.delta
        out.append(float(np.mean((layer.w - wq) ** 2)))
    return out


@dataclass
class Evaluation:
    energy: float
    temporal_distance: float
    layer_mse: list[float]


@dataclass
class EvalSetup:
    reference: np.ndarray
    x_init: np.ndarray
    fp_map: np.ndarray


def eval_setup(fp: ToyDiffusionModel, seed: int, n: int = 2000) -> EvalSetup:
    rng = numkit.make_rng(seed)
    ref_rng, init_rng = numkit.split_rng(rng, 2)
    reference = sample_data(fp.dataset, n, ref_rng)
    x_init = init_rng.normal(size=(n, fp.data_dim))
    fp_traj = ddim_sample(fp.predict, fp.schedule, n, x_init=x_init)
    return EvalSetup(reference, x_init, temporal_similarity_map(fp_traj))


def evaluate(predict, fp: ToyDiffusionModel, setup: EvalSetup, layer_mse=None) -> Evaluation:
    traj = ddim_sample(predict, fp.schedule, len(setup.x_init), x_init=setup.x_init)
    tmap = temporal_similarity_map(traj)
    return Evaluation(
        energy=energy_distance(traj.samples, setup.reference),
        temporal_distance=float(np.linalg.norm(tmap - setup.fp_map)),
        layer_mse=list(layer_mse or []),
    )


def with_oolri(model: QuantModel) -> QuantModel:
    """Copy of ``model`` with every low-bit layer's adapter set by the SVD init."""
    out = model.copy()
    for layer in out.layers:
        if layer.trainable and layer.state.rank:
            apply_adapter_init(layer.w, layer.state, layer.state.rank)
    return out


def run_variant(fp: ToyDiffusionModel, variant: Variant, settings: QuantSettings, train: TrainConfig,
                seed: int, quantized: dict | None = None) -> tuple[QuantModel, TrainState | None]:
    """Build one ablation variant; ``quantized`` caches quantization results by search flag."""
    cache = {} if quantized is None else quantized
    if variant.search not in cache:
        cache[variant.search] = quantize_model(fp, settings, seed, variant.search, oolri=False)
    qm = cache[variant.search].model
    qm = with_oolri(qm) if variant.oolri else qm.copy()
    if not variant.finetune:
        return qm, None
    cfg = TrainConfig(**{**train.__dict__, "alpha": variant.alpha})
    state = finetune(qm, cfg, seed)
    return state.model, state
