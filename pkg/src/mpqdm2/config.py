"""Flat ``key = value`` pipeline configuration with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .mtrd import KL, MSE
from .pipeline import ABLATION, FP
from .toydiff.data import DATASETS, TWO_MOONS


def _names(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


@dataclass(frozen=True)
class PipelineConfig:
    dataset: str = TWO_MOONS
    seed: int = 0
    timesteps: int = 10
    beta_start: float = 1e-4
    beta_end: float = 0.2
    pretrain_iterations: int = 3000
    pretrain_batch: int = 256
    pretrain_lr: float = 3e-3
    weight_bits: int = 2
    act_bits: int = 4
    first_layer_bits: int = 8
    groups: int = 0  # 0 means C_in // 10
    surplus_2bit: float = 0.0
    rank: int = 4
    calib_batches: int = 4
    calib_batch: int = 32
    variant: str = "full"
    alpha: float = 1.0
    tau: float = 0.1
    capacity: int = 512
    k: int = 32
    n_push: int = 8
    iterations: int = 2000
    batch: int = 16
    loss_metric: str = KL
    lr_adapter: float = 1e-3
    lr_step: float = 1e-4
    sample_count: int = 2000
    sample_steps: int = 10
    eta: float = 0.0
    eval_seed: int = 1000
    ablation: str = ",".join(ABLATION)
    workdir: str = "runs"
    fp_checkpoint: str = ""
    quant_checkpoint: str = ""
    finetune_checkpoint: str = ""
    report_checkpoints: str = ""
    sample_from: str = "finetune"  # fp | quant | finetune

    # derived paths -----------------------------------------------------

    def path(self, name: str) -> Path:
        explicit = getattr(self, name)
        if explicit:
            return Path(explicit)
        default = {
            "fp_checkpoint": "fp.mpq2",
            "quant_checkpoint": "quant.mpq2",
            "finetune_checkpoint": "finetuned.mpq2",
        }[name]
        return Path(self.workdir) / default

    @property
    def ablation_rows(self) -> tuple[str, ...]:
        return _names(self.ablation)

    def replace(self, **changes) -> "PipelineConfig":
        return validate(dataclasses.replace(self, **changes))


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw, 0)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def validate(cfg: PipelineConfig) -> PipelineConfig:
    def need(ok: bool, msg: str):
        if not ok:
            raise ConfigError(msg)

    need(cfg.dataset in DATASETS, f"dataset must be one of {DATASETS}")
    need(0 <= cfg.seed < 2**64, "seed must be an unsigned 64-bit integer")
    need(1 <= cfg.timesteps <= 1000, "timesteps must be in [1, 1000]")
    need(0 < cfg.beta_start <= cfg.beta_end < 1, "need 0 < beta_start <= beta_end < 1")
    need(cfg.pretrain_iterations >= 1 and cfg.pretrain_batch >= 1, "pretraining needs iterations and batch >= 1")
    need(cfg.pretrain_lr > 0, "pretrain_lr must be > 0")
    need(2 <= cfg.weight_bits <= 7, "weight_bits must be in [2, 7] (base quantizer uses weight_bits - 1)")
    need(2 <= cfg.act_bits <= 8, "act_bits must be in [2, 8]")
    need(2 <= cfg.first_layer_bits <= 8, "first_layer_bits must be in [2, 8]")
    need(cfg.groups >= 0, "groups must be >= 0")
    need(0.0 <= cfg.surplus_2bit < 1.0, "surplus_2bit must be in [0, 1)")
    need(cfg.rank >= 0, "rank must be >= 0")
    need(cfg.calib_batches >= 1 and cfg.calib_batch >= 1, "calibration sizes must be >= 1")
    need(cfg.variant in ABLATION and cfg.variant != FP, f"variant must be one of {ABLATION[1:]}")
    need(cfg.alpha >= 0, "alpha must be >= 0")
    need(cfg.tau > 0, "tau must be > 0")
    need(cfg.capacity >= 1 and cfg.k >= 1, "capacity and k must be >= 1")
    need(1 <= cfg.n_push <= cfg.batch, "n_push must be in [1, batch]")
    need(cfg.iterations >= 0 and cfg.batch >= 1, "iterations must be >= 0 and batch >= 1")
    need(cfg.loss_metric in (KL, MSE), f"loss_metric must be {KL} or {MSE}")
    need(cfg.lr_adapter >= 0 and cfg.lr_step >= 0, "learning rates must be >= 0")
    need(cfg.sample_count >= 2, "sample_count must be >= 2")
    need(1 <= cfg.sample_steps <= cfg.timesteps, "sample_steps must be in [1, timesteps]")
    need(0.0 <= cfg.eta <= 1.0, "eta must be in [0, 1]")
    need(cfg.sample_from in ("fp", "quant", "finetune"), "sample_from must be fp, quant or finetune")
    rows = cfg.ablation_rows
    need(len(rows) > 0, "ablation must list at least one row")
    need(all(r in ABLATION for r in rows), f"ablation rows must come from {ABLATION}")
    need(len(set(rows)) == len(rows), "ablation rows must be unique")
    return cfg


def parse(text: str) -> PipelineConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in body.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return validate(PipelineConfig(**values))


def emit(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load(path) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text)
