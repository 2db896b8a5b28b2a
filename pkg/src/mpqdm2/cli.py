"""``mpqdm2 <pretrain|quantize|finetune|sample|report> --config PATH [--seed U64] [--out PATH]``.

Exit codes: 0 success, 2 configuration error, 3 format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, config, numkit, pipeline
from .errors import ColdMemoryError, ConfigError, ContractError, FormatError, NumericalError
from .toydiff.model import Schedule, pretrain_fp
from .toydiff.sampler import ddim_sample, energy_distance
from .toydiff.train import TrainConfig, finetune

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4


def _settings(cfg: config.PipelineConfig) -> pipeline.QuantSettings:
    return pipeline.QuantSettings(
        n=cfg.weight_bits,
        act_bits=cfg.act_bits,
        first_bits=cfg.first_layer_bits,
        groups=cfg.groups or None,
        surplus_2bit=cfg.surplus_2bit,
        rank=cfg.rank,
        calib_batches=cfg.calib_batches,
        calib_batch=cfg.calib_batch,
    )


def _train_config(cfg: config.PipelineConfig, alpha: float | None = None) -> TrainConfig:
    return TrainConfig(
        iterations=cfg.iterations,
        batch=cfg.batch,
        alpha=cfg.alpha if alpha is None else alpha,
        tau=cfg.tau,
        capacity=cfg.capacity,
        k=cfg.k,
        n_push=cfg.n_push,
        metric=cfg.loss_metric,
        lr_adapter=cfg.lr_adapter,
        lr_step=cfg.lr_step,
    )


def _config_hash(cfg: config.PipelineConfig) -> str:
    import hashlib

    return hashlib.sha256(config.emit(cfg).encode()).hexdigest()


def _write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data, encoding="utf-8")
    else:
        path.write_bytes(data)


def threads() -> int:
    raw = os.environ.get("MPQDM2_THREADS", "")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"MPQDM2_THREADS must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError("MPQDM2_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(cfg: config.PipelineConfig, out: Path | None = None) -> Path:
    schedule = Schedule.linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    res = pretrain_fp(cfg.dataset, cfg.seed, cfg.pretrain_iterations, cfg.pretrain_batch, cfg.pretrain_lr, schedule)
    path = out or cfg.path("fp_checkpoint")
    meta = {"kind": "fp", "variant": pipeline.FP, "seed": cfg.seed, "config_sha256": _config_hash(cfg),
            "final_loss": float(np.mean(res.losses[-100:]))}
    _write(path, checkpoint.to_bytes(checkpoint.Checkpoint(res.model, None, meta)))
    print(f"pretrained {cfg.dataset}: final loss {meta['final_loss']:.6f} -> {path}")
    return path


def allocation_table(reports: list[pipeline.LayerReport]) -> str:
    head = "layer\tchannels\tgroups\tbit_sum\tbudget\thistogram\tmodes\tobjective\tuniform_baseline\tinit_zero\tinit_oolri"
    rows = [head]
    for r in reports:
        hist = ",".join(f"{b}:{c}" for b, c in sorted(r.histogram.items()))
        modes = ",".join(f"{m}:{c}" for m, c in sorted(r.modes.items()))
        rows.append(
            f"{r.layer}\t{r.channels}\t{r.groups}\t{r.bit_sum}\t{r.budget}\t{hist}\t{modes}\t{r.objective:.10g}\t"
            f"{r.baseline:.10g}\t{r.init_loss_zero:.10g}\t{r.init_loss_oolri:.10g}"
        )
    return "\n".join(rows) + "\n"


def cmd_quantize(cfg: config.PipelineConfig, out: Path | None = None) -> Path:
    fp_ckpt = checkpoint.load(cfg.path("fp_checkpoint"))
    variant = pipeline.VARIANTS[cfg.variant]
    res = pipeline.quantize_model(fp_ckpt.fp, _settings(cfg), cfg.seed, variant.search, oolri=False)
    model = pipeline.with_oolri(res.model) if variant.oolri else res.model
    path = out or cfg.path("quant_checkpoint")
    meta = {"kind": "quantized", "variant": cfg.variant, "seed": cfg.seed, "config_sha256": _config_hash(cfg)}
    _write(path, checkpoint.to_bytes(checkpoint.Checkpoint(fp_ckpt.fp, model, meta)))
    table = allocation_table(res.reports)
    _write(path.with_suffix(".alloc.tsv"), table)
    print(table, end="")
    print(f"quantized ({cfg.variant}) -> {path}")
    return path


def cmd_finetune(cfg: config.PipelineConfig, out: Path | None = None) -> Path:
    q_ckpt = checkpoint.load(cfg.path("quant_checkpoint"))
    if q_ckpt.quant is None:
        raise FormatError("finetune needs a quantized checkpoint")
    state = finetune(q_ckpt.quant, _train_config(cfg), cfg.seed)
    path = out or cfg.path("finetune_checkpoint")
    meta = dict(q_ckpt.meta)
    meta.update({"kind": "finetuned", "alpha": cfg.alpha, "iterations": cfg.iterations,
                 "config_sha256": _config_hash(cfg)})
    _write(path, checkpoint.to_bytes(checkpoint.Checkpoint(q_ckpt.fp, state.model, meta)))
    log = "".join(line + "\n" for line in state.log_lines())
    _write(path.with_suffix(".log.tsv"), log)
    dump = "\n".join(f"t={t}\tlen={n}\tmean={m:.6g}\tstd={s:.6g}" for t, n, m, s in state.memory_dump)
    _write(path.with_suffix(".memory.txt"), dump + "\n")
    print(f"finetuned {cfg.iterations} iterations (alpha={cfg.alpha}) -> {path}")
    return path


def _predictor(ckpt: checkpoint.Checkpoint):
    return ckpt.fp.predict if ckpt.quant is None else ckpt.quant.predict


def cmd_sample(cfg: config.PipelineConfig, out: Path | None = None) -> Path:
    src = {"fp": "fp_checkpoint", "quant": "quant_checkpoint", "finetune": "finetune_checkpoint"}[cfg.sample_from]
    ckpt = checkpoint.load(cfg.path(src))
    traj = ddim_sample(_predictor(ckpt), ckpt.fp.schedule, cfg.sample_count, cfg.sample_steps, cfg.eta, cfg.seed)
    for i, x in enumerate(traj.states):
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite sampler state after {i} steps")
    path = out or Path(cfg.workdir) / "samples.t2d"
    _write(path, numkit.tensor_to_bytes(traj.samples))
    setup = pipeline.eval_setup(ckpt.fp, cfg.eval_seed, cfg.sample_count)
    ed = energy_distance(traj.samples, setup.reference)
    print(f"{cfg.sample_count} samples from {cfg.sample_from} checkpoint, energy distance {ed:.6g} -> {path}")
    return path


@dataclass
class ReportRow:
    variant: str
    energy: float
    temporal: float
    layer_mse: list[float]


def report_text(rows: list[ReportRow]) -> tuple[str, str]:
    nl = max((len(r.layer_mse) for r in rows), default=0)
    head = ["variant", "energy_distance", "temporal_map_distance"] + [f"mse_layer{i}" for i in range(nl)]
    cells = [[r.variant, f"{r.energy:.6g}", f"{r.temporal:.6g}"] + [f"{m:.6g}" for m in r.layer_mse] for r in rows]
    tsv = "\n".join("\t".join(c) for c in [head] + cells) + "\n"
    widths = [max(len(c[i]) for c in [head] + cells) for i in range(len(head))]
    fmt = lambda c: "  ".join(x.ljust(w) for x, w in zip(c, widths)).rstrip()
    pretty = "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(c) for c in cells]) + "\n"
    return tsv, pretty


def _evaluate_row(name: str, model, fp, setup) -> ReportRow:
    if model is None:
        ev = pipeline.evaluate(fp.predict, fp, setup)
        return ReportRow(name, ev.energy, ev.temporal_distance, [0.0] * len(fp.weights))
    ev = pipeline.evaluate(model.predict, fp, setup)
    return ReportRow(name, ev.energy, ev.temporal_distance, pipeline.weight_mse(model))


def build_report(cfg: config.PipelineConfig) -> list[ReportRow]:
    order = cfg.ablation_rows
    workers = threads()
    if cfg.report_checkpoints:
        ckpts = [checkpoint.load(p) for p in config._names(cfg.report_checkpoints)]
        hashes = {c.teacher_hash for c in ckpts}
        if len(hashes) != 1:
            raise FormatError("incompatible checkpoints: they were built from different teachers")
        fp = ckpts[0].fp
        named = {}
        for c in ckpts:
            name = c.meta.get("variant", pipeline.FP if c.quant is None else "?")
            if name in named:
                raise FormatError(f"two checkpoints claim variant {name!r}")
            named[name] = c.quant
        named.setdefault(pipeline.FP, None)
        names = [n for n in order if n in named] + sorted(n for n in named if n not in order)
        setup = pipeline.eval_setup(fp, cfg.eval_seed, cfg.sample_count)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_evaluate_row, n, named[n], fp, setup) for n in names]
            return [f.result() for f in futs]

    fp = checkpoint.load(cfg.path("fp_checkpoint")).fp
    setup = pipeline.eval_setup(fp, cfg.eval_seed, cfg.sample_count)
    settings, train = _settings(cfg), _train_config(cfg)
    cache: dict = {}
    for search in sorted({pipeline.VARIANTS[n].search for n in order if n != pipeline.FP}):
        cache[search] = pipeline.quantize_model(fp, settings, cfg.seed, search, oolri=False)

    def job(name):
        if name == pipeline.FP:
            return _evaluate_row(name, None, fp, setup)
        model, _ = pipeline.run_variant(fp, pipeline.VARIANTS[name], settings, train, cfg.seed, cache)
        return _evaluate_row(name, model, fp, setup)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(job, n) for n in order]
        return [f.result() for f in futs]


def cmd_report(cfg: config.PipelineConfig, out: Path | None = None) -> Path:
    rows = build_report(cfg)
    tsv, pretty = report_text(rows)
    path = out or Path(cfg.workdir) / "report.tsv"
    _write(path, tsv)
    print(pretty, end="")
    print(f"report -> {path}")
    return path


COMMANDS = {
    "pretrain": cmd_pretrain,
    "quantize": cmd_quantize,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "report": cmd_report,
}


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpqdm2", description="Low-bit quantization pipeline for a toy diffusion model.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, type=Path, help="flat key = value configuration file")
    p.add_argument("--seed", type=_u64, default=None, help="override the configured seed")
    p.add_argument("--out", type=Path, default=None, help="primary output path")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = config.load(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        COMMANDS[args.command](cfg, args.out)
    except (ConfigError, ContractError, ColdMemoryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
