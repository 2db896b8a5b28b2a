import hashlib
import struct

import numpy as np
import pytest

from mpqdm2 import checkpoint, cli, config, pipeline
from mpqdm2.errors import ConfigError, FormatError
from mpqdm2.toydiff.model import pretrain_fp


def _same_quant(a, b):
    for la, lb in zip(a.layers, b.layers):
        sa, sb = la.state, lb.state
        assert la.trainable == lb.trainable
        assert np.array_equal(la.w, lb.w) and np.array_equal(la.b, lb.b)
        for name in ("bits", "modes", "scale", "zero_point", "l1", "l2", "act_scale", "act_zero"):
            assert np.array_equal(getattr(sa, name), getattr(sb, name)), name
        assert np.array_equal(sa.residual_steps()[0], sb.residual_steps()[0])
        assert np.array_equal(sa.scaling.delta, sb.scaling.delta)


# -- container ----------------------------------------------------------------------


def test_round_trip_quantized(searched):
    model = pipeline.with_oolri(searched.model)
    ck = checkpoint.Checkpoint(model.fp, model, {"variant": "full", "seed": 0})
    buf = checkpoint.to_bytes(ck)
    back = checkpoint.from_bytes(buf)
    assert back.fp.fingerprint() == model.fp.fingerprint()
    _same_quant(model, back.quant)
    assert back.meta["variant"] == "full"
    assert checkpoint.to_bytes(back) == buf
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.array_equal(model.predict(x, 3)[0], back.quant.predict(x, 3)[0])


def test_fp_only_round_trip():
    fp = pretrain_fp("two-moons", 3, iterations=5, batch=8).model
    back = checkpoint.from_bytes(checkpoint.to_bytes(checkpoint.Checkpoint(fp, None, {})))
    assert back.quant is None and back.fp.fingerprint() == fp.fingerprint()
    assert back.teacher_hash == fp.fingerprint()


@pytest.fixture(scope="module")
def fp_bytes():
    fp = pretrain_fp("two-moons", 3, iterations=5, batch=8).model
    return checkpoint.to_bytes(checkpoint.Checkpoint(fp, None, {"kind": "fp"}))


def test_bad_magic(fp_bytes):
    with pytest.raises(FormatError, match="magic"):
        checkpoint.from_bytes(b"XXXX" + fp_bytes[4:])


def test_newer_major_version(fp_bytes):
    buf = fp_bytes[:4] + struct.pack("<I", (checkpoint.VERSION_MAJOR + 1) << 16) + fp_bytes[8:]
    with pytest.raises(FormatError, match="version"):
        checkpoint.from_bytes(buf)


def test_newer_minor_version_accepted(fp_bytes):
    buf = fp_bytes[:4] + struct.pack("<I", (checkpoint.VERSION_MAJOR << 16) | 9) + fp_bytes[8:]
    assert checkpoint.from_bytes(buf).quant is None


@pytest.mark.parametrize("cut", [5, 10, 30, -1])
def test_truncation(fp_bytes, cut):
    with pytest.raises(FormatError):
        checkpoint.from_bytes(fp_bytes[:cut])


def test_unknown_tag(fp_bytes):
    with pytest.raises(FormatError, match="unknown"):
        checkpoint.from_bytes(fp_bytes + struct.pack("<IQ", 99, 0))


def test_tampered_weights_detected(fp_bytes):
    buf = bytearray(fp_bytes)
    buf[40] ^= 0xFF
    with pytest.raises(FormatError):
        checkpoint.from_bytes(bytes(buf))


def test_missing_file(tmp_path):
    with pytest.raises(FormatError, match="not found"):
        checkpoint.load(tmp_path / "none.mpq2")


# -- config --------------------------------------------------------------------------


def test_config_round_trip():
    cfg = config.PipelineConfig(seed=2**64 - 1, tau=0.05, ablation="FP,full")
    assert config.parse(config.emit(cfg)) == cfg
    assert config.emit(config.parse(config.emit(cfg))) == config.emit(cfg)


@pytest.mark.parametrize("text", [
    "nonsense = 1",
    "seed = -1",
    "weight_bits = 1",
    "tau = 0",
    "alpha = x",
    "seed = 1\nseed = 2",
    "ablation = full, full",
    "just words",
])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        config.parse(text)


def test_config_comments_and_defaults():
    cfg = config.parse("# header\n\nrank = 2  # trailing\n")
    assert cfg.rank == 2 and cfg.iterations == 2000


# -- CLI ---------------------------------------------------------------------------------


def _write_cfg(path, workdir, **extra):
    body = {
        "workdir": str(workdir),
        "pretrain_iterations": 150,
        "pretrain_batch": 64,
        "variant": "PTQ-only",
        "iterations": 25,
        "sample_count": 200,
        "calib_batches": 2,
        "ablation": "FP, PTQ-only",
    }
    body.update(extra)
    path.write_text("".join(f"{k} = {v}\n" for k, v in body.items()))
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "run.cfg", root / "w")
    for cmd in ("pretrain", "quantize", "finetune", "sample"):
        assert cli.main([cmd, "--config", str(cfg)]) == 0, cmd
    return root


def test_pipeline_outputs(run_dir):
    w = run_dir / "w"
    for name in ("fp.mpq2", "quant.mpq2", "quant.alloc.tsv", "finetuned.mpq2", "finetuned.log.tsv",
                 "finetuned.memory.txt", "samples.t2d"):
        assert (w / name).exists(), name
    ck = checkpoint.load(w / "finetuned.mpq2")
    assert ck.meta["kind"] == "finetuned" and ck.quant is not None
    cfg = config.load(run_dir / "run.cfg")
    expected = hashlib.sha256(config.emit(cfg).encode()).hexdigest()
    assert ck.meta["config_sha256"] == expected


def test_log_has_one_line_per_iteration(run_dir):
    lines = (run_dir / "w" / "finetuned.log.tsv").read_text().splitlines()
    assert len(lines) == 25
    assert [int(l.split("\t")[0]) for l in lines] == list(range(25))


def test_alloc_table_columns(run_dir):
    rows = [l.split("\t") for l in (run_dir / "w" / "quant.alloc.tsv").read_text().splitlines()]
    assert rows[0][:4] == ["layer", "channels", "groups", "bit_sum"]
    for r in rows[1:]:
        assert r[3] == r[4]  # bit sum meets the budget


def test_alpha_zero_mtrd_column_zero(run_dir, tmp_path):
    cfg = _write_cfg(tmp_path / "a0.cfg", run_dir / "w", alpha=0.0,
                     finetune_checkpoint=str(tmp_path / "a0.mpq2"))
    assert cli.main(["finetune", "--config", str(cfg)]) == 0
    lines = (tmp_path / "a0.log.tsv").read_text().splitlines()
    assert all(float(l.split("\t")[3]) == 0.0 for l in lines)


def test_rerun_is_byte_identical(run_dir, tmp_path):
    cfg = run_dir / "run.cfg"
    out = tmp_path / "again.mpq2"
    assert cli.main(["quantize", "--config", str(cfg), "--out", str(out)]) == 0
    assert out.read_bytes() == (run_dir / "w" / "quant.mpq2").read_bytes()


def test_report_rows_and_fp_mse(run_dir, tmp_path):
    cfg = _write_cfg(tmp_path / "r.cfg", run_dir / "w", ablation="PTQ-only, FP")
    out = tmp_path / "report.tsv"
    assert cli.main(["report", "--config", str(cfg), "--out", str(out)]) == 0
    rows = [l.split("\t") for l in out.read_text().splitlines()]
    assert [r[0] for r in rows[1:]] == ["PTQ-only", "FP"]
    assert all(float(v) == 0.0 for v in rows[2][3:])
    assert all(float(v) > 0.0 for v in rows[1][4:])


def test_report_from_checkpoints_orders_by_ablation(run_dir, tmp_path):
    w = run_dir / "w"
    cfg = _write_cfg(tmp_path / "r.cfg", w, report_checkpoints=f"{w / 'finetuned.mpq2'}, {w / 'fp.mpq2'}")
    out = tmp_path / "report.tsv"
    assert cli.main(["report", "--config", str(cfg), "--out", str(out)]) == 0
    assert [l.split("\t")[0] for l in out.read_text().splitlines()[1:]] == ["FP", "PTQ-only"]


def test_report_rejects_mixed_teachers(run_dir, tmp_path):
    other = tmp_path / "other.mpq2"
    fp = pretrain_fp("two-moons", 9, iterations=3, batch=8).model
    checkpoint.save(other, checkpoint.Checkpoint(fp, None, {"variant": "FP"}))
    cfg = _write_cfg(tmp_path / "r.cfg", run_dir / "w",
                     report_checkpoints=f"{run_dir / 'w' / 'finetuned.mpq2'}, {other}")
    assert cli.main(["report", "--config", str(cfg)]) == cli.EXIT_FORMAT


def test_exit_codes(run_dir, tmp_path, capsys):
    assert cli.main(["quantize", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.cfg"
    bad.write_text("weight_bits = 1\n")
    assert cli.main(["quantize", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["explode", "--config", str(bad)]) == cli.EXIT_CONFIG
    nockpt = _write_cfg(tmp_path / "n.cfg", tmp_path / "empty")
    assert cli.main(["finetune", "--config", str(nockpt)]) == cli.EXIT_FORMAT
    junk = tmp_path / "junk.mpq2"
    junk.write_bytes(b"JUNK" + bytes(20))
    cfg = _write_cfg(tmp_path / "j.cfg", tmp_path, quant_checkpoint=str(junk))
    assert cli.main(["finetune", "--config", str(cfg)]) == cli.EXIT_FORMAT
    assert cli.main(["sample", "--config", str(cfg), "--seed", "-3"]) == cli.EXIT_CONFIG


def test_seed_override(run_dir, tmp_path):
    cfg = run_dir / "run.cfg"
    a = tmp_path / "s1.mpq2"
    assert cli.main(["quantize", "--config", str(cfg), "--seed", "7", "--out", str(a)]) == 0
    assert checkpoint.load(a).meta["seed"] == 7


def test_threads_env(monkeypatch):
    monkeypatch.setenv("MPQDM2_THREADS", "3")
    assert cli.threads() == 3
    monkeypatch.setenv("MPQDM2_THREADS", "zero")
    with pytest.raises(ConfigError):
        cli.threads()
