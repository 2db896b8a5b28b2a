"""MPQ2 checkpoint container.

Layout (little-endian)::

    "MPQ2" | u32 version (major << 16 | minor)
    repeated: u32 tag | u64 payload length | payload

Tags: FP_WEIGHTS, QUANT_STATE, ADAPTERS, ACT_QUANT, SCHEDULE and META
(UTF-8 JSON with sorted keys).  Matrices inside payloads are T2D1 blocks,
scalars are f64 unless noted.  Readers reject a higher major version.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkit
from .errors import FormatError
from .quantizer import MODE_CODES, ChannelScaling, ChannelSpec, LayerQuantState
from .toydiff.model import Schedule, ToyDiffusionModel
from .toydiff.quant import QuantLayer, QuantModel

MAGIC = b"MPQ2"
VERSION_MAJOR = 1
VERSION_MINOR = 0

FP_WEIGHTS = 1
QUANT_STATE = 2
ADAPTERS = 3
ACT_QUANT = 4
SCHEDULE = 5
META = 6
TAG_NAMES = {FP_WEIGHTS: "FP_WEIGHTS", QUANT_STATE: "QUANT_STATE", ADAPTERS: "ADAPTERS",
             ACT_QUANT: "ACT_QUANT", SCHEDULE: "SCHEDULE", META: "META"}

_MODE_NAMES = {v: k for k, v in MODE_CODES.items()}


@dataclass
class Checkpoint:
    fp: ToyDiffusionModel
    quant: QuantModel | None = None
    meta: dict = field(default_factory=dict)

    @property
    def teacher_hash(self) -> str:
        return self.fp.fingerprint()


# ---------------------------------------------------------------------------
# low-level readers
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError(f"truncated {self.what} section")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out if len(out) > 1 else out[0]

    def tensor(self) -> np.ndarray:
        try:
            a, self.pos = numkit.tensor_from_bytes(self.buf, self.pos)
        except FormatError as exc:
            raise FormatError(f"{self.what}: {exc}") from None
        return a

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes in {self.what} section")


def _vec(a) -> bytes:
    return numkit.tensor_to_bytes(np.asarray(a, dtype=np.float64).reshape(1, -1))


# ---------------------------------------------------------------------------
# section encoders / decoders
# ---------------------------------------------------------------------------


def _enc_fp(model: ToyDiffusionModel) -> bytes:
    out = [struct.pack("<I", len(model.weights))]
    for w, b in zip(model.weights, model.biases):
        out.append(numkit.tensor_to_bytes(w))
        out.append(_vec(b))
    return b"".join(out)


def _dec_fp(buf: bytes):
    r = _Reader(buf, "FP_WEIGHTS")
    n = r.take("<I")
    weights, biases = [], []
    for _ in range(n):
        weights.append(r.tensor())
        biases.append(r.tensor().ravel())
    r.done()
    return weights, biases


def _enc_schedule(s: Schedule, emb_dim: int) -> bytes:
    return struct.pack("<II", s.steps, emb_dim) + np.asarray(s.betas, dtype="<f8").tobytes()


def _dec_schedule(buf: bytes):
    r = _Reader(buf, "SCHEDULE")
    steps, emb = r.take("<II")
    betas = np.array([r.take("<d") for _ in range(steps)], dtype=np.float64)
    r.done()
    return Schedule(betas), emb


def _enc_quant(model: QuantModel) -> bytes:
    out = [struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        st = layer.state
        out.append(struct.pack("<BIII", int(layer.trainable), st.base_bits, st.act_bits, st.channels))
        out.append(_vec(st.scaling.delta))
        for spec in st.specs():
            out.append(struct.pack("<BBdd", spec.bits, MODE_CODES[spec.mode], spec.scale, spec.zero_point))
            if spec.tiers >= 1:
                out.append(struct.pack("<d", spec.delta_res))
            if spec.tiers == 2:
                out.append(struct.pack("<d", spec.delta_res2))
    return b"".join(out)


def _dec_quant(buf: bytes):
    r = _Reader(buf, "QUANT_STATE")
    layers = []
    for _ in range(r.take("<I")):
        trainable, base_bits, act_bits, c = r.take("<BIII")
        delta = r.tensor().ravel()
        if len(delta) != c:
            raise FormatError("QUANT_STATE: scaling length does not match channel count")
        specs = []
        for _ in range(c):
            bits, mode, s, z = r.take("<BBdd")
            tiers = bits - base_bits
            if mode not in _MODE_NAMES or not 0 <= tiers <= 2:
                raise FormatError(f"QUANT_STATE: bad channel record (bits={bits}, mode={mode})")
            d1 = r.take("<d") if tiers >= 1 else None
            d2 = r.take("<d") if tiers == 2 else None
            specs.append(ChannelSpec(bits, _MODE_NAMES[mode], s, z, d1, d2))
        try:
            scaling = ChannelScaling(delta)
        except ValueError as exc:
            raise FormatError(f"QUANT_STATE: {exc}") from None
        layers.append((bool(trainable), base_bits, act_bits, scaling, specs))
    r.done()
    return layers


def _enc_adapters(model: QuantModel) -> bytes:
    out = [struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        out.append(numkit.tensor_to_bytes(layer.state.l1))
        out.append(numkit.tensor_to_bytes(layer.state.l2))
    return b"".join(out)


def _dec_adapters(buf: bytes):
    r = _Reader(buf, "ADAPTERS")
    out = [(r.tensor(), r.tensor()) for _ in range(r.take("<I"))]
    r.done()
    return out


def _enc_act(model: QuantModel) -> bytes:
    out = [struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        st = layer.state
        out.append(struct.pack("<I", len(st.act_scale)))
        out.append(np.asarray(st.act_scale, dtype="<f8").tobytes())
        out.append(np.asarray(st.act_zero, dtype="<f8").tobytes())
    return b"".join(out)


def _dec_act(buf: bytes):
    r = _Reader(buf, "ACT_QUANT")
    out = []
    for _ in range(r.take("<I")):
        T = r.take("<I")
        s = np.array([r.take("<d") for _ in range(T)])
        z = np.array([r.take("<d") for _ in range(T)])
        out.append((s, z))
    r.done()
    return out


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta)
    meta["dataset"] = ckpt.fp.dataset
    meta["teacher_hash"] = ckpt.teacher_hash
    sections = [
        (FP_WEIGHTS, _enc_fp(ckpt.fp)),
        (SCHEDULE, _enc_schedule(ckpt.fp.schedule, ckpt.fp.emb_dim)),
    ]
    if ckpt.quant is not None:
        sections += [
            (QUANT_STATE, _enc_quant(ckpt.quant)),
            (ADAPTERS, _enc_adapters(ckpt.quant)),
            (ACT_QUANT, _enc_act(ckpt.quant)),
        ]
    sections.append((META, json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")))
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", (VERSION_MAJOR << 16) | VERSION_MINOR))
    for tag, payload in sections:
        out.write(struct.pack("<IQ", tag, len(payload)))
        out.write(payload)
    return out.getvalue()


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("not an MPQ2 checkpoint (bad magic)")
    version = struct.unpack_from("<I", buf, 4)[0]
    if version >> 16 > VERSION_MAJOR:
        raise FormatError(f"checkpoint major version {version >> 16} is newer than supported {VERSION_MAJOR}")
    pos, sections = 8, {}
    while pos < len(buf):
        if pos + 12 > len(buf):
            raise FormatError("truncated section header")
        tag, length = struct.unpack_from("<IQ", buf, pos)
        pos += 12
        if pos + length > len(buf):
            raise FormatError(f"truncated {TAG_NAMES.get(tag, tag)} section")
        if tag not in TAG_NAMES:
            raise FormatError(f"unknown section tag {tag}")
        if tag in sections:
            raise FormatError(f"duplicate {TAG_NAMES[tag]} section")
        sections[tag] = buf[pos : pos + length]
        pos += length
    for tag in (FP_WEIGHTS, SCHEDULE, META):
        if tag not in sections:
            raise FormatError(f"missing {TAG_NAMES[tag]} section")
    try:
        meta = json.loads(sections[META].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"META section is not valid JSON: {exc}") from None
    weights, biases = _dec_fp(sections[FP_WEIGHTS])
    schedule, emb = _dec_schedule(sections[SCHEDULE])
    fp = ToyDiffusionModel(weights, biases, schedule, meta.get("dataset", "two-moons"), emb)
    quant = None
    qsecs = [t in sections for t in (QUANT_STATE, ADAPTERS, ACT_QUANT)]
    if any(qsecs):
        if not all(qsecs):
            raise FormatError("quantized checkpoint needs QUANT_STATE, ADAPTERS and ACT_QUANT together")
        quant = _build_quant(fp, _dec_quant(sections[QUANT_STATE]), _dec_adapters(sections[ADAPTERS]),
                             _dec_act(sections[ACT_QUANT]))
    if meta.get("teacher_hash") not in (None, fp.fingerprint()):
        raise FormatError("teacher hash in META does not match the stored FP weights")
    return Checkpoint(fp, quant, meta)


def _build_quant(fp: ToyDiffusionModel, qstate, adapters, acts) -> QuantModel:
    if not len(qstate) == len(adapters) == len(acts) == len(fp.weights):
        raise FormatError("layer counts disagree between sections")
    layers = []
    for i, ((trainable, base_bits, act_bits, scaling, specs), (l1, l2), (s, z)) in enumerate(
        zip(qstate, adapters, acts)
    ):
        w = fp.weights[i]
        if len(specs) != w.shape[1] or l1.shape[0] != w.shape[0] or l2.shape[1] != w.shape[1]:
            raise FormatError(f"layer {i}: quantizer/adapter shapes do not match the FP weight")
        if len(s) != fp.timesteps:
            raise FormatError(f"layer {i}: activation parameters for {len(s)} timesteps, expected {fp.timesteps}")
        st = LayerQuantState.from_specs(specs, scaling, w.shape[0], l1.shape[1], act_bits, fp.timesteps)
        if st.base_bits != base_bits:
            raise FormatError(f"layer {i}: inconsistent base bit width")
        st.l1, st.l2 = l1, l2
        st.act_scale, st.act_zero = s, z
        layers.append(QuantLayer(w, fp.biases[i], st, trainable))
    return QuantModel(fp, layers)


def save(path, ckpt: Checkpoint) -> bytes:
    data = to_bytes(ckpt)
    Path(path).write_bytes(data)
    return data


def load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}") from None
    return from_bytes(data)
