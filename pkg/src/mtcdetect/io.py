"""File formats: datasets, checkpoints, traces, curves and experiment configs.

Binary layouts (all integers unsigned 32-bit, all floats 64-bit, little-endian)

MTCDS1 dataset::

    b"MTCDS1" version N Lp M count flags
    per sample: labels (N bytes) | noise_var (f64) | B real plane, B imag plane
                (Lp*N each) | C real plane, C imag plane (Lp*Lp each)
                | Y planes (Lp*M each, only when flags bit 0 is set)

Matrix planes are stored row-major.  ``noise_var`` is part of every record
because the baseline detector needs it.

MTCHT1 checkpoint::

    b"MTCHT1" version layers d_model d_attn heads d_ff c_clip(f64)
    attend_self bn_momentum(f64) bn_eps(f64) Lp bn_updates(u64) tensor_count
    per tensor: name_len name(utf-8) rank dims... payload(f64 row-major)

Tensors are the learnable parameters followed by the BN running statistics,
named as in :func:`mtcdetect.transformer.parameter_shapes` and
:func:`mtcdetect.transformer.buffer_names`.
"""

from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, ParameterError
from .signal import Batch, SimulationSetup
from .training import EpochRecord, TrainConfig
from .transformer import HTConfig, HTParams, buffer_names, parameter_shapes

DATASET_MAGIC = b"MTCDS1"
CHECKPOINT_MAGIC = b"MTCHT1"
FORMAT_VERSION = 1
FLAG_HAS_Y = 1

_F8 = np.dtype("<f8")


def _planes(z: np.ndarray) -> bytes:
    z = np.asarray(z, dtype=complex)
    return np.ascontiguousarray(z.real, dtype=_F8).tobytes() + np.ascontiguousarray(z.imag, dtype=_F8).tobytes()


class _Reader:
    def __init__(self, stream: BinaryIO, what: str):
        self.stream = stream
        self.what = what

    def bytes(self, n: int) -> bytes:
        data = self.stream.read(n)
        if len(data) != n:
            raise FormatError(f"{self.what}: truncated file (wanted {n} bytes, got {len(data)})")
        return data

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.bytes(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def f64(self) -> float:
        return self.unpack("<d")[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.bytes(8 * count), dtype=_F8).astype(float)

    def complex(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        re = self.floats(n)
        im = self.floats(n)
        return (re + 1j * im).reshape(shape)

    def at_end(self) -> bool:
        return self.stream.read(1) == b""


def _check_magic(reader: _Reader, magic: bytes) -> None:
    found = reader.bytes(len(magic))
    if found != magic:
        raise FormatError(f"{reader.what}: bad magic {found!r}, expected {magic!r}")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{reader.what}: unsupported version {version}")


# ---------------------------------------------------------------- datasets


def write_dataset(path, batch: Batch, ys: Optional[list] = None) -> None:
    count = len(batch)
    _, lp, n = batch.B.shape if count else (0, batch.B.shape[1], batch.B.shape[2])
    flags = FLAG_HAS_Y if ys else 0
    if ys and len(ys) != count:
        raise ParameterError(f"got {len(ys)} received signals for {count} samples")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<6I", FORMAT_VERSION, n, lp, batch.m_antennas, count, flags))
        for i in range(count):
            fh.write(np.asarray(batch.labels[i], dtype=np.uint8).tobytes())
            fh.write(struct.pack("<d", float(batch.noise_var[i])))
            fh.write(_planes(batch.B[i]))
            fh.write(_planes(batch.C[i]))
            if flags & FLAG_HAS_Y:
                fh.write(_planes(ys[i]))


def read_dataset(path) -> tuple[Batch, list]:
    """Returns the stacked samples and the stored received signals (possibly empty)."""
    with open(path, "rb") as fh:
        r = _Reader(fh, str(path))
        _check_magic(r, DATASET_MAGIC)
        n, lp, m, count, flags = r.unpack("<5I")
        labels, noise, Bs, Cs, ys = [], [], [], [], []
        for _ in range(count):
            lab = np.frombuffer(r.bytes(n), dtype=np.uint8).copy()
            if lab.max(initial=0) > 1:
                raise FormatError(f"{path}: labels must be 0 or 1")
            labels.append(lab)
            noise.append(r.f64())
            Bs.append(r.complex((lp, n)))
            Cs.append(r.complex((lp, lp)))
            if flags & FLAG_HAS_Y:
                ys.append(r.complex((lp, m)))
        if not r.at_end():
            raise FormatError(f"{path}: trailing bytes after {count} samples")
    batch = Batch(
        B=np.array(Bs).reshape(count, lp, n),
        C=np.array(Cs).reshape(count, lp, lp),
        labels=np.array(labels, dtype=np.uint8).reshape(count, n),
        noise_var=np.array(noise, dtype=float),
        m_antennas=m,
    )
    return batch, ys


# ---------------------------------------------------------------- checkpoints


def write_checkpoint(path, params: HTParams) -> None:
    c = params.config
    entries = [(name, t.data) for name, t in params.tensors.items()]
    entries += [(name, params.buffers[name]) for name in buffer_names(c)]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<6I", FORMAT_VERSION, c.layers, c.d_model, c.d_attn, c.heads, c.d_ff))
        fh.write(struct.pack("<dIdd", c.c_clip, int(c.attend_self), c.bn_momentum, c.bn_eps))
        fh.write(struct.pack("<IQI", params.pilot_len, params.bn_updates, len(entries)))
        for name, data in entries:
            raw = name.encode("utf-8")
            data = np.asarray(data, dtype=_F8)
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<{1 + data.ndim}I", data.ndim, *data.shape))
            fh.write(np.ascontiguousarray(data).tobytes())


def read_checkpoint(path) -> HTParams:
    with open(path, "rb") as fh:
        r = _Reader(fh, str(path))
        _check_magic(r, CHECKPOINT_MAGIC)
        layers, d_model, d_attn, heads, d_ff = r.unpack("<5I")
        c_clip, attend_self, momentum, eps = r.unpack("<dIdd")
        lp, bn_updates, count = r.unpack("<IQI")
        try:
            config = HTConfig(layers=layers, d_model=d_model, d_attn=d_attn, heads=heads, d_ff=d_ff,
                              c_clip=c_clip, attend_self=bool(attend_self), bn_momentum=momentum, bn_eps=eps)
        except ParameterError as exc:
            raise FormatError(f"{path}: invalid model configuration: {exc}") from exc
        stored = {}
        for _ in range(count):
            name = r.bytes(r.u32()).decode("utf-8")
            rank = r.u32()
            shape = r.unpack(f"<{rank}I") if rank else ()
            stored[name] = r.floats(int(np.prod(shape))).reshape(shape)
        if not r.at_end():
            raise FormatError(f"{path}: trailing bytes after {count} tensors")
    shapes = parameter_shapes(config, lp)
    expected = set(shapes) | set(buffer_names(config))
    if set(stored) != expected:
        missing = sorted(expected - set(stored))[:3]
        extra = sorted(set(stored) - expected)[:3]
        raise FormatError(f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})")
    tensors = {name: Tensor(stored[name], requires_grad=True, name=name) for name in shapes}
    buffers = {name: stored[name] for name in buffer_names(config)}
    try:
        return HTParams(config, lp, tensors, buffers, bn_updates)
    except ParameterError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- text outputs


def write_trace(path, trace) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(f"{rec.epoch}\t{rec.mean_loss!r}\t{rec.lr!r}\n")


def read_trace(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                out.append(EpochRecord(int(parts[0]), float(parts[1]), float(parts[2])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_curve(path, curve) -> None:
    with open(path, "w") as fh:
        fh.write("xi\tpm\tpf\n")
        for xi, pm, pf in curve.rows():
            fh.write(f"{xi!r}\t{pm!r}\t{pf!r}\n")


def read_curve(path):
    from .evaluation import RocCurve

    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != "xi\tpm\tpf":
            raise FormatError(f"{path}: unexpected curve header {header!r}")
        try:
            rows = [tuple(float(v) for v in line.split("\t")) for line in fh if line.strip()]
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    return RocCurve(xi=arr[:, 0], pm=arr[:, 1], pf=arr[:, 2])


# ---------------------------------------------------------------- experiment config


@dataclass
class EvalConfig:
    test_samples: int = 5000
    thresholds: Optional[list] = None  # None: exact empirical grid
    cd_passes: int = 10
    bench_reps: int = 1
    bench_warmup: int = 3


@dataclass
class ExperimentConfig:
    scenario: SimulationSetup = field(default_factory=SimulationSetup)
    model: HTConfig = field(default_factory=HTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data_seed: int = 1
    test_seed: int = 2

    SECTIONS = ("scenario", "model", "train", "eval")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section in self.SECTIONS:
            obj = getattr(self, section)
            cp[section] = {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)}
        cp["seeds"] = {"data_seed": str(self.data_seed), "test_seed": str(self.test_seed)}
        import io as _io

        buf = _io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise FormatError(f"config: {exc}") from exc
        cfg = cls()
        known = set(cls.SECTIONS) | {"seeds"}
        unknown = [s for s in cp.sections() if s not in known]
        if unknown:
            raise FormatError(f"config: unknown section(s) {unknown}")
        for section in cls.SECTIONS:
            if section in cp:
                current = getattr(cfg, section)
                setattr(cfg, section, _apply(current, dict(cp[section]), section))
        if "seeds" in cp:
            for key, value in cp["seeds"].items():
                if key not in ("data_seed", "test_seed"):
                    raise FormatError(f"config: unknown key seeds.{key}")
                setattr(cfg, key, _parse_int(value, f"seeds.{key}"))
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_int(text: str, key: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise FormatError(f"config: {key} must be an integer, got {text!r}") from exc


def _parse_like(default, text: str, key: str, annotation):
    text = text.strip()
    try:
        if isinstance(default, bool) or annotation == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int) and not isinstance(default, bool) or annotation == "int":
            return int(text)
        if isinstance(default, float) or annotation == "float":
            return float(text)
        if isinstance(default, list) or "list" in str(annotation):
            if text.lower() == "none":
                return None
            return [float(v) if "." in v or "e" in v.lower() else int(v) for v in
                    (s.strip() for s in text.split(",")) if v]
        return text
    except ValueError as exc:
        raise FormatError(f"config: cannot parse {key} = {text!r}") from exc


def _apply(obj, values: dict, section: str):
    known = {f.name: f for f in fields(obj)}
    kwargs = {name: getattr(obj, name) for name in known}
    for key, text in values.items():
        if key not in known:
            raise FormatError(f"config: unknown key {section}.{key}")
        kwargs[key] = _parse_like(kwargs[key], text, f"{section}.{key}", known[key].type)
    try:
        return type(obj)(**kwargs)
    except ParameterError as exc:
        raise FormatError(f"config: {exc}") from exc
