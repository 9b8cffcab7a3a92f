"""On-disk formats: tensors, named weights, masks, PGM images, run configs, datasets.

Tensor file (``.sst``)::

    "SSTF" | version u8 = 1 | dtype u8 (0 f32, 1 c64) | ndim u8 | pad u8
    | ndim x u64 LE dims | row-major LE payload

Weights file (``.ssw``)::

    "SSWF" | version u8 = 1 | u32 LE count
    | count x (u16 LE name length | UTF-8 name | tensor file body)
"""

from __future__ import annotations

import configparser
import io
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .exceptions import FormatError
from .mri import CoilSensitivities, MultiCoilKSpace, PairedMeasurement, SamplingMask
from .phantom import DatasetRecord

TENSOR_MAGIC = b"SSTF"
WEIGHTS_MAGIC = b"SSWF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<c8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.complex64): 1}
_MAX_BYTES = 1 << 40


def _canonical(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype in _CODES:
        return a
    if np.iscomplexobj(a):
        return a.astype(np.complex64)
    if a.dtype.kind in "fiub":
        return a.astype(np.float32)
    raise TypeError(f"cannot store dtype {a.dtype}")


def tensor_to_bytes(a) -> bytes:
    """Serialize to the tensor file layout; float arrays are stored as f32, complex as c64."""
    a = _canonical(a)
    if a.ndim > 255:
        raise ValueError("at most 255 dimensions")
    code = _CODES[a.dtype]
    head = TENSOR_MAGIC + struct.pack("<BBBB", VERSION, code, a.ndim, 0)
    dims = struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + dims + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; returns ``(array, end_offset)``."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"{source}: bad tensor magic")
    if len(buf) < offset + 8:
        raise FormatError(f"{source}: truncated tensor header")
    version, code, ndim, _ = struct.unpack_from("<BBBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported tensor version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    pos = offset + 8
    if len(buf) < pos + 8 * ndim:
        raise FormatError(f"{source}: truncated tensor dims")
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dtype = _DTYPES[code]
    count = 1
    for d in dims:
        count *= d
        if count * dtype.itemsize > _MAX_BYTES:
            raise FormatError(f"{source}: tensor dims {dims} overflow the size limit")
    nbytes = count * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"{source}: truncated payload ({len(buf) - pos} of {nbytes} bytes)")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    return data.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_tensor(path, a) -> None:
    Path(path).write_bytes(tensor_to_bytes(a))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    a, end = tensor_from_bytes(buf, 0, str(path))
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return a


def save_weights(path, named: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> None:
    """Write named tensors in order; a repeated name raises ``ValueError``."""
    items = list(named.items()) if isinstance(named, Mapping) else list(named)
    seen = set()
    out = io.BytesIO()
    out.write(WEIGHTS_MAGIC + struct.pack("<BI", VERSION, len(items)))
    for name, a in items:
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]!r}...")
        out.write(struct.pack("<H", len(raw)) + raw + tensor_to_bytes(a))
    Path(path).write_bytes(out.getvalue())


def load_weights(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    src = str(path)
    if buf[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{src}: bad weights magic")
    if len(buf) < 9:
        raise FormatError(f"{src}: truncated weights header")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise FormatError(f"{src}: unsupported weights version {version}")
    pos, out = 9, {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError(f"{src}: truncated tensor name")
        (n,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + n].decode("utf-8")
        if len(name.encode("utf-8")) != n:
            raise FormatError(f"{src}: truncated tensor name")
        if name in out:
            raise FormatError(f"{src}: duplicate tensor name {name!r}")
        out[name], pos = tensor_from_bytes(buf, pos + 2 + n, src)
    if pos != len(buf):
        raise FormatError(f"{src}: {len(buf) - pos} trailing bytes")
    return out


def export_pgm(img, path) -> None:
    """16-bit binary PGM, linearly scaled so that ``max(img)`` maps to 65535."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2D real image")
    if not np.all(np.isfinite(img)):
        raise ValueError("PGM export needs a finite image")
    peak = img.max()
    scaled = np.zeros(img.shape) if peak <= 0 else np.clip(img, 0, None) / peak * 65535.0
    samples = np.rint(scaled).astype(">u2")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + samples.tobytes())


def write_mask(path, mask: SamplingMask) -> None:
    """One line of ``0``/``1`` characters, one per column, then a newline."""
    Path(path).write_text(mask.to_text(), encoding="utf-8", newline="\n")


def read_mask(path, kind: str = "uniform") -> SamplingMask:
    """Inverse of :func:`write_mask`; the file does not record ``kind``."""
    try:
        return SamplingMask.from_text(Path(path).read_text(encoding="utf-8"), kind)
    except (FormatError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- run config

@dataclass(frozen=True)
class DataSection:
    n_train: int = 200
    n_test: int = 20
    height: int = 32
    width: int = 32
    n_coils: int = 4
    mask_kind: str = "random"
    test_mask_kind: str = "random"
    acceleration: int = 4
    acs: int = 4
    noise: float = 0.01
    keep_fraction: float = 0.7
    sub_acs: int = 2


@dataclass(frozen=True)
class BcnnSection:
    recursions: int = 10
    layers: int = 5
    filters: int = 32
    gamma2: float = 1.0
    prior_std: float = 1.0
    epochs: int = 200
    lr: float = 1e-4
    batch_size: int = 1
    data_term: str = "image"
    init_spread: float = 1e-3
    last_scale: float = 0.1
    n_centers: int = 8


@dataclass(frozen=True)
class ScoreSection:
    filters: int = 32
    blocks: int = 4
    sigma_min: float = 0.01
    sigma_max: float = 16.0
    n_levels: int = 32
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    ema_rate: float = 0.999
    ema_warmup: bool = False


@dataclass(frozen=True)
class SamplerSection:
    step_scale: float | None = None
    n_steps: int = 5
    data_sign: str = "gradient-correct"
    init: str = "gaussian"
    final_denoise: bool = False
    n_samples: int = 1


_SECTIONS = (("data", DataSection), ("bcnn", BcnnSection), ("score", ScoreSection),
             ("sampler", SamplerSection))


def _parse_value(kind, text: str, where: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == "float | None":
            return None if text.lower() in ("auto", "none") else float(text)
        return text
    except ValueError:
        raise FormatError(f"{where}: cannot parse {text!r}") from None


def _format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class RunConfig:
    """All pipeline hyperparameters; ``[section] key = value`` text on disk."""

    data: DataSection = field(default_factory=DataSection)
    bcnn: BcnnSection = field(default_factory=BcnnSection)
    score: ScoreSection = field(default_factory=ScoreSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                           comment_prefixes=("#",), strict=True)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise FormatError(f"{source}: {exc}") from None
        known = dict(_SECTIONS)
        unknown = set(parser.sections()) - set(known)
        if unknown:
            raise FormatError(f"{source}: unknown section(s) {sorted(unknown)}")
        parts = {}
        for name, section_cls in _SECTIONS:
            values = {}
            types = {f.name: f.type for f in fields(section_cls)}
            if parser.has_section(name):
                for key, raw in parser.items(name):
                    if key not in types:
                        raise FormatError(f"{source}: unknown key {key!r} in [{name}]")
                    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(types[key], types[key])
                    values[key] = _parse_value(kind, raw, f"{source} [{name}] {key}")
            parts[name] = section_cls(**values)
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))

    def to_text(self) -> str:
        lines = []
        for name, _ in _SECTIONS:
            section = getattr(self, name)
            lines.append(f"[{name}]")
            lines.extend(f"{f.name} = {_format_value(getattr(section, f.name))}" for f in fields(section))
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(score={"epochs": 3})`` replaces the named keys."""
        return replace(self, **{k: replace(getattr(self, k), **v) for k, v in sections.items()})


# ------------------------------------------------------------------ datasets

def save_dataset(root, records: list[DatasetRecord]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    noise = records[0].pair.y.noise_scale if records else 0.0
    kind = records[0].pair.y.mask.kind if records else "uniform"
    (root / "dataset.txt").write_text(f"count = {len(records)}\nnoise_scale = {noise!r}\nmask_kind = {kind}\n",
                                      encoding="utf-8", newline="\n")
    for i, rec in enumerate(records):
        d = root / f"record_{i:04d}"
        d.mkdir(exist_ok=True)
        write_tensor(d / "truth.sst", rec.truth)
        write_tensor(d / "sens.sst", rec.sens.maps)
        write_tensor(d / "y.sst", rec.pair.y.data)
        write_mask(d / "ymask.txt", rec.pair.y.mask)
        write_tensor(d / "ysub.sst", rec.pair.y_sub.data)
        write_mask(d / "submask.txt", rec.pair.submask)


def load_dataset(root) -> list[DatasetRecord]:
    root = Path(root)
    meta = root / "dataset.txt"
    if not meta.exists():
        raise FormatError(f"{root}: not a dataset directory (no dataset.txt)")
    info = {}
    for line in meta.read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition("=")
        info[key.strip()] = value.strip()
    count, noise = int(info["count"]), float(info["noise_scale"])
    kind = info.get("mask_kind", "uniform")
    records = []
    for i in range(count):
        d = root / f"record_{i:04d}"
        y = MultiCoilKSpace(read_tensor(d / "y.sst"), read_mask(d / "ymask.txt", kind), noise)
        ysub = MultiCoilKSpace(read_tensor(d / "ysub.sst"), read_mask(d / "submask.txt", "gaussian-pair"), noise)
        records.append(DatasetRecord(read_tensor(d / "truth.sst"), CoilSensitivities(read_tensor(d / "sens.sst")),
                                     PairedMeasurement(y, ysub, ysub.mask)))
    return records

