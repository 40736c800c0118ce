"""Little-endian dataset/checkpoint containers, PGM mask export and metrics CSV.

MGRD (dataset)::

    "MGRD" | u16 version=1 | u16 reserved=0 | u32 sequences | u32 frames | u32 height | u32 width
    per sequence: frames as float32 CHW (frame-major), then masks as uint8 HW

MGWT (weights)::

    "MGWT" | u16 version=1 | u32 entries
    per entry: u16 name length | utf-8 name | u8 rank | u32 extents[rank] | float32 payload
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datagen import SequenceSample
from .model import ArchitectureConfig, ModelParams
from .tensor import Tensor

DATASET_MAGIC = b"MGRD"
CHECKPOINT_MAGIC = b"MGWT"
FORMAT_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sHHIIII")
_CHECKPOINT_HEADER = struct.Struct("<4sHI")

METRICS_HEADER = ("name", "strategy", "avg_iou", "avg_fps", "temporal_consistency")


class FormatError(ValueError):
    """Base class for container decoding errors."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CheckpointMismatchError(FormatError):
    """Checkpoint entries do not match the expected parameter set."""


# dataset ---------------------------------------------------------------------------


def dataset_nbytes(num_sequences: int, frames: int, height: int, width: int) -> int:
    return _DATASET_HEADER.size + num_sequences * frames * (3 * height * width * 4 + height * width)


def save_dataset(path: str | Path, samples: Sequence[SequenceSample]) -> None:
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    t, _, h, w = samples[0].frames.shape
    for s in samples:
        if s.frames.shape != (t, 3, h, w) or s.masks.shape != (t, 1, h, w):
            raise ValueError("all sequences must share frame count and geometry")
    with open(path, "wb") as fh:
        fh.write(_DATASET_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, 0, len(samples), t, h, w))
        for s in samples:
            fh.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.masks, dtype=np.uint8).tobytes())


def load_dataset(path: str | Path) -> list[SequenceSample]:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {DATASET_MAGIC!r}")
    if len(blob) < _DATASET_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated at {len(blob)} bytes")
    _, version, _, n, t, h, w = _DATASET_HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expected = dataset_nbytes(n, t, h, w)
    if len(blob) != expected:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes, header implies {expected}")
    frame_bytes = t * 3 * h * w * 4
    mask_bytes = t * h * w
    samples = []
    offset = _DATASET_HEADER.size
    for i in range(n):
        frames = np.frombuffer(blob, dtype="<f4", count=t * 3 * h * w, offset=offset).astype(np.float32)
        offset += frame_bytes
        masks = np.frombuffer(blob, dtype=np.uint8, count=t * h * w, offset=offset).copy()
        offset += mask_bytes
        samples.append(SequenceSample(frames.reshape(t, 3, h, w), masks.reshape(t, 1, h, w), seed=-1, index=i))
    return samples


# checkpoints --------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    parts = [_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(params))]
    for name, t in params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _read_entries(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < _CHECKPOINT_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, count = _CHECKPOINT_HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    offset = _CHECKPOINT_HEADER.size
    entries: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if offset + 4 * size > len(blob):
                raise TruncatedFileError(f"{path}: payload of {name!r} truncated")
            data = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).astype(np.float32).reshape(shape)
            offset += 4 * size
            if name in entries:
                raise CheckpointMismatchError(f"{path}: parameter {name!r} appears more than once")
            entries[name] = data
    except struct.error as exc:
        raise TruncatedFileError(f"{path}: truncated entry table") from exc
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return entries


def infer_architecture(entries: dict[str, np.ndarray], input_size: int | None = None) -> ArchitectureConfig:
    """Recover the architecture from parameter shapes; input size is not stored."""
    try:
        feature_channels = entries["lstm.gate_i.weight"].shape[1] - entries["lstm.gate_i.weight"].shape[0]
        memory_channels = entries["lstm.gate_i.weight"].shape[0]
        gate_kernel = entries["lstm.gate_i.weight"].shape[2]
    except KeyError as exc:
        raise CheckpointMismatchError(f"missing parameter {exc.args[0]!r}") from None
    stages = sum(1 for n in entries if n.startswith("decoder.deconv") and n.endswith(".weight"))
    downsample = 2**stages
    size = input_size or max(downsample, 64 // downsample * downsample)
    return ArchitectureConfig(size, feature_channels, memory_channels, downsample, gate_kernel)


def load_checkpoint(
    path: str | Path, arch: ArchitectureConfig | None = None, input_size: int | None = None
) -> ModelParams:
    entries = _read_entries(path)
    if arch is None:
        arch = infer_architecture(entries, input_size)
    expected = arch.param_shapes()
    missing = [n for n in expected if n not in entries]
    if missing:
        raise CheckpointMismatchError(f"{path}: missing parameter {missing[0]!r}")
    unknown = [n for n in entries if n not in expected]
    if unknown:
        raise CheckpointMismatchError(f"{path}: unknown parameter {unknown[0]!r}")
    tensors = {}
    for name, shape in expected.items():
        if entries[name].shape != shape:
            raise CheckpointMismatchError(f"{path}: {name!r} has shape {entries[name].shape}, expected {shape}")
        tensors[name] = Tensor(entries[name], requires_grad=True, dtype=np.float32)
    return ModelParams(arch, tensors)


# mask export / CSV --------------------------------------------------------------


def export_mask(pred: Tensor | np.ndarray, path: str | Path) -> None:
    """Binary PGM: 255 where p > 0.5, else 0."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    if p.ndim == 3:
        if p.shape[0] != 1:
            raise ValueError(f"expected a (1,H,W) probability map, got {p.shape}")
        p = p[0]
    h, w = p.shape
    pixels = np.where(p > 0.5, 255, 0).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def write_metrics_csv(rows: Iterable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row.name,
                    row.strategy,
                    f"{row.avg_iou:.4f}",
                    f"{row.avg_fps:.2f}",
                    f"{row.temporal_consistency:.4f}",
                ]
            )
