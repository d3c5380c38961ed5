"""Synthetic multimodal datasets, the MVCL1 feature-file format, batching.

File layout (little-endian, no padding):

    magic  "MVCL1\\n"                       6 bytes
    u32    N                               record count
    u32x6  L_t, d_t, L_a, d_a, L_v, d_v    per-modality sequence shape
    u8     task                            0 = classification, 1 = regression
    u32    C                               class count (0 for regression)
    u8     multi_task                      0 / 1
    N records, each:
        f32 y_t, y_a, y_v                  only when multi_task = 1
        f32 y
        f32[L_t*d_t], f32[L_a*d_a], f32[L_v*d_v]   row-major feature matrices

Features are stored as float32; the synthetic generator quantizes through
float32 at generation time so a write/read cycle is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .encoders import MODALITIES
from .errors import ConfigError
from .rng import RngState
from .tensor import Tensor

MAGIC = b"MVCL1\n"

TASK_CODES = {"classification": 0, "regression": 1}
TASK_NAMES = {v: k for k, v in TASK_CODES.items()}


class DatasetFormatError(Exception):
    """Base class for feature-file format violations."""


class BadMagicError(DatasetFormatError):
    """The file does not start with the MVCL1 magic bytes."""


class TruncatedFileError(DatasetFormatError):
    """The file ends mid-header or mid-record."""

    def __init__(self, record_index: int | None):
        where = "header" if record_index is None else f"record {record_index}"
        super().__init__(f"file truncated in {where}")
        self.record_index = record_index


class ShapeMismatchError(DatasetFormatError):
    """Record shapes or counts disagree with the header."""


@dataclass(frozen=True)
class DatasetHeader:
    n: int
    dims: Mapping[str, tuple[int, int]]  # modality -> (L, d)
    task: str
    num_classes: int
    multi_task: bool

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("dataset must contain at least one record")
        if set(self.dims) != set(MODALITIES):
            raise ConfigError(f"dims must cover exactly {MODALITIES}")
        for length, width in self.dims.values():
            if length < 1 or width < 1:
                raise ConfigError("sequence lengths and widths must be >= 1")
        if self.task not in TASK_CODES:
            raise ConfigError(f"unknown task kind {self.task!r}")
        if self.task == "classification" and self.num_classes < 2:
            raise ConfigError("classification requires at least 2 classes")
        if self.task == "regression" and self.num_classes != 0:
            raise ConfigError("regression headers carry a class count of 0")


@dataclass
class SampleRecord:
    x_t: np.ndarray
    x_a: np.ndarray
    x_v: np.ndarray
    y: float
    y_t: float | None = None
    y_a: float | None = None
    y_v: float | None = None

    def features(self, m: str) -> np.ndarray:
        return {"t": self.x_t, "a": self.x_a, "v": self.x_v}[m]

    def modality_label(self, m: str) -> float | None:
        return {"t": self.y_t, "a": self.y_a, "v": self.y_v}[m]


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic class-structured generator.

    ``consistency`` is the probability that a modality's latent class
    agrees with the sample's overall label; disagreeing modalities pick a
    different class uniformly. With ``task='regression'`` the latent
    classes map onto evenly spaced scores in [-1, 1].
    """

    classes: int = 2
    train_samples: int = 600
    val_samples: int = 200
    test_samples: int = 200
    dims: Mapping[str, tuple[int, int]] = field(
        default_factory=lambda: {"t": (6, 12), "a": (4, 8), "v": (5, 10)}
    )
    mean_scale: float = 1.0
    noise_scale: float = 0.1
    consistency: float = 1.0
    task: str = "regression"
    multi_task: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("synthetic data needs at least 2 classes")
        if not 0.0 <= self.consistency <= 1.0:
            raise ConfigError("consistency must lie in [0, 1]")
        if self.noise_scale < 0.0:
            raise ConfigError("noise scale must be non-negative")
        if min(self.train_samples, self.val_samples, self.test_samples) < 1:
            raise ConfigError("every split needs at least one sample")
        if set(self.dims) != set(MODALITIES):
            raise ConfigError(f"dims must cover exactly {MODALITIES}")
        if self.task not in TASK_CODES:
            raise ConfigError(f"unknown task kind {self.task!r}")

    def header(self, split: str) -> DatasetHeader:
        counts = {"train": self.train_samples, "val": self.val_samples,
                  "test": self.test_samples}
        return DatasetHeader(
            n=counts[split],
            dims=dict(self.dims),
            task=self.task,
            num_classes=self.classes if self.task == "classification" else 0,
            multi_task=self.multi_task,
        )


def class_scores(num_classes: int) -> np.ndarray:
    """Evenly spaced regression scores for latent classes, f32-exact."""
    return np.linspace(-1.0, 1.0, num_classes).astype(np.float32).astype(np.float64)


@dataclass
class SyntheticDataset:
    config: SynthConfig
    train: list[SampleRecord]
    val: list[SampleRecord]
    test: list[SampleRecord]

    def split(self, name: str) -> list[SampleRecord]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def _quantize(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def generate_synthetic(cfg: SynthConfig) -> SyntheticDataset:
    """Deterministically generate class-structured multimodal records.

    Each class and modality owns a fixed mean vector; a sample's modality
    sequence is that mean broadcast over the sequence length plus i.i.d.
    noise. The same seed always produces byte-identical datasets.
    """
    root = RngState(cfg.seed)
    mean_gen = root.split("class-means").generator()
    means = {
        c: {m: mean_gen.normal(0.0, cfg.mean_scale, size=cfg.dims[m][1]) for m in MODALITIES}
        for c in range(cfg.classes)
    }
    scores = class_scores(cfg.classes)

    def build_split(name: str, count: int) -> list[SampleRecord]:
        gen = root.split(f"split:{name}").generator()
        records = []
        for _ in range(count):
            label_class = int(gen.integers(cfg.classes))
            latent = {}
            for m in MODALITIES:
                if gen.uniform() < cfg.consistency:
                    latent[m] = label_class
                else:
                    latent[m] = int((label_class + 1 + gen.integers(cfg.classes - 1)) % cfg.classes)
            feats = {}
            for m in MODALITIES:
                length, width = cfg.dims[m]
                noise = gen.normal(0.0, cfg.noise_scale, size=(length, width)) \
                    if cfg.noise_scale > 0 else np.zeros((length, width))
                feats[m] = _quantize(means[latent[m]][m][None, :] + noise)
            if cfg.task == "regression":
                y = float(scores[label_class])
                y_mod = {m: float(scores[latent[m]]) for m in MODALITIES}
            else:
                y = float(label_class)
                y_mod = {m: float(latent[m]) for m in MODALITIES}
            records.append(SampleRecord(
                x_t=feats["t"], x_a=feats["a"], x_v=feats["v"], y=y,
                y_t=y_mod["t"] if cfg.multi_task else None,
                y_a=y_mod["a"] if cfg.multi_task else None,
                y_v=y_mod["v"] if cfg.multi_task else None,
            ))
        return records

    return SyntheticDataset(
        config=cfg,
        train=build_split("train", cfg.train_samples),
        val=build_split("val", cfg.val_samples),
        test=build_split("test", cfg.test_samples),
    )


def write_dataset(path, header: DatasetHeader, records: list[SampleRecord]) -> None:
    """Write records in MVCL1 format; validates shapes before touching disk."""
    if len(records) != header.n:
        raise ShapeMismatchError(f"header says {header.n} records, got {len(records)}")
    for i, rec in enumerate(records):
        for m in MODALITIES:
            expected = header.dims[m]
            if rec.features(m).shape != expected:
                raise ShapeMismatchError(
                    f"record {i} modality {m!r} has shape {rec.features(m).shape}, "
                    f"expected {expected}"
                )
        if header.multi_task and any(rec.modality_label(m) is None for m in MODALITIES):
            raise ShapeMismatchError(f"record {i} lacks per-modality labels")
    chunks = [MAGIC, struct.pack("<I", header.n)]
    for m in MODALITIES:
        chunks.append(struct.pack("<II", *header.dims[m]))
    chunks.append(struct.pack("<BIB", TASK_CODES[header.task], header.num_classes,
                              int(header.multi_task)))
    for rec in records:
        if header.multi_task:
            chunks.append(struct.pack("<fff", rec.y_t, rec.y_a, rec.y_v))
        chunks.append(struct.pack("<f", rec.y))
        for m in MODALITIES:
            chunks.append(np.ascontiguousarray(rec.features(m), dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


_HEADER_TAIL = struct.Struct("<IIIIIIIBIB")  # N, 3x(L, d), task, C, multi


def read_dataset(path) -> tuple[DatasetHeader, list[SampleRecord]]:
    """Read an MVCL1 file; the inverse of write_dataset, bit-exact."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not an MVCL1 file")
    offset = len(MAGIC)
    if len(blob) < offset + _HEADER_TAIL.size:
        raise TruncatedFileError(None)
    fields = _HEADER_TAIL.unpack_from(blob, offset)
    offset += _HEADER_TAIL.size
    n = fields[0]
    dims = {m: (fields[1 + 2 * i], fields[2 + 2 * i]) for i, m in enumerate(MODALITIES)}
    task_code, num_classes, multi = fields[7], fields[8], fields[9]
    if task_code not in TASK_NAMES:
        raise ShapeMismatchError(f"unknown task code {task_code}")
    header = DatasetHeader(n=n, dims=dims, task=TASK_NAMES[task_code],
                           num_classes=num_classes, multi_task=bool(multi))
    label_bytes = (3 * 4 if header.multi_task else 0) + 4
    feat_counts = {m: dims[m][0] * dims[m][1] for m in MODALITIES}
    record_bytes = label_bytes + 4 * sum(feat_counts.values())
    records = []
    for i in range(n):
        if len(blob) < offset + record_bytes:
            raise TruncatedFileError(i)
        y_mod = {}
        if header.multi_task:
            vals = struct.unpack_from("<fff", blob, offset)
            offset += 12
            y_mod = dict(zip(MODALITIES, (float(v) for v in vals)))
        (y,) = struct.unpack_from("<f", blob, offset)
        offset += 4
        feats = {}
        for m in MODALITIES:
            count = feat_counts[m]
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            feats[m] = arr.astype(np.float64).reshape(dims[m])
            offset += 4 * count
        records.append(SampleRecord(
            x_t=feats["t"], x_a=feats["a"], x_v=feats["v"], y=float(y),
            y_t=y_mod.get("t"), y_a=y_mod.get("a"), y_v=y_mod.get("v"),
        ))
    if offset != len(blob):
        raise ShapeMismatchError(f"{len(blob) - offset} unexpected trailing bytes")
    return header, records


@dataclass
class Batch:
    """Stacked per-modality tensors plus label arrays for one step."""

    x: dict[str, Tensor]  # modality -> [B, L, d]
    y: np.ndarray  # [B]
    y_mod: dict[str, np.ndarray] | None
    indices: np.ndarray  # positions into the source record list

    @property
    def size(self) -> int:
        return int(self.y.shape[0])


def make_batches(records: list[SampleRecord], batch_size: int,
                 rng: RngState | None = None, *, training: bool) -> list[Batch]:
    """Split records into batches.

    Training mode shuffles with the given rng and drops a short final batch
    (contrastive losses degenerate on tiny remainders); evaluation mode
    keeps the natural order and the remainder, so every record appears
    exactly once.
    """
    n = len(records)
    if training:
        if batch_size < 2:
            raise ConfigError("contrastive training needs batch_size >= 2")
        if rng is None:
            raise ConfigError("training batches require an rng for the shuffle")
        order = rng.generator().permutation(n)
        limit = (n // batch_size) * batch_size
        order = order[:limit]
    else:
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        order = np.arange(n)
    multi = n > 0 and records[0].y_t is not None
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if len(idx) == 0:
            break
        x = {m: Tensor(np.stack([records[i].features(m) for i in idx]))
             for m in MODALITIES}
        y = np.array([records[i].y for i in idx], dtype=np.float64)
        y_mod = None
        if multi:
            y_mod = {m: np.array([records[i].modality_label(m) for i in idx],
                                 dtype=np.float64) for m in MODALITIES}
        batches.append(Batch(x=x, y=y, y_mod=y_mod, indices=np.asarray(idx)))
    return batches
