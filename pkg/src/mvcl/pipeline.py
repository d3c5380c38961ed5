"""Four-phase training orchestration with freeze/finetune semantics.

Phase 1 trains each modality's encoder + projection head with the
supervised contrastive loss, independently per modality. Phase 2 freezes
the encoders and trains the cross-modal refiner (plus per-modality
projection heads) with the paired-view contrastive loss. Phase 3 freezes
everything upstream and trains the fusion module with a fresh projection
head, again supervised-contrastively. The classifier phase fits output
heads: unimodal heads on frozen pooled representations, the multimodal
head with every upstream parameter unfrozen and finetuned.

Projection heads are kept in checkpoints for reproducibility but are never
part of any downstream forward path.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .crossmodal import REFINED_MEMBERS, VIEW_PAIRS, CrossModalRefiner, FusionModule
from .data import Batch, DatasetHeader, SampleRecord, make_batches
from .encoders import MODALITIES, EncoderBank, EncoderConfig, ProjectionHead
from .errors import ConfigError
from .losses import (
    ClassifierHead,
    ContrastiveConfig,
    ce_loss,
    contrastive_classes,
    mse_loss,
    sscl_total,
    supcon_loss,
)
from .metrics import MetricReport, acc2_f1, mae, pearson
from .nn import Module
from .rng import RngState
from .tensor import NonFiniteError, Tensor, mean_pool, reshape, stack

CHECKPOINT_MAGIC = b"MVCK1\n"
CHECKPOINT_VERSION = 1

STAGE_IDS = {"stage1": 1, "stage2": 2, "stage3": 3, "classifier": 4}

# Declarative staging contract: which parameter groups train, which stay
# frozen, and which loss drives each phase.
STAGE_CONTRACTS = {
    "stage1": {
        "trainable": ("encoders", "stage1_heads"),
        "frozen": (),
        "loss": "supervised_contrastive",
    },
    "stage2": {
        "trainable": ("refiner", "stage2_heads"),
        "frozen": ("encoders", "stage1_heads"),
        "loss": "paired_view_contrastive",
    },
    "stage3": {
        "trainable": ("fusion", "stage3_head"),
        "frozen": ("encoders", "stage1_heads", "refiner", "stage2_heads"),
        "loss": "supervised_contrastive",
    },
    "classifier_unimodal": {
        "trainable": ("unimodal_heads",),
        "frozen": ("encoders", "stage1_heads", "refiner", "stage2_heads",
                   "fusion", "stage3_head"),
        "loss": "task",
    },
    "classifier_multimodal": {
        "trainable": ("multimodal_head", "encoders", "refiner", "fusion"),
        "frozen": ("stage1_heads", "stage2_heads", "stage3_head"),
        "loss": "task",
    },
}


class MissingCheckpointError(Exception):
    """A stage was started without the checkpoint it builds on."""


class CheckpointFormatError(Exception):
    """A checkpoint file is corrupt, truncated, or malformed."""


class CheckpointVersionError(CheckpointFormatError):
    """The checkpoint format version is not supported."""


class FingerprintMismatchError(Exception):
    """The checkpoint was produced under a different model configuration."""


@dataclass
class ModelConfig:
    """Everything that determines parameter shapes, hence the fingerprint."""

    input_dims: dict[str, int]
    seq_lens: dict[str, int]
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    proj_dim: int = 32
    classifier_hidden: int = 64
    temperature: float = 0.2
    task: str = "regression"
    num_classes: int = 0

    MODEL_PRESETS = {
        "desk": dict(model_dim=64, num_layers=2, num_heads=4, ffn_dim=128,
                     proj_dim=32, classifier_hidden=64, temperature=0.2),
        "paper": dict(model_dim=512, num_layers=2, num_heads=8, ffn_dim=2048,
                      proj_dim=256, classifier_hidden=512, temperature=0.2),
    }

    @classmethod
    def for_preset(cls, preset: str, header: DatasetHeader,
                   overrides: Mapping[str, object] | None = None) -> "ModelConfig":
        if preset not in cls.MODEL_PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        values = dict(cls.MODEL_PRESETS[preset])
        for key, val in (overrides or {}).items():
            if key not in values:
                raise ConfigError(f"unknown model override {key!r}")
            values[key] = val
        return cls(
            input_dims={m: header.dims[m][1] for m in MODALITIES},
            seq_lens={m: header.dims[m][0] for m in MODALITIES},
            task=header.task,
            num_classes=header.num_classes,
            **values,
        )

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.task == "classification" else 1

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_dims=self.input_dims, seq_lens=self.seq_lens,
            model_dim=self.model_dim, num_layers=self.num_layers,
            num_heads=self.num_heads, ffn_dim=self.ffn_dim,
        )

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(temperature=self.temperature)

    def fingerprint(self) -> bytes:
        canonical = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(canonical.encode()).digest()


@dataclass(frozen=True)
class StageSettings:
    epochs: int
    lr: float = 1e-3

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass(frozen=True)
class StagePlan:
    """Per-stage schedules plus the knobs shared by every phase."""

    stage1: StageSettings = StageSettings(epochs=20)
    stage2: StageSettings = StageSettings(epochs=20)
    stage3: StageSettings = StageSettings(epochs=20)
    classifier: StageSettings = StageSettings(epochs=30)
    batch_size: int = 16
    clip_norm: float = 5.0
    label_granularity: float = 0.1

    def settings(self, stage: str) -> StageSettings:
        return getattr(self, stage)


class MultiViewModel(Module):
    """All trainable components of the pipeline, built deterministically."""

    def __init__(self, config: ModelConfig, rng: RngState):
        cfg = config
        self.config = cfg
        d, heads, ffn = cfg.model_dim, cfg.num_heads, cfg.ffn_dim
        self.encoders = EncoderBank(cfg.encoder_config(), rng.split("encoders"))
        self.stage1_heads = {
            m: ProjectionHead(d, d, cfg.proj_dim, rng.split(f"stage1_head:{m}"))
            for m in MODALITIES
        }
        self.refiner = CrossModalRefiner(d, heads, ffn, rng.split("refiner"))
        self.stage2_heads = {
            m: ProjectionHead(d, d, cfg.proj_dim, rng.split(f"stage2_head:{m}"))
            for m in MODALITIES
        }
        self.fusion = FusionModule(d, heads, ffn, rng.split("fusion"))
        self.stage3_head = ProjectionHead(d, d, cfg.proj_dim, rng.split("stage3_head"))
        self.unimodal_heads = {
            m: ClassifierHead(d, cfg.classifier_hidden, cfg.output_dim,
                              rng.split(f"unimodal_head:{m}"))
            for m in MODALITIES
        }
        self.multimodal_head = ClassifierHead(d, cfg.classifier_hidden, cfg.output_dim,
                                              rng.split("multimodal_head"))

    # -- forward helpers -------------------------------------------------

    def hidden_sequences(self, batch_x: Mapping[str, Tensor]) -> dict[str, Tensor]:
        return {m: self.encoders.encode_batch(m, batch_x[m])[0] for m in MODALITIES}

    def fused_from_sequences(self, sequences: Mapping[str, Tensor]) -> Tensor:
        refined = self.refiner.refine_sequences(sequences)
        pooled = stack([mean_pool(refined[name]) for name in REFINED_MEMBERS], axis=-2)
        return self.fusion.fuse_pooled(pooled)

    def predict_scores(self, batch: Batch) -> Tensor:
        """Raw multimodal head outputs [B, output_dim]."""
        fused = self.fused_from_sequences(self.hidden_sequences(batch.x))
        return self.multimodal_head(fused)

    def parameter_group(self, prefixes: tuple[str, ...]) -> dict[str, Tensor]:
        return {
            name: p for name, p in self.named_parameters().items()
            if name.split(".", 1)[0] in prefixes
        }

    def apply_stage_freeze(self, contract: str) -> dict[str, Tensor]:
        """Freeze everything, unfreeze the contract's trainable groups."""
        spec = STAGE_CONTRACTS[contract]
        self.set_trainable(False)
        trainable = self.parameter_group(tuple(spec["trainable"]))
        for p in trainable.values():
            p.requires_grad = True
        return trainable


def parameter_digest(params: Mapping[str, Tensor]) -> str:
    """Order-insensitive content hash of named parameters."""
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(params[name].data.tobytes())
    return digest.hexdigest()


class Adam:
    """Adam with global gradient-norm clipping; state keyed by order."""

    def __init__(self, params: Mapping[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float = 5.0):
        self.params = list(params.values())
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.second_moment = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        scale = 1.0
        if self.clip_norm > 0 and total > self.clip_norm:
            scale = self.clip_norm / (total + 1e-12)
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for p, g, m1, m2 in zip(self.params, grads, self.first_moment, self.second_moment):
            g = g * scale
            m1 += (1.0 - self.beta1) * (g - m1)
            m2 += (1.0 - self.beta2) * (g * g - m2)
            update = (m1 / correction1) / (np.sqrt(m2 / correction2) + self.eps)
            p.data -= self.lr * update
            if not np.isfinite(p.data).all():
                raise NonFiniteError("adam_step")


# -- checkpoints ---------------------------------------------------------


@dataclass
class Checkpoint:
    version: int
    stage_id: int
    params: dict[str, np.ndarray]
    rng: RngState
    fingerprint: bytes

    @classmethod
    def capture(cls, model: MultiViewModel, stage: str, rng: RngState) -> "Checkpoint":
        params = {name: p.data.copy() for name, p in model.named_parameters().items()}
        return cls(version=CHECKPOINT_VERSION, stage_id=STAGE_IDS[stage],
                   params=params, rng=rng, fingerprint=model.config.fingerprint())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", ckpt.version),
        ckpt.fingerprint,
        struct.pack("<I", ckpt.stage_id),
        struct.pack("<Q", ckpt.rng.seed),
        struct.pack("<I", len(ckpt.params)),
    ]
    for name, arr in ckpt.params.items():
        encoded = name.encode()
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expected_fingerprint: bytes | None = None) -> Checkpoint:
    """Parse a checkpoint fully before returning; never yields partial state."""
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    offset = 0

    def take(count: int) -> memoryview:
        nonlocal offset
        if len(blob) < offset + count:
            raise CheckpointFormatError("checkpoint truncated")
        piece = view[offset:offset + count]
        offset += count
        return piece

    if bytes(take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    fingerprint = bytes(take(32))
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintMismatchError("checkpoint was created under a different config")
    (stage_id,) = struct.unpack("<I", take(4))
    (seed,) = struct.unpack("<Q", take(8))
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        total = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * total), dtype="<f8").reshape(shape).copy()
        params[name] = arr
    if offset != len(blob):
        raise CheckpointFormatError("unexpected trailing bytes in checkpoint")
    return Checkpoint(version=version, stage_id=stage_id, params=params,
                      rng=RngState(seed), fingerprint=fingerprint)


def restore_model(config: ModelConfig, ckpt: Checkpoint) -> MultiViewModel:
    """Rebuild a model from a checkpoint; forward passes match bitwise."""
    if ckpt.fingerprint != config.fingerprint():
        raise FingerprintMismatchError("checkpoint was created under a different config")
    model = MultiViewModel(config, ckpt.rng.split("init"))
    named = model.named_parameters()
    if set(named) != set(ckpt.params):
        raise CheckpointFormatError("checkpoint parameter names do not match the model")
    for name, p in named.items():
        stored = ckpt.params[name]
        if stored.shape != p.data.shape:
            raise CheckpointFormatError(f"parameter {name!r} has shape {stored.shape}, "
                                        f"expected {p.data.shape}")
        p.data[...] = stored
    return model


def _require_stage(ckpt: Checkpoint | None, wanted: str, current: str) -> Checkpoint:
    if ckpt is None:
        raise MissingCheckpointError(f"{current} requires the {wanted} checkpoint")
    if ckpt.stage_id != STAGE_IDS[wanted]:
        raise MissingCheckpointError(
            f"{current} requires a {wanted} checkpoint, got stage id {ckpt.stage_id}"
        )
    return ckpt


# -- label handling ------------------------------------------------------


def batch_class_ids(batch: Batch, m: str | None, task: str,
                    granularity: float) -> np.ndarray:
    """Contrastive class ids for one batch, per modality or shared."""
    if m is not None and batch.y_mod is not None:
        raw = batch.y_mod[m]
    else:
        raw = batch.y
    if task == "regression":
        return contrastive_classes(raw, granularity)
    return raw.astype(np.int64)


# -- caching of frozen activations ----------------------------------------


_CACHE_BATCH = 64


def cache_hidden(model: MultiViewModel, records: list[SampleRecord]
                 ) -> dict[str, np.ndarray]:
    """Encoder sequences for every record, [N, L, D] per modality."""
    out: dict[str, list[np.ndarray]] = {m: [] for m in MODALITIES}
    for batch in make_batches(records, _CACHE_BATCH, training=False):
        for m in MODALITIES:
            seq, _ = model.encoders.encode_batch(m, batch.x[m])
            out[m].append(seq.data)
    return {m: np.concatenate(parts, axis=0) for m, parts in out.items()}


def cache_refined_pooled(model: MultiViewModel, hidden: Mapping[str, np.ndarray]
                         ) -> np.ndarray:
    """Pooled refined slots for every record, [N, 6, D]."""
    n = hidden["t"].shape[0]
    parts = []
    for start in range(0, n, _CACHE_BATCH):
        seqs = {m: Tensor(hidden[m][start:start + _CACHE_BATCH]) for m in MODALITIES}
        refined = model.refiner.refine_sequences(seqs)
        pooled = stack([mean_pool(refined[name]) for name in REFINED_MEMBERS], axis=-2)
        parts.append(pooled.data)
    return np.concatenate(parts, axis=0)


# -- stage reports ---------------------------------------------------------


@dataclass
class StageReport:
    stage: str
    epoch_losses: dict[str, list[float]]
    seconds: float


@dataclass
class ClassifierReport:
    target: str
    epoch_losses: list[float]
    baseline: MetricReport
    final: MetricReport
    seconds: float


@dataclass
class StageResult:
    model: MultiViewModel
    checkpoint: Checkpoint
    report: StageReport | ClassifierReport


# -- training stages -------------------------------------------------------


def _epoch_rng(rng: RngState, stage: str, tag: str, epoch: int) -> RngState:
    return rng.split(f"{stage}:{tag}:epoch{epoch}")


def run_stage1(dataset, plan: StagePlan, config: ModelConfig,
               rng: RngState) -> StageResult:
    """Train each modality's encoder + projection head independently."""
    started = time.perf_counter()
    model = MultiViewModel(config, rng.split("init"))
    ccfg = config.contrastive()
    records = dataset.train
    curves: dict[str, list[float]] = {}
    for m in MODALITIES:
        group = {
            k: v for k, v in model.named_parameters().items()
            if k.startswith(f"encoders.units.{m}.") or k.startswith(f"stage1_heads.{m}.")
        }
        model.set_trainable(False)
        for p in group.values():
            p.requires_grad = True
        optimizer = Adam(group, plan.stage1.lr, clip_norm=plan.clip_norm)
        losses: list[float] = []
        for epoch in range(plan.stage1.epochs):
            batch_rng = _epoch_rng(rng, "stage1", m, epoch)
            epoch_losses = []
            for batch in make_batches(records, plan.batch_size, batch_rng, training=True):
                labels = batch_class_ids(batch, m, config.task, plan.label_granularity)
                _, pooled = model.encoders.encode_batch(m, batch.x[m])
                z = model.stage1_heads[m](pooled)
                loss = supcon_loss(z, labels, ccfg)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(loss.item())
            losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        curves[m] = losses
    model.set_trainable(False)
    report = StageReport("stage1", curves, time.perf_counter() - started)
    return StageResult(model, Checkpoint.capture(model, "stage1", rng), report)


def _stage2_pairs(model: MultiViewModel, sequences: Mapping[str, Tensor]):
    refined = model.refiner.refine_sequences(sequences)
    pairs = {}
    for m, (first, second) in VIEW_PAIRS.items():
        head = model.stage2_heads[m]
        pairs[m] = (head(mean_pool(refined[first])), head(mean_pool(refined[second])))
    return pairs


def run_stage2(dataset, plan: StagePlan, config: ModelConfig,
               stage1_ckpt: Checkpoint | None) -> StageResult:
    """Train the cross-modal refiner on frozen encoder outputs."""
    started = time.perf_counter()
    ckpt = _require_stage(stage1_ckpt, "stage1", "stage2")
    model = restore_model(config, ckpt)
    rng = ckpt.rng
    ccfg = config.contrastive()
    trainable = model.apply_stage_freeze("stage2")
    optimizer = Adam(trainable, plan.stage2.lr, clip_norm=plan.clip_norm)
    hidden = cache_hidden(model, dataset.train)  # encoders frozen: cache once
    losses: list[float] = []
    for epoch in range(plan.stage2.epochs):
        batch_rng = _epoch_rng(rng, "stage2", "joint", epoch)
        order = batch_rng.generator().permutation(len(dataset.train))
        limit = (len(order) // plan.batch_size) * plan.batch_size
        epoch_losses = []
        for start in range(0, limit, plan.batch_size):
            idx = order[start:start + plan.batch_size]
            seqs = {m: Tensor(hidden[m][idx]) for m in MODALITIES}
            loss = sscl_total(_stage2_pairs(model, seqs), ccfg)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
    model.set_trainable(False)
    report = StageReport("stage2", {"joint": losses}, time.perf_counter() - started)
    return StageResult(model, Checkpoint.capture(model, "stage2", rng), report)


def run_stage3(dataset, plan: StagePlan, config: ModelConfig,
               stage2_ckpt: Checkpoint | None) -> StageResult:
    """Train fusion + a fresh projection head, upstream frozen."""
    started = time.perf_counter()
    ckpt = _require_stage(stage2_ckpt, "stage2", "stage3")
    model = restore_model(config, ckpt)
    rng = ckpt.rng
    ccfg = config.contrastive()
    trainable = model.apply_stage_freeze("stage3")
    optimizer = Adam(trainable, plan.stage3.lr, clip_norm=plan.clip_norm)
    hidden = cache_hidden(model, dataset.train)
    slots = cache_refined_pooled(model, hidden)  # upstream frozen: cache once
    labels_all = np.array([r.y for r in dataset.train])
    losses: list[float] = []
    for epoch in range(plan.stage3.epochs):
        batch_rng = _epoch_rng(rng, "stage3", "fusion", epoch)
        order = batch_rng.generator().permutation(len(dataset.train))
        limit = (len(order) // plan.batch_size) * plan.batch_size
        epoch_losses = []
        for start in range(0, limit, plan.batch_size):
            idx = order[start:start + plan.batch_size]
            fused = model.fusion.fuse_pooled(Tensor(slots[idx]))
            z = model.stage3_head(fused)
            if config.task == "regression":
                ids = contrastive_classes(labels_all[idx], plan.label_granularity)
            else:
                ids = labels_all[idx].astype(np.int64)
            loss = supcon_loss(z, ids, ccfg)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
    model.set_trainable(False)
    report = StageReport("stage3", {"fusion": losses}, time.perf_counter() - started)
    return StageResult(model, Checkpoint.capture(model, "stage3", rng), report)


def _task_loss(config: ModelConfig, scores: Tensor, y: np.ndarray) -> Tensor:
    if config.task == "classification":
        return ce_loss(scores, y.astype(np.int64))
    return mse_loss(reshape(scores, (-1,)), Tensor(y))


def _scores_to_predictions(config: ModelConfig, scores: np.ndarray) -> np.ndarray:
    if config.task == "classification":
        centered = np.argmax(scores, axis=1).astype(np.float64)
        return centered - (config.num_classes - 1) / 2.0
    return scores.reshape(-1)


def _targets_to_scores(config: ModelConfig, y: np.ndarray) -> np.ndarray:
    if config.task == "classification":
        return y - (config.num_classes - 1) / 2.0
    return y


def evaluate_multimodal(model: MultiViewModel, records: list[SampleRecord],
                        batch_size: int = _CACHE_BATCH) -> MetricReport:
    """Metrics of the multimodal head over the given records."""
    config = model.config
    preds, targets = [], []
    for batch in make_batches(records, batch_size, training=False):
        scores = model.predict_scores(batch)
        preds.append(_scores_to_predictions(config, scores.data))
        targets.append(_targets_to_scores(config, batch.y))
    pred = np.concatenate(preds)
    target = np.concatenate(targets)
    acc2, f1 = acc2_f1(pred, target)
    return MetricReport(acc2=acc2, f1=f1, mae=mae(pred, target),
                        corr=pearson(pred, target))


def evaluate_unimodal(model: MultiViewModel, m: str, records: list[SampleRecord],
                      batch_size: int = _CACHE_BATCH) -> MetricReport:
    config = model.config
    preds, targets = [], []
    for batch in make_batches(records, batch_size, training=False):
        _, pooled = model.encoders.encode_batch(m, batch.x[m])
        scores = model.unimodal_heads[m](pooled)
        preds.append(_scores_to_predictions(config, scores.data))
        y = batch.y_mod[m] if batch.y_mod is not None else batch.y
        targets.append(_targets_to_scores(config, y))
    pred = np.concatenate(preds)
    target = np.concatenate(targets)
    acc2, f1 = acc2_f1(pred, target)
    return MetricReport(acc2=acc2, f1=f1, mae=mae(pred, target),
                        corr=pearson(pred, target))


def train_classifier(dataset, plan: StagePlan, config: ModelConfig,
                     stage3_ckpt: Checkpoint | None, target: str) -> StageResult:
    """Fit an output head. ``target`` is a modality id or 'multimodal'.

    Unimodal heads train on frozen pooled encoder outputs. The multimodal
    head trains with encoders, refiner and fusion unfrozen (finetuned).
    """
    started = time.perf_counter()
    ckpt = _require_stage(stage3_ckpt, "stage3", "classifier")
    model = restore_model(config, ckpt)
    rng = ckpt.rng
    records = dataset.train
    if target == "multimodal":
        trainable = model.apply_stage_freeze("classifier_multimodal")
        baseline = evaluate_multimodal(model, dataset.test)
    elif target in MODALITIES:
        trainable = {
            k: v for k, v in model.named_parameters().items()
            if k.startswith(f"unimodal_heads.{target}.")
        }
        model.set_trainable(False)
        for p in trainable.values():
            p.requires_grad = True
        baseline = evaluate_unimodal(model, target, dataset.test)
    else:
        raise ConfigError(f"unknown classifier target {target!r}")
    optimizer = Adam(trainable, plan.classifier.lr, clip_norm=plan.clip_norm)

    cached_pooled = None
    if target in MODALITIES:
        hidden = cache_hidden(model, records)
        cached_pooled = hidden[target].mean(axis=1)  # frozen encoder: pool once

    losses: list[float] = []
    for epoch in range(plan.classifier.epochs):
        batch_rng = _epoch_rng(rng, "classifier", target, epoch)
        epoch_losses = []
        if target == "multimodal":
            for batch in make_batches(records, plan.batch_size, batch_rng, training=True):
                scores = model.predict_scores(batch)
                loss = _task_loss(config, scores, batch.y)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(loss.item())
        else:
            order = batch_rng.generator().permutation(len(records))
            limit = (len(order) // plan.batch_size) * plan.batch_size
            labels_all = np.array([
                r.modality_label(target) if r.modality_label(target) is not None else r.y
                for r in records
            ])
            for start in range(0, limit, plan.batch_size):
                idx = order[start:start + plan.batch_size]
                scores = model.unimodal_heads[target](Tensor(cached_pooled[idx]))
                loss = _task_loss(config, scores, labels_all[idx])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
    model.set_trainable(False)
    if target == "multimodal":
        final = evaluate_multimodal(model, dataset.test)
    else:
        final = evaluate_unimodal(model, target, dataset.test)
    report = ClassifierReport(target=target, epoch_losses=losses,
                              baseline=baseline, final=final,
                              seconds=time.perf_counter() - started)
    return StageResult(model, Checkpoint.capture(model, "classifier", rng), report)


@dataclass
class PipelineResult:
    checkpoints: dict[str, Checkpoint]
    reports: dict[str, StageReport | ClassifierReport]
    metrics: MetricReport


def run_pipeline(dataset, plan: StagePlan, config: ModelConfig,
                 rng: RngState, targets: tuple[str, ...] = ("multimodal",)
                 ) -> PipelineResult:
    """All four phases in order; returns checkpoints, reports, test metrics."""
    result1 = run_stage1(dataset, plan, config, rng)
    result2 = run_stage2(dataset, plan, config, result1.checkpoint)
    result3 = run_stage3(dataset, plan, config, result2.checkpoint)
    checkpoints = {"stage1": result1.checkpoint, "stage2": result2.checkpoint,
                   "stage3": result3.checkpoint}
    reports: dict[str, StageReport | ClassifierReport] = {
        "stage1": result1.report, "stage2": result2.report, "stage3": result3.report,
    }
    final_metrics: MetricReport | None = None
    for target in targets:
        result = train_classifier(dataset, plan, config, result3.checkpoint, target)
        checkpoints[f"classifier_{target}"] = result.checkpoint
        reports[f"classifier_{target}"] = result.report
        if target == "multimodal":
            checkpoints["final"] = result.checkpoint
            final_metrics = result.report.final
    if final_metrics is None:
        raise ConfigError("pipeline targets must include 'multimodal'")
    return PipelineResult(checkpoints=checkpoints, reports=reports,
                          metrics=final_metrics)


# -- diagnostics used by verification and tests ----------------------------


def pooled_hidden_features(model: MultiViewModel, records: list[SampleRecord],
                           m: str) -> np.ndarray:
    """Pooled encoder outputs [N, D] for one modality."""
    hidden = cache_hidden(model, records)
    return hidden[m].mean(axis=1)


def paired_view_cosine(model: MultiViewModel, records: list[SampleRecord],
                       m: str) -> float:
    """Mean cosine between the two projected views of modality ``m``."""
    hidden = cache_hidden(model, records)
    total, count = 0.0, 0
    for start in range(0, len(records), _CACHE_BATCH):
        seqs = {mm: Tensor(hidden[mm][start:start + _CACHE_BATCH]) for mm in MODALITIES}
        pairs = _stage2_pairs(model, seqs)
        za, zb = (p.data for p in pairs[m])
        na = za / np.linalg.norm(za, axis=1, keepdims=True)
        nb = zb / np.linalg.norm(zb, axis=1, keepdims=True)
        total += float(np.sum(na * nb))
        count += za.shape[0]
    return total / count


def sscl_validation_loss(model: MultiViewModel, records: list[SampleRecord],
                         batch_size: int) -> float:
    """Paired-view loss over a fixed validation set, in record order."""
    hidden = cache_hidden(model, records)
    ccfg = model.config.contrastive()
    total, count = 0.0, 0
    limit = (len(records) // batch_size) * batch_size
    for start in range(0, limit, batch_size):
        seqs = {m: Tensor(hidden[m][start:start + batch_size]) for m in MODALITIES}
        loss = sscl_total(_stage2_pairs(model, seqs), ccfg)
        total += loss.item()
        count += 1
    return total / max(count, 1)


def supcon_validation_loss(model: MultiViewModel, records: list[SampleRecord],
                           plan: StagePlan, batch_size: int) -> float:
    """Fusion-space supervised contrastive loss over a validation set."""
    config = model.config
    hidden = cache_hidden(model, records)
    slots = cache_refined_pooled(model, hidden)
    labels = np.array([r.y for r in records])
    ccfg = config.contrastive()
    total, count = 0.0, 0
    limit = (len(records) // batch_size) * batch_size
    for start in range(0, limit, batch_size):
        idx = slice(start, start + batch_size)
        fused = model.fusion.fuse_pooled(Tensor(slots[idx]))
        z = model.stage3_head(fused)
        if config.task == "regression":
            ids = contrastive_classes(labels[idx], plan.label_granularity)
        else:
            ids = labels[idx].astype(np.int64)
        total += supcon_loss(z, ids, ccfg).item()
        count += 1
    return total / max(count, 1)
