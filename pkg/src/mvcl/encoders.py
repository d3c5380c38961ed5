"""Per-modality Transformer encoders and the contrastive projection head.

Each modality (text ``t``, acoustic ``a``, video ``v``) gets its own encoder:
a linear lift of the raw feature width to the shared model width, fixed
sinusoidal position offsets, and a stack of pre-norm self-attention blocks.
A sequence is summarized by mean-pooling; the projection head maps that
pooled vector into the space where contrastive losses are computed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .errors import ConfigError
from .nn import EncoderBlock, Linear, Module, sinusoidal_positions
from .rng import RngState
from .tensor import Tensor, add, mean_pool, relu

MODALITIES = ("t", "a", "v")


def check_modality(m: str) -> str:
    if m not in MODALITIES:
        raise ConfigError(f"unknown modality {m!r}; expected one of {MODALITIES}")
    return m


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes shared by the three unimodal encoders.

    ``input_dims`` and ``seq_lens`` map each modality to its raw feature
    width and fixed sequence length.
    """

    input_dims: Mapping[str, int]
    seq_lens: Mapping[str, int]
    model_dim: int = 512
    num_layers: int = 2
    num_heads: int = 8
    ffn_dim: int = 2048

    def __post_init__(self):
        for table in (self.input_dims, self.seq_lens):
            if set(table) != set(MODALITIES):
                raise ConfigError(f"expected entries for all of {MODALITIES}")
            if any(v < 1 for v in table.values()):
                raise ConfigError("dimensions and lengths must be >= 1")
        if self.model_dim < 1 or self.ffn_dim < 1 or self.num_heads < 1:
            raise ConfigError("dimensions must be >= 1")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError("model_dim must be divisible by num_heads")


@dataclass
class HiddenRepresentation:
    """Encoder output for one sample: the full sequence and its mean pool."""

    sequence: Tensor  # [L, model_dim]
    pooled: Tensor  # [model_dim]


@dataclass
class ProjectionVector:
    """Contrastive-space embedding of one sample."""

    z: Tensor


class UnimodalEncoder(Module):
    def __init__(self, input_dim: int, seq_len: int, cfg: EncoderConfig, rng: RngState):
        self.input_dim = input_dim
        self.seq_len = seq_len
        self.lift = Linear(input_dim, cfg.model_dim, rng.split("lift").generator())
        self.blocks = [
            EncoderBlock(cfg.model_dim, cfg.num_heads, cfg.ffn_dim, rng.split(f"block:{i}").generator())
            for i in range(cfg.num_layers)
        ]
        self._positions = sinusoidal_positions(seq_len, cfg.model_dim)

    def __call__(self, x: Tensor) -> Tensor:
        """Encode [L, d] or [B, L, d] into the model width, same leading shape."""
        if x.shape[-2:] != (self.seq_len, self.input_dim):
            raise ConfigError(
                f"expected trailing shape {(self.seq_len, self.input_dim)}, got {x.shape}"
            )
        h = add(self.lift(x), Tensor(self._positions))
        for block in self.blocks:
            h = block(h)
        return h


class ProjectionHead(Module):
    """Two-layer perceptron from a pooled representation to contrastive space."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng: RngState):
        gen = rng.generator()
        self.inner = Linear(in_dim, hidden_dim, gen)
        self.outer = Linear(hidden_dim, out_dim, gen)

    def __call__(self, pooled: Tensor) -> Tensor:
        return self.outer(relu(self.inner(pooled)))


class EncoderBank(Module):
    """The three unimodal encoders, addressed by modality id."""

    def __init__(self, cfg: EncoderConfig, rng: RngState):
        self.config = cfg
        self.units = {
            m: UnimodalEncoder(cfg.input_dims[m], cfg.seq_lens[m], cfg, rng.split(f"encoder:{m}"))
            for m in MODALITIES
        }

    def encoder(self, m: str) -> UnimodalEncoder:
        return self.units[check_modality(m)]

    def encode(self, m: str, x: Tensor) -> HiddenRepresentation:
        """Encode a single sample [L, d] and attach its pooled vector."""
        if x.ndim != 2:
            raise ConfigError("encode expects a single [L, d] sample")
        seq = self.encoder(m)(x)
        return HiddenRepresentation(sequence=seq, pooled=mean_pool(seq))

    def encode_batch(self, m: str, x: Tensor) -> tuple[Tensor, Tensor]:
        """Encode a batch [B, L, d]; returns (sequence [B, L, D], pooled [B, D])."""
        if x.ndim != 3:
            raise ConfigError("encode_batch expects [B, L, d]")
        seq = self.encoder(m)(x)
        return seq, mean_pool(seq)


def project(head: ProjectionHead, h: HiddenRepresentation) -> ProjectionVector:
    """Project a hidden representation; depends only on its pooled vector."""
    return ProjectionVector(z=head(h.pooled))
