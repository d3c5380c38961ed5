"""Two-level cross-modal refinement and fusion of the three modalities.

Each refined representation is named by the order its modalities attend:
the name ``avt`` means the base text sequence is first attended by video
queries, and that product is then attended by acoustic queries. The last
letter is the modality whose content is being refined; the first letter is
the outermost query, so it determines the output sequence length. Pairs of
names ending in the same letter (``avt``/``vat``, ``tva``/``vta``,
``tav``/``atv``) are two views of the same modality and drive the
paired-view contrastive stage.

Fusion pools each refined sequence, pushes all six through one shared
linear map, tags each slot with a learned type embedding, mixes them with a
single self-attention block, and mean-pools the six tokens into one vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .encoders import HiddenRepresentation
from .errors import ConfigError
from .nn import CrossAttentionBlock, Linear, Module
from .rng import RngState
from .tensor import Tensor, add, mean_pool, stack

REFINED_MEMBERS = ("avt", "vat", "tva", "vta", "tav", "atv")

# member -> (level-1 query, level-1 key/value, level-2 query)
ATTENTION_ORDERS = {name: (name[1], name[2], name[0]) for name in REFINED_MEMBERS}

# target modality -> the two refinement orders that are views of it
VIEW_PAIRS = {"t": ("avt", "vat"), "a": ("tva", "vta"), "v": ("tav", "atv")}


@dataclass
class RefinedMember:
    sequence: Tensor  # [L_query, model_dim]
    pooled: Tensor  # [model_dim]


@dataclass
class RefinedSet:
    """All six refined representations of one sample."""

    f_avt: RefinedMember
    f_vat: RefinedMember
    f_tva: RefinedMember
    f_vta: RefinedMember
    f_tav: RefinedMember
    f_atv: RefinedMember

    def member(self, name: str) -> RefinedMember:
        if name not in REFINED_MEMBERS:
            raise ConfigError(f"unknown refined member {name!r}")
        return getattr(self, f"f_{name}")

    def pooled_in_order(self) -> list[Tensor]:
        return [self.member(name).pooled for name in REFINED_MEMBERS]


@dataclass
class FusedRepresentation:
    f: Tensor  # [model_dim]


class CrossModalRefiner(Module):
    """Twelve independent cross-attention blocks: two levels per member."""

    def __init__(self, model_dim: int, num_heads: int, ffn_dim: int, rng: RngState):
        self.model_dim = model_dim
        self.level1 = {
            name: CrossAttentionBlock(model_dim, num_heads, ffn_dim,
                                      rng.split(f"level1:{name}").generator())
            for name in REFINED_MEMBERS
        }
        self.level2 = {
            name: CrossAttentionBlock(model_dim, num_heads, ffn_dim,
                                      rng.split(f"level2:{name}").generator())
            for name in REFINED_MEMBERS
        }

    def refine_sequences(self, sequences: Mapping[str, Tensor]) -> dict[str, Tensor]:
        """Apply both levels to per-modality sequences ([L, D] or [B, L, D])."""
        for m, seq in sequences.items():
            if seq.shape[-1] != self.model_dim:
                raise ConfigError(f"sequence for {m!r} has width {seq.shape[-1]}, "
                                  f"expected {self.model_dim}")
        out: dict[str, Tensor] = {}
        for name in REFINED_MEMBERS:
            q1, kv1, q2 = ATTENTION_ORDERS[name]
            inner = self.level1[name](sequences[q1], sequences[kv1])
            out[name] = self.level2[name](sequences[q2], inner)
        return out

    def refine(self, h_t: HiddenRepresentation, h_a: HiddenRepresentation,
               h_v: HiddenRepresentation) -> RefinedSet:
        """Refine one sample's hidden representations into all six members."""
        seqs = {"t": h_t.sequence, "a": h_a.sequence, "v": h_v.sequence}
        refined = self.refine_sequences(seqs)
        members = {
            name: RefinedMember(sequence=seq, pooled=mean_pool(seq))
            for name, seq in refined.items()
        }
        return RefinedSet(**{f"f_{name}": members[name] for name in REFINED_MEMBERS})


def cross_attend(block: CrossAttentionBlock, q_seq: Tensor, kv_seq: Tensor) -> Tensor:
    """One cross-attention block application; output keeps the query length."""
    return block(q_seq, kv_seq)


class FusionModule(Module):
    """Shared linear map + slot type embeddings + one self-attention block."""

    def __init__(self, model_dim: int, num_heads: int, ffn_dim: int, rng: RngState):
        self.shared = Linear(model_dim, model_dim, rng.split("shared").generator())
        self.type_embeddings = Tensor(
            rng.split("types").generator().normal(0.0, 0.2, size=(len(REFINED_MEMBERS), model_dim)),
            requires_grad=True,
        )
        self.mixer = CrossAttentionBlock(model_dim, num_heads, ffn_dim,
                                         rng.split("mixer").generator())

    def fuse_pooled(self, pooled_slots: Tensor) -> Tensor:
        """Fuse [..., 6, D] pooled refined vectors into [..., D]."""
        if pooled_slots.shape[-2] != len(REFINED_MEMBERS):
            raise ConfigError("fusion expects six pooled slots")
        tokens = add(self.shared(pooled_slots), self.type_embeddings)
        mixed = self.mixer(tokens, tokens)
        return mean_pool(mixed, axis=-2)

    def fuse(self, refined: RefinedSet) -> FusedRepresentation:
        slots = stack(refined.pooled_in_order(), axis=0)  # [6, D]
        return FusedRepresentation(f=self.fuse_pooled(slots))

    def zero_type_embeddings(self) -> None:
        """Erase slot identity; makes fusion permutation-invariant."""
        self.type_embeddings.data[...] = 0.0
