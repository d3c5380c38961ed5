"""Multi-view contrastive learning for fixed-length multimodal feature sequences.

The package trains three unimodal Transformer encoders, refines them through a
two-level cross-modal attention module, fuses the result, and fits classifier
or regressor heads — in four phases with explicit freeze/finetune semantics.
Everything runs on a small float64 autodiff core so gradients can be verified
against finite differences and losses against brute-force oracles.
"""

__version__ = "0.1.0"
