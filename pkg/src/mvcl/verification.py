"""Seeded gradient-check battery over every loss and model composition.

Each named check builds a small random problem, runs the finite-difference
checker against the analytic gradients, and reports the worst relative
error across a handful of seeds. The two model compositions use reduced
widths and, for the refiner, a seeded subset of parameter entries so the
whole battery stays fast while still touching every parameter tensor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .crossmodal import CrossModalRefiner, FusionModule
from .encoders import EncoderBank, EncoderConfig, ProjectionHead
from .gradcheck import grad_check
from .losses import (
    ClassifierHead,
    ContrastiveConfig,
    ce_loss,
    mse_loss,
    pairwise_sscl_loss,
    sscl_total,
    supcon_loss,
)
from .rng import RngState
from .tensor import Tensor, mean_pool, mul, stack, tensor_sum

CHECK_NAMES = (
    "supcon_loss",
    "pairwise_sscl_loss",
    "sscl_total",
    "ce_loss",
    "mse_loss",
    "encode_project",
    "refine_fuse",
)

LOSS_CHECKS = ("supcon_loss", "pairwise_sscl_loss", "sscl_total", "ce_loss", "mse_loss")


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    seconds: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _unit_rows(gen: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = gen.normal(size=(n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


_CFG = ContrastiveConfig(temperature=0.2)


def _check_supcon(rng: RngState):
    gen = rng.generator()
    z = [Tensor(v, requires_grad=True) for v in _unit_rows(gen, 4, 6)]
    labels = np.array([0, 0, 1, 1])
    return lambda: supcon_loss(z, labels, _CFG), {f"z{i}": t for i, t in enumerate(z)}, None


def _check_pairwise(rng: RngState):
    gen = rng.generator()
    za = Tensor(_unit_rows(gen, 3, 6), requires_grad=True)
    zb = Tensor(_unit_rows(gen, 3, 6), requires_grad=True)
    return lambda: pairwise_sscl_loss(za, zb, _CFG), {"view_a": za, "view_b": zb}, None


def _check_sscl_total(rng: RngState):
    gen = rng.generator()
    params = {}
    pairs = {}
    for m in ("t", "a", "v"):
        za = Tensor(_unit_rows(gen, 2, 6), requires_grad=True)
        zb = Tensor(_unit_rows(gen, 2, 6), requires_grad=True)
        params[f"{m}_a"], params[f"{m}_b"] = za, zb
        pairs[m] = (za, zb)
    return lambda: sscl_total(pairs, _CFG), params, None


def _check_ce(rng: RngState):
    gen = rng.generator()
    scores = Tensor(gen.normal(size=(3, 3)), requires_grad=True)
    labels = np.array([0, 2, 1])
    return lambda: ce_loss(scores, labels), {"scores": scores}, None


def _check_mse(rng: RngState):
    gen = rng.generator()
    pred = Tensor(gen.normal(size=4), requires_grad=True)
    target = gen.normal(size=4)
    return lambda: mse_loss(pred, target), {"pred": pred}, None


def _check_encode_project(rng: RngState):
    cfg = EncoderConfig(
        input_dims={"t": 3, "a": 3, "v": 3}, seq_lens={"t": 3, "a": 3, "v": 3},
        model_dim=8, num_layers=1, num_heads=2, ffn_dim=16,
    )
    bank = EncoderBank(cfg, rng.split("bank"))
    head = ProjectionHead(8, 8, 4, rng.split("head"))
    x = Tensor(rng.split("input").generator().normal(size=(3, 3)))
    params = {**{f"enc.{k}": v for k, v in bank.units["t"].named_parameters().items()},
              **{f"head.{k}": v for k, v in head.named_parameters().items()}}

    def f():
        hidden = bank.encode("t", x)
        z = head(hidden.pooled)
        return tensor_sum(mul(z, z))

    return f, params, None


def _check_refine_fuse(rng: RngState):
    dim, heads, ffn, length = 4, 2, 8, 2
    refiner = CrossModalRefiner(dim, heads, ffn, rng.split("refiner"))
    fusion = FusionModule(dim, heads, ffn, rng.split("fusion"))
    gen = rng.split("input").generator()
    seqs = {m: Tensor(gen.normal(size=(length, dim))) for m in ("t", "a", "v")}
    params = {**{f"refiner.{k}": v for k, v in refiner.named_parameters().items()},
              **{f"fusion.{k}": v for k, v in fusion.named_parameters().items()}}

    def f():
        refined = refiner.refine_sequences(seqs)
        pooled = stack([mean_pool(refined[name]) for name in
                        ("avt", "vat", "tva", "vta", "tav", "atv")], axis=0)
        fused = fusion.fuse_pooled(pooled)
        return tensor_sum(mul(fused, fused))

    # every parameter tensor is touched; entries are subsampled for speed
    return f, params, 4


_BUILDERS = {
    "supcon_loss": _check_supcon,
    "pairwise_sscl_loss": _check_pairwise,
    "sscl_total": _check_sscl_total,
    "ce_loss": _check_ce,
    "mse_loss": _check_mse,
    "encode_project": _check_encode_project,
    "refine_fuse": _check_refine_fuse,
}


def run_gradient_checks(seed: int = 0, *, seeds: int = 5, tolerance: float = 1e-4,
                        _corrupt: str | None = None) -> list[CheckResult]:
    """Run every named check over ``seeds`` seeded inputs.

    ``_corrupt`` is a test hook: the named check has one analytic gradient
    perturbed before comparison, so it must fail.
    """
    root = RngState(seed)
    results = []
    for name in CHECK_NAMES:
        started = time.perf_counter()
        worst = 0.0
        # deep compositions use a larger step: cancellation noise shrinks
        # with epsilon faster than truncation error grows
        epsilon = 1e-4 if name in ("encode_project", "refine_fuse") else 1e-5
        for s in range(seeds):
            case_rng = root.split(f"{name}:{s}")
            f, params, max_entries = _BUILDERS[name](case_rng)
            tamper = None
            if _corrupt == name:
                def tamper(analytic):
                    first = next(iter(analytic))
                    analytic[first] = analytic[first] * 1.5 + 1.0
            report = grad_check(f, params, epsilon=epsilon,
                                max_entries_per_param=max_entries,
                                rng=case_rng, _tamper=tamper)
            worst = max(worst, report.max_rel_err)
        results.append(CheckResult(name, worst, time.perf_counter() - started, tolerance))
    return results


def format_check_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  max_rel_err  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name.ljust(width)}  {r.max_rel_err:<11.3e}  {status}")
    return "\n".join(lines)
