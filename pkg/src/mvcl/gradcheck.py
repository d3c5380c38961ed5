"""Finite-difference verification of reverse-mode gradients.

``grad_check`` compares the analytic gradient of a scalar-valued function
against central differences, entry by entry, and reports the worst relative
error per parameter. The numeric side never touches the autodiff tape, so it
stays an independent oracle for the analytic side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .rng import RngState
from .tensor import Tensor


@dataclass
class GradCheckEntry:
    """Worst-case comparison result for one parameter tensor."""

    name: str
    entries_checked: int
    max_rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_err < tolerance


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(f"param{i}", p) for i, p in enumerate(params)]


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    f: Callable[[], Tensor],
    params,
    *,
    epsilon: float = 1e-5,
    max_entries_per_param: int | None = None,
    rng: RngState | None = None,
    _tamper: Callable[[dict[str, np.ndarray]], None] | None = None,
) -> GradCheckReport:
    """Check the gradient of ``f`` with respect to ``params``.

    ``f`` takes no arguments, reads the parameter tensors, and returns a
    scalar; it must be deterministic so repeated evaluations are comparable.
    ``params`` is a mapping of names to tensors (or a plain sequence).
    By default every entry of every parameter is perturbed; pass
    ``max_entries_per_param`` to check a seeded random subset instead.

    ``_tamper`` is a test hook that may corrupt the analytic gradients
    before comparison, used to prove the checker can fail.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    named = _named(params)
    for name, p in named:
        p.requires_grad = True
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {name: np.array(p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in named}
    if _tamper is not None:
        _tamper(analytic)
    chooser = (rng or RngState(0)).split("gradcheck").generator()
    entries: list[GradCheckEntry] = []
    for name, p in named:
        flat = p.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            idx = chooser.choice(flat.size, size=max_entries_per_param, replace=False)
        else:
            idx = np.arange(flat.size)
        worst = 0.0
        for j in idx:
            saved = flat[j]
            flat[j] = saved + epsilon
            up = f().item()
            flat[j] = saved - epsilon
            down = f().item()
            flat[j] = saved
            numeric = (up - down) / (2.0 * epsilon)
            worst = max(worst, relative_error(float(grad_flat[j]), numeric))
        entries.append(GradCheckEntry(name, int(len(idx)), worst))
    for _, p in named:
        p.grad = None
    return GradCheckReport(entries)
