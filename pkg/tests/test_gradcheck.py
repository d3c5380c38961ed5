"""The finite-difference checker itself: known gradients, loss batches, hooks."""

import numpy as np
import pytest

from mvcl.gradcheck import grad_check, relative_error
from mvcl.losses import ContrastiveConfig, pairwise_sscl_loss, supcon_loss
from mvcl.rng import RngState
from mvcl.tensor import Tensor, mul, tensor_sum

CFG = ContrastiveConfig(temperature=0.2)


def test_quadratic_has_known_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    report = grad_check(lambda: tensor_sum(mul(x, x)), {"x": x})
    assert report.max_rel_err < 1e-8
    tensor_sum(mul(x, x)).backward()
    assert np.allclose(x.grad, [2.0, 4.0], atol=1e-15)


def test_supcon_batch_of_four():
    gen = RngState(0).generator()
    zs = [Tensor(v / np.linalg.norm(v), requires_grad=True)
          for v in gen.normal(size=(4, 5))]
    params = {f"z{i}": z for i, z in enumerate(zs)}
    report = grad_check(lambda: supcon_loss(zs, [0, 0, 1, 1], CFG), params)
    assert report.max_rel_err < 1e-4


def test_pairwise_batch_of_three():
    gen = RngState(1).generator()
    za = Tensor(gen.normal(size=(3, 5)), requires_grad=True)
    zb = Tensor(gen.normal(size=(3, 5)), requires_grad=True)
    report = grad_check(lambda: pairwise_sscl_loss(za, zb, CFG), {"a": za, "b": zb})
    assert report.max_rel_err < 1e-4


def test_epsilon_range_is_enforced():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: tensor_sum(mul(x, x)), {"x": x}, epsilon=1e-2)


def test_entry_subsampling_reports_count():
    x = Tensor(np.arange(1.0, 21.0), requires_grad=True)
    report = grad_check(lambda: tensor_sum(mul(x, x)), {"x": x},
                        max_entries_per_param=5, rng=RngState(0))
    assert report.entries[0].entries_checked == 5


def test_tamper_hook_breaks_the_check():
    x = Tensor([1.0, 2.0], requires_grad=True)

    def tamper(analytic):
        analytic["x"] = analytic["x"] * 2.0

    report = grad_check(lambda: tensor_sum(mul(x, x)), {"x": x}, _tamper=tamper)
    assert not report.passed(1e-4)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2.0, 1.0) == 0.5
