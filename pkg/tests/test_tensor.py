"""Numeric core: primitive gradients, finiteness contract, spot values."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvcl.gradcheck import grad_check
from mvcl.rng import RngState
from mvcl.tensor import (
    DegenerateInputError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    concat,
    cosine_sim,
    div,
    dot,
    exp,
    layer_norm,
    log,
    matmul,
    mean_pool,
    mul,
    neg,
    relu,
    reshape,
    softmax,
    softmax_rows,
    sqrt,
    stack,
    sub,
    tensor_mean,
    tensor_sum,
    transpose,
)


def _contract(op, shape, gen):
    """Scalarize ``op()`` against a fixed random cotangent so every output
    entry influences the objective."""
    w = Tensor(gen.normal(size=shape))
    return lambda: tensor_sum(mul(op(), w))


def _away_from_zero(gen, shape, margin=0.1):
    x = gen.normal(size=shape)
    return np.sign(x) * (np.abs(x) + margin)


def _primitive_cases(gen):
    a = Tensor(gen.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(gen.normal(size=(3, 4)), requires_grad=True)
    pos = Tensor(np.abs(gen.normal(size=(3, 4))) + 0.5, requires_grad=True)
    kinked = Tensor(_away_from_zero(gen, (3, 4)), requires_grad=True)
    m1 = Tensor(gen.normal(size=(3, 4)), requires_grad=True)
    m2 = Tensor(gen.normal(size=(4, 5)), requires_grad=True)
    v1 = Tensor(gen.normal(size=6), requires_grad=True)
    v2 = Tensor(gen.normal(size=6), requires_grad=True)
    seq = Tensor(gen.normal(size=(5, 4)), requires_grad=True)
    gain = Tensor(gen.normal(size=4), requires_grad=True)
    shift = Tensor(gen.normal(size=4), requires_grad=True)
    row = Tensor(gen.normal(size=4), requires_grad=True)
    return {
        "add": (_contract(lambda: add(a, b), (3, 4), gen), {"a": a, "b": b}),
        "add_broadcast": (_contract(lambda: add(m1, row), (3, 4), gen), {"a": m1, "b": row}),
        "sub": (_contract(lambda: sub(a, b), (3, 4), gen), {"a": a, "b": b}),
        "mul": (_contract(lambda: mul(a, b), (3, 4), gen), {"a": a, "b": b}),
        "div": (_contract(lambda: div(a, pos), (3, 4), gen), {"a": a, "b": pos}),
        "neg": (_contract(lambda: neg(a), (3, 4), gen), {"a": a}),
        "exp": (_contract(lambda: exp(a), (3, 4), gen), {"a": a}),
        "log": (_contract(lambda: log(pos), (3, 4), gen), {"x": pos}),
        "sqrt": (_contract(lambda: sqrt(pos), (3, 4), gen), {"x": pos}),
        "relu": (_contract(lambda: relu(kinked), (3, 4), gen), {"x": kinked}),
        "matmul": (_contract(lambda: matmul(m1, m2), (3, 5), gen), {"a": m1, "b": m2}),
        "dot": (lambda: mul(dot(v1, v2), 1.7), {"a": v1, "b": v2}),
        "sum": (_contract(lambda: tensor_sum(a, axis=1), (3,), gen), {"a": a}),
        "mean": (_contract(lambda: tensor_mean(a, axis=0), (4,), gen), {"a": a}),
        "reshape": (_contract(lambda: reshape(a, (4, 3)), (4, 3), gen), {"a": a}),
        "transpose": (_contract(lambda: transpose(a), (4, 3), gen), {"a": a}),
        "concat": (_contract(lambda: concat([a, b], axis=0), (6, 4), gen), {"a": a, "b": b}),
        "stack": (_contract(lambda: stack([v1, v2], axis=0), (2, 6), gen), {"a": v1, "b": v2}),
        "mean_pool": (_contract(lambda: mean_pool(seq), (4,), gen), {"x": seq}),
        "layer_norm": (_contract(lambda: layer_norm(seq, gain, shift), (5, 4), gen),
                       {"x": seq, "gain": gain, "shift": shift}),
        "softmax": (_contract(lambda: softmax(a, axis=1), (3, 4), gen), {"a": a}),
        "cosine_sim": (lambda: mul(cosine_sim(v1, v2), 2.3), {"a": v1, "b": v2}),
    }


PRIMITIVE_NAMES = sorted(_primitive_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", PRIMITIVE_NAMES)
def test_primitive_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(10):
        gen = RngState(seed).split(name).generator()
        f, params = _primitive_cases(gen)[name]
        report = grad_check(f, params, epsilon=1e-5)
        worst = max(worst, report.max_rel_err)
    assert worst < 1e-6


class TestFinitenessContract:
    def test_nan_construction_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_inf_construction_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.inf])

    def test_log_of_negative_names_op(self):
        with pytest.raises(NonFiniteError) as err:
            log(Tensor([-1.0]))
        assert err.value.op == "log"

    def test_division_by_zero_is_an_error(self):
        with pytest.raises(NonFiniteError) as err:
            div(Tensor([1.0]), Tensor([0.0]))
        assert err.value.op == "div"

    def test_exp_overflow_is_an_error(self):
        with pytest.raises(NonFiniteError):
            exp(Tensor([1e4]))


class TestDeterminism:
    def test_same_inputs_same_bits(self):
        gen = RngState(3).generator()
        a = np.asarray(gen.normal(size=(6, 6)))
        b = np.asarray(gen.normal(size=(6, 6)))
        first = matmul(softmax(Tensor(a)), Tensor(b)).data
        second = matmul(softmax(Tensor(a)), Tensor(b)).data
        assert np.array_equal(first, second)

    def test_rng_streams_reproduce(self):
        draws1 = RngState(42).split("x").generator().normal(size=8)
        draws2 = RngState(42).split("x").generator().normal(size=8)
        assert np.array_equal(draws1, draws2)
        assert RngState(42).split("x").seed != RngState(42).split("y").seed


class TestCosineSim:
    def test_identical_unit_vectors(self):
        assert cosine_sim(Tensor([1.0, 0.0]), Tensor([1.0, 0.0])).item() == 1.0

    def test_orthogonal_vectors(self):
        assert cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_hand_computed_value(self):
        got = cosine_sim(Tensor([1.0, 2.0, 3.0]), Tensor([4.0, 5.0, 6.0])).item()
        assert got == pytest.approx(32.0 / np.sqrt(1078.0), abs=1e-12)

    def test_zero_norm_is_degenerate(self):
        with pytest.raises(DegenerateInputError):
            cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    @given(st.floats(0.01, 100.0), st.floats(0.01, 100.0), st.integers(0, 50))
    def test_scale_invariance(self, alpha, beta, seed):
        gen = RngState(seed).generator()
        a = _away_from_zero(gen, 4)
        b = _away_from_zero(gen, 4)
        base = cosine_sim(Tensor(a), Tensor(b)).item()
        scaled = cosine_sim(Tensor(alpha * a), Tensor(beta * b)).item()
        assert scaled == pytest.approx(base, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_sim(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


class TestSoftmax:
    def test_symmetric_row(self):
        out = softmax_rows(Tensor([[0.0, 0.0]]))
        assert np.allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_closed_form_row(self):
        out = softmax_rows(Tensor([[np.log(2.0), 0.0]]))
        assert np.allclose(out.data, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-12)

    @given(st.integers(0, 50), st.floats(-30.0, 30.0))
    def test_shift_invariance_and_row_sums(self, seed, shift):
        gen = RngState(seed).generator()
        x = gen.normal(size=(4, 5))
        base = softmax_rows(Tensor(x)).data
        shifted = softmax_rows(Tensor(x + shift)).data
        assert np.allclose(base, shifted, atol=1e-12)
        assert np.allclose(base.sum(axis=1), 1.0, atol=1e-12)

    def test_matrix_only(self):
        with pytest.raises(ShapeError):
            softmax_rows(Tensor([1.0, 2.0]))


def test_backward_requires_scalar():
    t = Tensor([[1.0, 2.0]], requires_grad=True)
    with pytest.raises(ShapeError):
        t.backward()


def test_grad_accumulates_across_reuse():
    x = Tensor([2.0], requires_grad=True)
    y = add(mul(x, 3.0), mul(x, x))  # 3x + x^2, dy/dx = 3 + 2x = 7
    tensor_sum(y).backward()
    assert np.allclose(x.grad, [7.0])
