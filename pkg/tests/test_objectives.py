import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mctoken.autodiff import Tensor, default_dtype, grad_check, parameter
from mctoken.objectives import (
    LossWeights,
    mean_logit_loss,
    mlsm,
    separation_loss,
    total_loss,
)


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def test_mlsm_closed_forms():
    assert mlsm(T([[0.0, 0.0, 0.0]]), [[1, 0, 1]]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert mlsm(T([[20.0]]), [[1]]).item() < 1e-8
    want = (math.log(2) + math.log(4 / 3)) / 2
    assert mlsm(T([[0.0, math.log(3)]]), [[1, 1]]).item() == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.4904, abs=1e-4)


def test_mlsm_gradient_at_zero():
    z = parameter(np.zeros((1, 4)), dtype=np.float64)
    y = np.array([[1, 0, 1, 0]])
    mlsm(z, y).backward()
    np.testing.assert_allclose(z.grad, (0.5 - y) / 4)


def test_mlsm_validation():
    with pytest.raises(ValueError):
        mlsm(T([[0.0, 1.0]]), [[1]])
    with pytest.raises(ValueError):
        mlsm(T([[0.0]]), [[2]])


def test_separation_closed_forms():
    ortho = separation_loss([T(np.eye(2))]).item()
    assert ortho == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert ortho == pytest.approx(0.3133, abs=1e-4)
    same = separation_loss([T([[1.0, 2.0], [1.0, 2.0]])]).item()
    assert same == pytest.approx(math.log(2), abs=1e-12)
    assert same > ortho
    layer = T(np.random.default_rng(0).standard_normal((2, 3, 5)))
    assert separation_loss([layer]).item() == pytest.approx(separation_loss([layer, layer]).item(), abs=1e-12)


def test_separation_general_c():
    c = 5
    got = separation_loss([T(np.eye(c, 7))]).item()
    assert got == pytest.approx(-math.log(math.e / (math.e + c - 1)), abs=1e-12)
    with pytest.raises(ValueError):
        separation_loss([T(np.ones((1, 4)))])
    with pytest.raises(ValueError):
        separation_loss([])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_separation_row_scale_invariant(c, seed):
    rng = np.random.default_rng(seed)
    tokens = rng.standard_normal((c, 8))
    scale = rng.uniform(0.1, 10.0, (c, 1))
    a = separation_loss([T(tokens)]).item()
    b = separation_loss([T(tokens * scale)]).item()
    assert a == pytest.approx(b, abs=1e-9)
    assert a <= math.log(c) + 1e-9 or a >= 0


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_mlsm_nonneg_and_permutation_invariant(c, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((3, c)) * 5
    y = rng.integers(0, 2, (3, c))
    perm = rng.permutation(c)
    a = mlsm(T(z), y).item()
    assert a >= 0
    assert a == pytest.approx(mlsm(T(z[:, perm]), y[:, perm]).item(), abs=1e-12)


def test_mean_logit_loss_examples():
    y = [[1]]
    assert mean_logit_loss(T([[0.0]]), T([[0.0]]), T([[0.0]]), y).item() == pytest.approx(math.log(2))
    assert mean_logit_loss(T([[2.0]]), T([[-2.0]]), T([[0.0]]), y).item() == pytest.approx(math.log(2))
    z = T([[0.7, -1.2]])
    assert mean_logit_loss(z, None, None, [[1, 0]]).item() == pytest.approx(mlsm(z, [[1, 0]]).item())


def _branches(rng, b=2, c=3):
    return (T(rng.standard_normal((b, c))), T(rng.standard_normal((b, c))),
            T(rng.standard_normal((b, c))), [T(rng.standard_normal((b, c, 4))) for _ in range(2)],
            rng.integers(0, 2, (b, c)))


def test_total_is_weighted_sum():
    rng = np.random.default_rng(1)
    vc, p, tc, toks, y = _branches(rng)
    w = LossWeights(alpha=0.3, beta=1.7, gamma=0.5, delta=2.0, mean=0.9)
    rep = total_loss(vc, p, tc, toks, y, w, mode="both")
    want = (0.3 * mlsm(vc, y).item() + 1.7 * mlsm(p, y).item() + 0.5 * mlsm(tc, y).item()
            + 2.0 * separation_loss(toks).item() + 0.9 * mean_logit_loss(vc, p, tc, y).item())
    assert rep.total.item() == pytest.approx(want, abs=1e-9)
    assert set(rep.terms) == {"concepts_visual", "concepts_patch", "concepts_text", "concepts_mean", "separation"}


def test_loss_modes_select_terms():
    rng = np.random.default_rng(2)
    vc, p, tc, toks, y = _branches(rng)
    rep = total_loss(vc, p, tc, toks, y, mode="separate", separation=True)
    assert set(rep.terms) == {"concepts_visual", "concepts_patch", "concepts_text", "separation"}
    rep = total_loss(vc, p, None, toks, y, mode="mean", separation=False)
    assert set(rep.terms) == {"concepts_mean"}
    with pytest.raises(ValueError):
        total_loss(vc, p, tc, toks, y, mode="median")
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)


def test_delta_zero_ignores_token_geometry():
    rng = np.random.default_rng(3)
    vc, p, tc, toks, y = _branches(rng)
    w = LossWeights(delta=0.0)
    a = total_loss(vc, p, tc, toks, y, w).total.item()
    other = [T(np.ones((2, 3, 4)))]
    assert total_loss(vc, p, tc, other, y, w).total.item() == pytest.approx(a, abs=1e-12)


def test_losses_gradcheck():
    rng = np.random.default_rng(4)
    with default_dtype(np.float64):
        params = [parameter(rng.standard_normal((2, 3)), dtype=np.float64) for _ in range(3)]
        toks = [parameter(rng.standard_normal((2, 3, 4)), dtype=np.float64) for _ in range(2)]
        y = rng.integers(0, 2, (2, 3))
        f = lambda: total_loss(*params, toks, y, mode="both").total
        err = grad_check(f, params + toks, eps=1e-4, n_coords=None, stencil=4)
    assert err < 1e-6
