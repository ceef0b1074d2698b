import numpy as np
import pytest
import scipy.sparse as sp

from hetrolat import autograd as ag
from helpers import numeric_grad, rel_err

RNG = np.random.default_rng(0)


def _check(build, *shapes, positive=False):
    """Compare the tape gradient of sum(build(*vars) * c) with central differences."""
    vals = [RNG.random(s) + 0.5 if positive else RNG.normal(size=s) for s in shapes]
    probe = None

    def scalar():
        out = build(*[ag.Var(v) for v in vals]).value
        return float(np.sum(out * probe))

    params = [ag.param(v) for v in vals]
    out = build(*params)
    probe = RNG.normal(size=out.shape)
    ag.vsum(out * probe).backward()
    for p, v in zip(params, vals):
        assert rel_err(numeric_grad(scalar, v), p.grad) < 1e-7


def test_elementwise_ops():
    _check(lambda a, b: a * b + a - b, (3, 4), (1, 4))
    _check(lambda a: ag.elu(a), (4, 5))
    _check(lambda a: ag.power(a, 2.5), (3, 3), positive=True)
    _check(lambda a: ag.power(a, 3), (3, 3))


def test_matrix_ops():
    _check(lambda a, b: a @ b, (3, 4), (4, 2))
    _check(lambda a: a.T, (3, 4))
    m = sp.random(5, 5, density=0.4, random_state=1, format="csr")
    _check(lambda a: ag.spmm(m, a), (5, 3))
    _check(lambda a, b: ag.concat([a, b], axis=1), (3, 2), (3, 4))
    _check(lambda a: ag.column(a, 1), (4, 3))


def test_reductions_and_normalizations():
    _check(lambda a: ag.vsum(a, axis=1), (4, 3))
    _check(lambda a: ag.vsum(a, axis=0, keepdims=True), (4, 3))
    _check(lambda a: ag.mean(a), (4, 3))
    _check(lambda a: ag.rownorm(a), (4, 3))
    _check(lambda a: ag.softmax_rows(a), (4, 3))
    mask = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 1], [0, 0, 1]], bool)
    _check(lambda a: ag.masked_logsumexp(a, mask), (4, 3))


def test_rownorm_zero_row_stays_zero():
    v = ag.param(np.array([[0.0, 0.0], [3.0, 4.0]]))
    out = ag.rownorm(v)
    np.testing.assert_array_equal(out.value[0], [0, 0])
    ag.vsum(out).backward()
    np.testing.assert_array_equal(v.grad[0], [0, 0])


def test_shared_node_accumulates():
    a = ag.param(np.array([2.0]))
    ag.vsum(a * a + a).backward()
    assert a.grad.tolist() == [5.0]


def test_constants_get_no_gradient():
    a = ag.Var(np.ones(2))
    b = ag.param(np.ones(2))
    ag.vsum(a * b).backward()
    assert a.grad is None and b.grad.tolist() == [1.0, 1.0]


def test_deep_chain_does_not_recurse():
    a = ag.param(np.array([1.0]))
    out = a
    for _ in range(5000):
        out = out * 1.0
    ag.vsum(out).backward()
    assert a.grad.tolist() == [1.0]
