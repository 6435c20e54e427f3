import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctrlfuse import numerics as nx
from ctrlfuse.denoiser import block_forward, init_block_params, DiTConfig
from ctrlfuse.errors import ShapeError
from ctrlfuse.numerics import GradTape, RngStream, Tensor, grad_check, load_tensor, save_tensor, tape_gradient
from ctrlfuse.params import ParamSet

from conftest import float64_params

finite = st.floats(-10, 10, allow_nan=False, width=32)


def test_matmul_identity_and_hand_values():
    a = np.arange(9, dtype=np.float32).reshape(3, 3) - 4
    assert np.array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    out = nx.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]])).data
    assert np.array_equal(out, [[2], [4]])
    assert np.array_equal(nx.matmul(Tensor(np.zeros((3, 3))), Tensor(a)).data, np.zeros((3, 3)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@given(arrays(np.float32, (4, 4), elements=finite))
def test_matmul_identity_bit_exact(a):
    assert np.array_equal((Tensor(a) @ Tensor(np.eye(4))).data, a)


def test_softmax_examples():
    assert np.allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    big = nx.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, 0.5)
    assert np.allclose(nx.softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-7)


@given(arrays(np.float32, (3, 5), elements=st.floats(-50, 50, width=32)), st.sampled_from([0, 1, -1]))
def test_softmax_is_a_distribution(x, axis):
    p = nx.softmax(Tensor(x), axis=axis).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=axis), 1.0, atol=1e-6)


def test_grad_check_square_and_constant():
    x = Tensor(np.array([3.0]))
    g = tape_gradient(lambda p: nx.mul(p, p).sum(), x)
    assert g[0] == pytest.approx(6.0, abs=1e-6)
    assert grad_check(lambda p: nx.mul(p, p).sum(), x) < 1e-5
    g0 = tape_gradient(lambda p: Tensor(np.array(2.5)), Tensor(np.array([1.0, 2.0])))
    assert np.array_equal(g0, [0.0, 0.0])


def _f64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


OPS = {
    "add": lambda p, c: nx.add(p, c).sum(),
    "sub": lambda p, c: nx.sub(c, p).sum(),
    "mul": lambda p, c: nx.mul(p, c).sum(),
    "matmul": lambda p, c: nx.mul(nx.matmul(p, c.transpose(1, 0)), nx.matmul(p, c.transpose(1, 0))).sum(),
    "softmax": lambda p, c: nx.mul(nx.softmax(p, axis=-1), c).sum(),
    "layer_norm": lambda p, c: nx.mul(nx.layer_norm(p, _f64(np.linspace(0.5, 1.5, 4)), _f64(np.zeros(4))), c).sum(),
    "gelu": lambda p, c: nx.mul(nx.gelu(p), c).sum(),
    "silu": lambda p, c: nx.mul(nx.silu(p), c).sum(),
    "mean": lambda p, c: nx.mul(p.mean(axis=0, keepdims=True), p.mean(axis=0, keepdims=True)).sum(),
    "reshape_transpose": lambda p, c: nx.mul(p.reshape(4, 3).transpose(1, 0), c.reshape(4, 3).transpose(1, 0)).sum(),
    "mse": lambda p, c: nx.mse(p, c),
    "scale": lambda p, c: nx.mul(nx.scale(p, -0.7), c).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
@given(st.integers(0, 2 ** 31 - 1))
def test_every_op_passes_grad_check(name, seed):
    g = np.random.default_rng(seed)
    p = _f64(g.standard_normal((3, 4)))
    c = _f64(g.standard_normal((3, 4)))
    assert grad_check(lambda q: OPS[name](q, c), p) < 1e-3


def test_grad_check_over_a_whole_denoiser_block():
    cfg = DiTConfig(num_blocks=3, num_heads=2, dim=4, mlp_ratio=4)
    ps = ParamSet()
    init_block_params(ps, "b", cfg, RngStream(5))
    g = np.random.default_rng(5)
    for t in ps.values():
        t.data = (0.1 * g.standard_normal(t.shape)).astype(np.float32)
    assert ps.num_values() <= 500
    ps = float64_params(ps)
    h = _f64(g.standard_normal((1, 3, 4)))
    target = _f64(g.standard_normal((1, 3, 4)))
    for name in list(ps):
        def loss(p, name=name):
            local = ParamSet({k: (p if k == name else v) for k, v in ps.items()})
            return nx.mse(block_forward(h, local, "b", 2), target)
        assert grad_check(loss, ps[name]) < 1e-3, name


def test_tape_ignores_frozen_and_untracked():
    w = Tensor(np.ones(3), frozen=True)
    x = Tensor(np.arange(3.0), requires_grad=True)
    with GradTape() as tape:
        y = nx.mul(w, x).sum()
    tape.backward(y)
    assert w.grad is None
    assert np.array_equal(x.grad, np.ones(3))


@given(st.integers(0, 2 ** 63 - 1))
def test_rng_streams_reproduce(seed):
    a = RngStream(seed).normal((5,))
    b = RngStream(seed).normal((5,))
    assert np.array_equal(a, b)
    s = RngStream(seed)
    assert not np.array_equal(s.split(1).normal((5,)), s.split(2).normal((5,)))


def test_tensor_file_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
    save_tensor(tmp_path / "a.f32", a)
    assert np.array_equal(load_tensor(tmp_path / "a.f32"), a)
    raw = (tmp_path / "a.f32").read_bytes()
    (tmp_path / "b.f32").write_bytes(raw[:-4])
    with pytest.raises(ShapeError):
        load_tensor(tmp_path / "b.f32")
