import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridflow import nn
from gridflow.nn import (
    AdamState, GraphError, Mlp, NonFiniteError, ShapeError, Tensor, adam_step, concat,
    dumps_checkpoint, finite_diff_check, gradients, load_checkpoint, masked_reduce, minimum,
    no_grad, parameter, save_checkpoint,
)
from oracles import adam_by_hand, mlp_numpy


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def check_op(build, *shapes, seed=0, positive=False, tol=1e-6):
    rng = np.random.default_rng(seed)
    xs = [parameter(rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s)) for s in shapes]
    out = build(*xs)
    gradients(out, {str(i): x for i, x in enumerate(xs)})
    for x in xs:
        with no_grad():
            num = numeric_grad(lambda: build(*xs).item(), x.data)
        np.testing.assert_allclose(x.grad, num, atol=tol, rtol=tol)


OPS = {
    "add_broadcast": (lambda a, b: (a + b).sum(), ((3, 4), (4,))),
    "mul": (lambda a, b: (a * b).sum(), ((3, 4), (3, 4))),
    "div": (lambda a, b: (a / b).sum(), ((3,), (3,))),
    "sub": (lambda a, b: (a - b).square().sum(), ((2, 3), (2, 3))),
    "matmul": (lambda a, b: (a @ b).tanh().sum(), ((3, 4), (4, 2))),
    "vec_matmul": (lambda a, b: (a @ b).sum(), ((4,), (4, 2))),
    "log_exp": (lambda a: (a.exp() + 1.0).log().sum(), ((5,),)),
    "log_softmax": (lambda a: (a.log_softmax() * Tensor(np.arange(5.0))).sum(), ((5,),)),
    "reshape_T": (lambda a: (a.reshape(3, 2).T * Tensor(np.arange(6.0).reshape(2, 3))).sum(), ((6,),)),
    "getitem_repeat": (lambda a: a[np.array([0, 0, 2])].square().sum(), ((3, 2),)),
    "reducers": (lambda a: a.max(axis=0).sum() + a.min(axis=1).sum() + a.mean(axis=0).sum(), ((4, 3),)),
    "concat": (lambda a, b: concat([a, b], axis=-1).tanh().sum(), ((2, 3), (2, 1))),
    "abs_clip": (lambda a: a.abs().sum() + a.clip(-0.5, 0.5).sum(), ((6,),)),
    "minimum": (lambda a, b: minimum(a, b).sum(), ((5,), (5,))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    build, shapes = OPS[name]
    check_op(build, *shapes, positive=name == "div")


@pytest.mark.parametrize("how", ["min", "max", "mean"])
def test_masked_reduce_gradient(how):
    rng = np.random.default_rng(1)
    mask = np.array([[True, True, False], [False, False, False], [True, True, True]])
    w = Tensor(rng.normal(size=(3, 2)))
    check_op(lambda x: (masked_reduce(x, mask, how) * w).sum(), (3, 3, 2))


def test_masked_reduce_values_and_ties():
    x = parameter(np.array([[[1.0], [1.0], [5.0]], [[0.0], [0.0], [0.0]]]))
    mask = np.array([[True, True, False], [False, False, False]])
    out = masked_reduce(x, mask, "max")
    np.testing.assert_array_equal(out.data, [[1.0], [0.0]])  # empty row -> zero
    gradients(out.sum(), {"x": x})
    # tie goes to the first valid slot
    np.testing.assert_array_equal(x.grad[0, :, 0], [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(x.grad[1], 0.0)
    assert masked_reduce(x, mask, "mean").data[0, 0] == 1.0
    with pytest.raises(ValueError):
        masked_reduce(x, mask, "median")


def test_grad_accumulates_over_shared_use():
    x = parameter([2.0])
    y = (x * x + x * 3.0).sum()
    gradients(y, {"x": x})
    assert x.grad[0] == pytest.approx(7.0)


def test_backward_twice_on_fresh_graph_is_identical():
    x = parameter(np.arange(3.0))
    g1 = gradients((x * x).sum(), {"x": x})["x"]
    g2 = gradients((x * x).sum(), {"x": x})["x"]
    np.testing.assert_array_equal(g1, g2)


def test_backward_errors():
    with pytest.raises(GraphError):
        parameter(np.ones(3)).backward()
    with pytest.raises(GraphError):
        Tensor(1.0).backward()


def test_no_grad_records_nothing():
    x = parameter(np.ones(2))
    with no_grad():
        y = (x * 2.0).sum()
    assert y._parents == () and not y.requires_grad
    assert ((x * 2.0).sum()).requires_grad


def test_mlp_matches_numpy_oracle():
    rng = np.random.default_rng(3)
    m = Mlp.init([5, 7, 7, 2], rng, hidden="relu", output="tanh")
    x = rng.normal(size=(4, 5))
    ref = mlp_numpy([w.data for w in m.weights], [b.data for b in m.biases], m.activations, x)
    np.testing.assert_allclose(m(x).data, ref, atol=1e-14)
    assert m.sizes == [5, 7, 7, 2]
    assert m.n_params() == 5 * 7 + 7 + 7 * 7 + 7 + 7 * 2 + 2


def test_mlp_init_bounds():
    rng = np.random.default_rng(0)
    m = Mlp.init([16, 32, 1], rng)
    assert np.all(np.abs(m.weights[0].data) <= 1 / 4)
    assert np.all(np.abs(m.biases[0].data) <= 1 / 4)
    z = Mlp.init([16, 32, 1], rng, gain=2.0, zero_bias=True)
    assert np.all(z.biases[0].data == 0) and np.abs(z.weights[0].data).max() > 1 / 4


def test_mlp_shape_error():
    m = Mlp.init([3, 2], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        m(np.ones((2, 4)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_finite_diff_check_passes_on_mlp():
    rng = np.random.default_rng(4)
    m = Mlp.init([4, 8, 8, 3], rng, hidden="tanh")
    x = rng.normal(size=(5, 4))
    named = m.named_parameters("m")
    err = finite_diff_check(named, lambda: m(x).log_softmax().sum(), samples=40)
    assert err < 1e-6


def test_finite_diff_catches_corrupted_backward(monkeypatch):
    # negative control: a tanh whose backward forgets the derivative factor
    def bad_tanh(self):
        y = np.tanh(self.data)
        return Tensor(y, _parents=(self,), _backward=lambda g, a=self: a._acc(g))
    rng = np.random.default_rng(5)
    m = Mlp.init([3, 6, 2], rng, hidden="tanh")
    x = rng.normal(size=(4, 3)) * 2
    named = m.named_parameters("m")
    loss = lambda: m(x).square().sum()
    assert finite_diff_check(named, loss, samples=30) < 1e-6
    monkeypatch.setitem(nn.ACTIVATIONS, "tanh", bad_tanh)
    assert finite_diff_check(named, loss, samples=30) > 1e-2


def test_adam_first_step_closed_form():
    x = parameter([0.0])
    state = AdamState(lr=0.1)
    adam_step({"x": x}, {"x": np.array([1.0])}, state)
    assert x.data[0] == pytest.approx(-0.1, abs=1e-8)


@given(gs=st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=6),
       lr=st.floats(1e-4, 0.5))
def test_adam_matches_hand_arithmetic(gs, lr):
    x = parameter([0.0])
    state = AdamState(lr=lr)
    ref = adam_by_hand(gs, lr)
    for g, want in zip(gs, ref):
        adam_step({"x": x}, {"x": np.array([g])}, state)
        assert x.data[0] == pytest.approx(want, rel=1e-12, abs=1e-15)
    assert state.step == len(gs)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"x": parameter(np.zeros(2))}, {"x": np.zeros(3)}, AdamState())


def test_nan_detected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with np.errstate(divide="ignore", over="ignore"):
        with pytest.raises(NonFiniteError):
            parameter([0.0]).log()
        with pytest.raises(NonFiniteError):
            Tensor([1e308]) * 10.0


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    params = {"a": parameter(rng.normal(size=(3, 4))), "b": parameter(rng.normal(size=5) * 1e-300)}
    path = tmp_path / "c.json"
    save_checkpoint(path, params, {"episode": 3})
    arrays, meta = load_checkpoint(path)
    assert meta == {"episode": 3}
    for k, t in params.items():
        assert arrays[k].dtype == np.float64
        assert arrays[k].tobytes() == t.data.tobytes()
    again = {k: Tensor(v) for k, v in arrays.items()}
    assert dumps_checkpoint(again, meta) == path.read_text()


def test_checkpoint_version_check(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"version": 99, "params": {}}')
    with pytest.raises(ValueError):
        load_checkpoint(path)
