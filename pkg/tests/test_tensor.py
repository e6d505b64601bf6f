import numpy as np
import pytest

from gliofuse import tensor as T


def _store(rng, **shapes):
    params = T.ParamStore()
    for name, shape in shapes.items():
        params.add(name, rng.normal(size=shape))
    return params


OPS = {
    "matmul": lambda p: T.sum_cols(T.mean_rows(T.matmul(p["a"], p["b"]))),
    "affine_relu": lambda p: T.sum_cols(T.mean_rows(T.relu(T.affine(p["a"], p["b"], p["c"])))),
    "mul_sub": lambda p: T.sum_cols(T.mean_rows(T.mul(T.sub(p["a"], 0.3), T.sub(1.0, p["a"])))),
    "sigmoid": lambda p: T.sum_cols(T.mean_rows(T.sigmoid(T.matmul(p["a"], p["b"])))),
    "softmax": lambda p: T.sum_cols(T.mean_rows(T.mul(T.softmax_rows(T.matmul(p["a"], p["b"])),
                                                      T.matmul(p["a"], p["b"])))),
    "concat_slice": lambda p: T.sum_cols(T.mean_rows(T.mul(
        T.slice_cols(T.concat([p["a"], T.matmul(p["a"], p["b"])]), 1, 5),
        T.slice_cols(T.concat([p["a"], T.matmul(p["a"], p["b"])]), 2, 6)))),
    "broadcast_add": lambda p: T.sum_cols(T.mean_rows(T.mul(T.add(p["a"], p["row"]), p["a"]))),
    "scale": lambda p: T.sum_cols(T.scale(T.mean_rows(T.mul(p["a"], p["a"])), -1.7)),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients(op):
    rng = np.random.default_rng(0)
    params = _store(rng, a=(6, 4), b=(4, 3), c=(1, 3), row=(1, 4))
    assert T.grad_check(OPS[op], params) < 1e-7


def test_dropout_is_inverted_and_seeded():
    x = T.constant(np.ones((200, 50)))
    a = T.dropout(x, 0.4, seed=3).value
    b = T.dropout(x, 0.4, seed=3).value
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1 / 0.6}
    assert abs(a.mean() - 1.0) < 0.03
    assert T.dropout(x, 0.4, seed=3, train=False) is x
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, seed=0)


def test_dropout_gradient_uses_same_mask():
    rng = np.random.default_rng(1)
    params = _store(rng, w=(5, 4))
    assert T.grad_check(lambda p: T.sum_cols(T.mean_rows(T.dropout(T.mul(p["w"], p["w"]), 0.5, 7))),
                        params) < 1e-7


def test_shape_errors_name_the_op():
    a = T.constant(np.zeros((3, 2)))
    b = T.constant(np.zeros((3, 2)))
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(a, b)
    with pytest.raises(T.ShapeError):
        T.add(a, T.constant(np.zeros((2, 2))))
    with pytest.raises(T.ShapeError):
        T.concat([a, T.constant(np.zeros((4, 1)))])


def test_backward_accumulates_shared_nodes():
    params = T.ParamStore()
    w = params.add("w", [[2.0]])
    loss = T.add(T.mul(w, w), w)  # w^2 + w
    T.backward(loss)
    assert w.grad[0, 0] == pytest.approx(5.0)


def test_param_store_rules():
    params = T.ParamStore()
    params.add("x", np.ones((2, 2)))
    with pytest.raises(KeyError):
        params.add("x", np.ones((1, 1)))
    with pytest.raises(T.NonFiniteError):
        params.add("y", [[np.nan]])
    snap = params.snapshot()
    params["x"].value += 1
    params.load(snap)
    assert np.array_equal(params["x"].value, np.ones((2, 2)))
    with pytest.raises(T.ShapeError):
        params.load({"x": np.ones((3, 3))})
    assert params.size() == 4


def test_adam_matches_hand_computation():
    params = T.ParamStore()
    w = params.add("w", [[1.0, -2.0]])
    state = T.AdamState.for_params(params, lr=0.1)
    grads = [np.array([[0.5, -1.0]]), np.array([[0.2, 0.4]])]
    m = np.zeros(2)
    v = np.zeros(2)
    expected = np.array([1.0, -2.0])
    for t, g in enumerate(grads, start=1):
        w.grad = g.copy()
        T.adam_step(params, state)
        m = 0.9 * m + 0.1 * g[0]
        v = 0.999 * v + 0.001 * g[0] ** 2
        expected = expected - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert w.value[0] == pytest.approx(expected, rel=1e-14)


def test_adam_per_parameter_rates_and_nonfinite():
    params = T.ParamStore()
    frozen = params.add("enc.x", [[1.0]])
    live = params.add("head.y", [[1.0]])
    state = T.AdamState.for_params(params, lambda n: 0.0 if n.startswith("enc") else 0.5)
    frozen.grad = np.array([[1.0]])
    live.grad = np.array([[1.0]])
    T.adam_step(params, state)
    assert frozen.value[0, 0] == 1.0 and live.value[0, 0] < 1.0
    live.grad = np.array([[np.inf]])
    with pytest.raises(T.NonFiniteError, match="head.y"):
        T.adam_step(params, state)


def test_grad_check_rejects_bad_eps_and_catches_wrong_gradient():
    params = T.ParamStore()
    params.add("w", [[0.3, 0.7]])
    with pytest.raises(ValueError):
        T.grad_check(lambda p: T.sum_cols(p["w"]), params, eps=1e-2)

    def wrong(p):
        w = p["w"]
        out = T.Node(np.array([[float(np.sum(w.value ** 2))]]), (w,))
        out._backward = lambda g: T._accumulate(w, g[0, 0] * w.value)  # missing factor 2
        return out

    assert T.grad_check(wrong, params) > 0.1
