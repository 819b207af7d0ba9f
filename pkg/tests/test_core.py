import numpy as np
import pytest
from hypothesis import given, strategies as st

from handfield.core import tensor as T
from handfield.core.checkpoint import CheckpointError, load_into, read_records, save_store, write_records
from handfield.core.encoding import EncodingConfig, positional_encode
from handfield.core.gradcheck import grad_check
from handfield.core.optim import ParamStore, adam_step
from handfield.core.tensor import DimensionError, Tape, Tensor


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def weighted(out):
    """Scalar probe: sum(out * r) for a fixed random r."""
    r = Tensor(np.random.default_rng(99).normal(size=out.shape))
    return T.sum(T.mul(out, r))


UNARY = {
    "square": T.square,
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
    "exp": T.exp,
    "clip": lambda a: T.clip(a, -0.5, 0.5),
    "sum_axis": lambda a: T.sum(a, axis=1),
    "mean": lambda a: T.mean(a, axis=0),
    "reshape": lambda a: T.reshape(a, (-1,)),
    "slice": lambda a: a[1:, ::2],
    "fancy": lambda a: a[np.array([0, 2, 0])],
    "scatter": lambda a: T.scatter_rows(a, np.array([4, 1, 0]), 6, fill=0.3),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = leaf(rng, 3, 4)
    # keep entries away from kinks of relu and clip
    x.data = np.where(np.abs(x.data) < 0.05, 0.2, x.data)
    x.data = np.where(np.abs(np.abs(x.data) - 0.5) < 0.05, 0.8, x.data)
    f = UNARY[name]
    assert grad_check(lambda: weighted(f(x)), [x], eps=1e-6) < 1e-6


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_binary_broadcast_gradients(op, rng):
    a, b = leaf(rng, 4, 3), leaf(rng, 1, 3)
    assert grad_check(lambda: weighted(op(a, b)), [a, b], eps=1e-6) < 1e-6


def test_matmul_linear_concat_gradients(rng):
    a, b = leaf(rng, 5, 3), leaf(rng, 3, 2)
    w, bias = leaf(rng, 3, 4), leaf(rng, 4)
    wb, bb = leaf(rng, 2, 3, 4), leaf(rng, 2, 4)
    xb = leaf(rng, 2, 5, 3)
    assert grad_check(lambda: weighted(T.matmul(a, b)), [a, b], eps=1e-6) < 1e-6
    assert grad_check(lambda: weighted(T.linear(a, w, bias)), [a, w, bias], eps=1e-6) < 1e-6
    assert grad_check(lambda: weighted(T.linear(xb, wb, bb)), [xb, wb, bb], eps=1e-6) < 1e-6
    assert grad_check(lambda: weighted(T.concat([a, T.square(a)], axis=1)), [a], eps=1e-6) < 1e-6


def conv_oracle(x, w, b):
    h, wd, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((h, wd, w.shape[3]))
    for i in range(h):
        for j in range(wd):
            out[i, j] = np.einsum("abc,abco->o", xp[i:i + 3, j:j + 3], w) + b
    return out


def test_conv_matches_loop_oracle(rng):
    x, w, b = rng.normal(size=(5, 6, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    out = T.conv2d_3x3(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, conv_oracle(x, w, b), atol=1e-12)


def test_image_op_gradients(rng):
    x, w, b = leaf(rng, 4, 5, 2), leaf(rng, 3, 3, 2, 3), leaf(rng, 3)
    assert grad_check(lambda: weighted(T.conv2d_3x3(x, w, b)), [x, w, b], eps=1e-6) < 1e-6
    assert grad_check(lambda: weighted(T.upsample_bilinear_2x(x)), [x], eps=1e-6) < 1e-6
    assert grad_check(lambda: weighted(T.avg_pool_2x(x[:, :4])), [x], eps=1e-6) < 1e-6


def test_upsample_interior_values():
    # half-pixel centers: output 2i+1 sits at 0.75 * x[i] + 0.25 * x[i+1]
    x = np.arange(4.0)[:, None, None] * np.ones((1, 1, 1))
    up = T.upsample_bilinear_2x(Tensor(np.repeat(x, 2, axis=1))).data[:, 0, 0]
    np.testing.assert_allclose(up, [0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0])


def test_composite_gradient(rng):
    sigma = Tensor(np.abs(rng.normal(size=(3, 6))) * 5, requires_grad=True)
    vals = leaf(rng, 3, 6, 2)
    deltas = rng.uniform(0.01, 0.2, size=(3, 6))
    assert grad_check(lambda: weighted(T.composite(sigma, vals, deltas)), [sigma, vals], eps=1e-6) < 1e-6


def test_composite_matches_product_form(rng):
    sigma, vals, deltas = rng.uniform(0, 10, (2, 5)), rng.uniform(size=(2, 5, 3)), rng.uniform(0.01, 0.3, (2, 5))
    out = T.composite(Tensor(sigma), Tensor(vals), deltas).data
    a = 1 - np.exp(-sigma * deltas)
    trans = np.array([[np.prod(1 - a[r, :i]) for i in range(5)] for r in range(2)])
    wts = trans * a
    np.testing.assert_allclose(out[:, :3], np.einsum("rs,rsc->rc", wts, vals), atol=1e-12)
    np.testing.assert_allclose(out[:, 3], wts.sum(1), atol=1e-12)


def test_shape_errors():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(DimensionError):
        T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 1))))
    with pytest.raises(DimensionError):
        T.avg_pool_2x(Tensor(np.zeros((3, 4, 1))))
    with pytest.raises(DimensionError):
        with Tape() as tape:
            tape.backward(T.mul(Tensor(np.ones(2), requires_grad=True), 2.0))


def test_no_tape_records_nothing(rng):
    x = leaf(rng, 3)
    y = T.sigmoid(x)
    assert not y.requires_grad and T.active_tape() is None


def test_gradient_accumulates_over_reuse(rng):
    x = leaf(rng, 4)
    with Tape() as tape:
        y = T.sum(T.add(T.mul(x, 3.0), x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, np.full(4, 4.0))


def test_encoding_example():
    cfg = EncodingConfig(num_frequencies=2)
    out = positional_encode(np.array([[0.25, 0.5]]), cfg)
    s, c = np.sin, np.cos
    p = np.pi
    want = [0.25, s(p / 4), c(p / 4), s(p / 2), c(p / 2), 0.5, s(p / 2), c(p / 2), s(p), c(p)]
    np.testing.assert_allclose(out[0], want, atol=1e-15)
    assert cfg.out_dim(2) == 10


@given(st.integers(0, 6), st.booleans(), st.integers(1, 4))
def test_encoding_shape(L, ident, d):
    cfg = EncodingConfig(num_frequencies=L, include_identity=ident)
    out = positional_encode(np.zeros((3, d)), cfg)
    assert out.shape == (3, cfg.out_dim(d))


def test_encoding_rejects_negative():
    with pytest.raises(ValueError):
        EncodingConfig(num_frequencies=-1)


def test_adam_first_step_closed_form():
    store = ParamStore()
    p = store.add("w", [1.0, -2.0, 3.0])
    p.grad = np.array([0.5, -4.0, 0.0])
    adam_step(store, lr=0.1)
    # bias-corrected first step moves by lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-8)


def test_adam_scalar_trace():
    # independent scalar re-implementation over a few steps with varying gradients
    store = ParamStore()
    p = store.add("w", [0.7])
    m = v = 0.0
    x = 0.7
    b1, b2, lr, eps = 0.9, 0.999, 0.05, 1e-8
    for k, g in enumerate([0.3, -1.2, 2.0, 0.1], start=1):
        p.grad = np.array([g])
        adam_step(store, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** k)) / (np.sqrt(v / (1 - b2 ** k)) + eps)
        assert p.data[0] == pytest.approx(x, abs=1e-14)


def test_adam_respects_mask_frozen_and_scale():
    store = ParamStore()
    a = store.add("a", np.ones((2, 2)), grad_mask=[[0.0], [1.0]])
    b = store.add("b", [1.0], trainable=False)
    c = store.add("c", [1.0], lr_scale=0.5)
    a.grad, b.grad, c.grad = np.ones((2, 2)), np.ones(1), np.ones(1)
    adam_step(store, lr=0.1)
    np.testing.assert_allclose(a.data, [[1, 1], [0.9, 0.9]], atol=1e-8)
    assert b.data[0] == 1.0 and c.data[0] == pytest.approx(0.95, abs=1e-8)
    assert a.grad is None and b.grad is None


def test_checkpoint_round_trip(tmp_path, rng):
    store = ParamStore()
    store.add("x/w", rng.normal(size=(3, 4)))
    store.add("x/b", rng.normal(size=4), trainable=False)
    store["x/w"].grad = rng.normal(size=(3, 4))
    adam_step(store)
    save_store(store, tmp_path / "c.hfld")
    other = ParamStore()
    other.add("x/w", np.zeros((3, 4)))
    other.add("x/b", np.zeros(4), trainable=False)
    load_into(other, tmp_path / "c.hfld")
    for n in store:
        np.testing.assert_array_equal(other[n].data, store[n].data.astype(np.float32))
    assert other.param("x/w").adam.step == 1
    np.testing.assert_allclose(other.param("x/w").adam.v, store.param("x/w").adam.v, rtol=1e-6)


def test_checkpoint_layout(tmp_path):
    write_records(tmp_path / "r", {"ab": np.array([[1.5, 2.0]])})
    raw = (tmp_path / "r").read_bytes()
    assert raw[:4] == b"HFLD"
    assert raw[4:12] == bytes([1, 0, 0, 0, 1, 0, 0, 0])
    assert raw[12:18] == b"\x02\x00\x00\x00ab"
    assert raw[-8:] == np.array([1.5, 2.0], dtype="<f4").tobytes()
    assert len(raw) == 12 + 4 + 2 + 4 + 16 + 8


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError, match="magic"):
        read_records(tmp_path / "bad")
    write_records(tmp_path / "t", {"w": np.ones(10)})
    (tmp_path / "t").write_bytes((tmp_path / "t").read_bytes()[:-20])
    with pytest.raises(CheckpointError, match="truncated"):
        read_records(tmp_path / "t")
    write_records(tmp_path / "s", {"w": np.ones(3)})
    store = ParamStore()
    store.add("w", np.ones(4))
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_into(store, tmp_path / "s")
    store2 = ParamStore()
    store2.add("v", np.ones(3))
    with pytest.raises(CheckpointError, match="lacks"):
        load_into(store2, tmp_path / "s")


def test_grad_check_detects_wrong_gradient(rng):
    x = leaf(rng, 4)

    def bad():
        out = T.square(x)
        out.data = out.data * 1.1  # forward no longer matches the recorded derivative
        return T.sum(out)

    assert grad_check(bad, [x], eps=1e-6) > 1e-3
