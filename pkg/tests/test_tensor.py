import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakseg import tensor as T
from weakseg.errors import ContractError, DimensionError


def naive_conv3d(x, w, pads, strides):
    """Direct nested-loop cross-correlation used as the oracle."""
    xp = np.pad(x, tuple(pads) + ((0, 0),))
    kz, ky, kx, cin, cout = w.shape
    sz, sy, sx = strides
    oz = (xp.shape[0] - kz) // sz + 1
    oy = (xp.shape[1] - ky) // sy + 1
    ox = (xp.shape[2] - kx) // sx + 1
    out = np.zeros((oz, oy, ox, cout))
    for z in range(oz):
        for y in range(oy):
            for xx in range(ox):
                for co in range(cout):
                    acc = 0.0
                    for a in range(kz):
                        for b in range(ky):
                            for c in range(kx):
                                for ci in range(cin):
                                    acc += xp[z * sz + a, y * sy + b, xx * sx + c, ci] * w[a, b, c, ci, co]
                    out[z, y, xx, co] = acc
    return out


def random_conv_instance(rng):
    shape = tuple(int(v) for v in rng.integers(1, 6, size=3))
    cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
    pads = tuple((int(rng.integers(0, 2)), int(rng.integers(0, 2))) for _ in range(3))
    strides = tuple(int(v) for v in rng.integers(1, 3, size=3))
    kernel = tuple(int(rng.integers(1, min(3, shape[a] + sum(pads[a])) + 1)) for a in range(3))
    x = rng.standard_normal(shape + (cin,))
    w = rng.standard_normal(kernel + (cin, cout))
    return x, w, pads, strides


def test_conv3d_matches_naive_reference_on_200_random_instances():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        x, w, pads, strides = random_conv_instance(rng)
        got = T.conv3d(T.Tensor(x), T.Tensor(w), pad=pads, stride=strides).data
        want = naive_conv3d(x, w, pads, strides)
        assert got.shape == want.shape
        worst = max(worst, float(np.max(np.abs(got - want))))
    assert worst <= 1e-12


def test_conv3d_hand_computed_2x2():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    w = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 2, 2, 1, 1)
    out = T.conv3d(T.Tensor(x), T.Tensor(w)).data
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 5.0


def test_conv3d_collapses_six_slices():
    x = T.Tensor(np.zeros((6, 64, 64, 1)))
    w = T.Tensor(np.zeros((6, 3, 3, 1, 8)))
    assert T.conv3d(x, w, pad=((0, 0), (1, 1), (1, 1))).shape == (1, 64, 64, 8)


def test_conv3d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4, 5, 3))
    w = np.eye(3).reshape(1, 1, 1, 3, 3)
    np.testing.assert_array_equal(T.conv3d(T.Tensor(x), T.Tensor(w)).data, x)


def test_conv3d_chunked_path_matches_single_pass(monkeypatch):
    rng = np.random.default_rng(5)
    x = T.parameter(rng.standard_normal((3, 9, 7, 2)))
    w = T.parameter(rng.standard_normal((2, 3, 3, 2, 3)))
    full = T.conv3d(x, w, pad=1)
    gx, gw = T.backward(T.sum_all(T.mul(full, full.data)), [x, w])
    monkeypatch.setattr(T, "_IM2COL_LIMIT", 50)
    assert len(T._row_chunks(full.shape[:3], w.shape)) > 1
    chunked = T.conv3d(x, w, pad=1)
    cx, cw = T.backward(T.sum_all(T.mul(chunked, chunked.data)), [x, w])
    np.testing.assert_allclose(chunked.data, full.data, rtol=0, atol=1e-12)
    np.testing.assert_allclose(cx, gx, rtol=0, atol=1e-10)
    np.testing.assert_allclose(cw, gw, rtol=0, atol=1e-10)


@pytest.mark.parametrize(
    "x_shape, w_shape, pad, fragment",
    [
        ((4, 4, 4, 2), (1, 1, 1, 3, 1), 0, "channel"),
        ((2, 4, 4, 1), (3, 1, 1, 1, 1), 0, "z-axis"),
        ((4, 2, 4, 1), (1, 4, 1, 1, 1), ((0, 0), (0, 1), (0, 0)), "y-axis"),
        ((4, 4, 1, 1), (1, 1, 2, 1, 1), 0, "x-axis"),
    ],
)
def test_conv3d_shape_errors_name_the_axis(x_shape, w_shape, pad, fragment):
    with pytest.raises(DimensionError, match=fragment):
        T.conv3d(T.Tensor(np.ones(x_shape)), T.Tensor(np.ones(w_shape)), pad=pad)


def test_conv3d_rejects_bad_stride_and_rank():
    x = T.Tensor(np.ones((2, 2, 2, 1)))
    with pytest.raises(DimensionError):
        T.conv3d(x, T.Tensor(np.ones((1, 1, 1, 1, 1))), stride=0)
    with pytest.raises(DimensionError):
        T.conv3d(T.Tensor(np.ones((2, 2, 1))), T.Tensor(np.ones((1, 1, 1, 1, 1))))


def test_zero_extent_tensor_is_rejected():
    with pytest.raises(DimensionError):
        T.Tensor(np.zeros((0, 3)))


def test_primitive_examples():
    np.testing.assert_array_equal(T.apply_primitive("relu", T.Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_array_equal(T.apply_primitive("add", T.Tensor([1.0, 2.0]), T.Tensor([3.0, 4.0])).data, [4, 6])
    cat = T.apply_primitive("concat_channels", T.Tensor(np.ones((3, 4, 2))), T.Tensor(np.zeros((3, 4, 3))))
    assert cat.shape == (3, 4, 5)
    with pytest.raises(DimensionError):
        T.apply_primitive("add", T.Tensor([1.0]), T.Tensor([1.0, 2.0]))
    with pytest.raises(DimensionError):
        T.concat_channels(T.Tensor(np.ones((3, 4, 2))), T.Tensor(np.ones((3, 5, 2))))
    with pytest.raises(ContractError):
        T.apply_primitive("tanh", T.Tensor([1.0]))


def test_maxpool_examples_and_tie_routing():
    assert T.maxpool2d(T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])).data.item() == 4.0
    const = T.maxpool2d(T.Tensor(np.full((4, 6, 2), 7.0)))
    assert const.shape == (2, 3, 2) and np.all(const.data == 7.0)

    x = T.parameter(np.array([[4.0, 1.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]])[..., None])
    out = T.maxpool2d(x)
    np.testing.assert_array_equal(out.data[..., 0], [[4.0, 2.0]])
    (g,) = T.backward(T.sum_all(out), [x])
    np.testing.assert_array_equal(g[..., 0], [[1, 0, 1, 0], [0, 0, 0, 0]])


def test_maxpool_rejects_odd_extent():
    with pytest.raises(DimensionError):
        T.maxpool2d(T.Tensor(np.ones((3, 4, 1))))


def test_upsample_examples():
    np.testing.assert_array_equal(T.upsample2d_nearest(T.Tensor(np.ones((1, 1, 1)))).data[..., 0], np.ones((2, 2)))
    up = T.upsample2d_nearest(T.Tensor(np.array([[1.0, 2.0]])[..., None])).data[..., 0]
    np.testing.assert_array_equal(up, [[1, 1, 2, 2], [1, 1, 2, 2]])


@settings(max_examples=30, deadline=None)
@given(
    lead=st.integers(1, 2),
    h=st.integers(1, 4),
    w=st.integers(1, 4),
    c=st.integers(1, 3),
    seed=st.integers(0, 2**31 - 1),
)
def test_maxpool_inverts_upsample(lead, h, w, c, seed):
    x = np.random.default_rng(seed).standard_normal((lead, h, w, c))
    back = T.maxpool2d(T.upsample2d_nearest(T.Tensor(x)))
    np.testing.assert_array_equal(back.data, x)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_channels(T.Tensor(np.zeros(5))).data, 0.2, atol=1e-15)
    big = T.softmax_channels(T.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-300)
    np.testing.assert_allclose(T.softmax_channels(T.Tensor([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 300.0), c=st.integers(2, 7))
def test_softmax_rows_are_distributions(seed, scale, c):
    logits = scale * np.random.default_rng(seed).standard_normal((3, 4, c))
    p = T.softmax_channels(T.Tensor(logits)).data
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_log_softmax_agrees_with_softmax():
    logits = np.random.default_rng(3).standard_normal((2, 3, 5)) * 4
    np.testing.assert_allclose(
        np.exp(T.log_softmax_channels(T.Tensor(logits)).data), T.softmax_channels(T.Tensor(logits)).data, atol=1e-15
    )


def test_backward_examples():
    p = T.parameter(np.array([3.0, -1.0, 0.5]))
    (g,) = T.backward(T.sum_all(p), [p])
    np.testing.assert_array_equal(g, np.ones(3))

    p = T.parameter(np.array([-1.0, 2.0]))
    (g,) = T.backward(T.sum_all(T.relu(p)), [p])
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_backward_sets_leaf_grads_and_zero_for_unreachable():
    a = T.parameter(np.array([1.0, 2.0]))
    unused = T.parameter(np.array([5.0]))
    loss = T.sum_all(T.mul(a, a))
    ga, gu = T.backward(loss, [a, unused])
    np.testing.assert_array_equal(ga, [2.0, 4.0])
    np.testing.assert_array_equal(gu, [0.0])
    np.testing.assert_array_equal(a.grad, [2.0, 4.0])

    a2 = T.parameter(np.array([1.0, 2.0]))
    T.sum_all(T.mul(a2, 3.0)).backward()
    np.testing.assert_array_equal(a2.grad, [3.0, 3.0])


def test_backward_accumulates_over_shared_nodes():
    x = T.parameter(np.array([1.5, -2.0]))
    y = T.relu(x)
    loss = T.sum_all(T.add(T.mul(y, y), T.add(x, x)))
    (g,) = T.backward(loss, [x])
    np.testing.assert_array_equal(g, [2 * 1.5 + 2, 0 + 2])


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        T.backward(T.parameter(np.ones(3)))


def test_graph_nodes_are_topologically_ordered():
    x = T.parameter(np.ones((2, 2, 2, 1)))
    loss = T.sum_all(T.relu(T.add(x, T.mul(x, 2.0))))
    nodes = T.graph_nodes(loss)
    position = {n._id: i for i, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            assert position[p._id] < position[n._id]
    assert nodes[-1] is loss


def test_gradient_check_rejects_nonpositive_eps():
    p = T.parameter(np.ones(2))
    with pytest.raises(ContractError):
        T.gradient_check(lambda: T.sum_all(p), p, eps=0.0)


# -- finite-difference checks for every primitive ---------------------------


def _probe(out: T.Tensor, rng) -> np.ndarray:
    return rng.standard_normal(out.shape)


def _check(build, params, rng, tol=1e-6):
    probe = _probe(build(), rng)

    def loss():
        return T.sum_all(T.mul(build(), probe))

    return max(T.gradient_check(loss, p) for p in params)


def away_from_zero(rng, shape, margin=0.2):
    v = rng.uniform(margin, 1.5, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


PRIMITIVE_SEEDS = range(4)


@pytest.mark.parametrize("seed", PRIMITIVE_SEEDS)
def test_gradcheck_conv3d(seed):
    rng = np.random.default_rng(seed)
    x, w, pads, strides = random_conv_instance(rng)
    px, pw = T.parameter(x), T.parameter(w)
    assert _check(lambda: T.conv3d(px, pw, pad=pads, stride=strides), [px, pw], rng) < 1e-6


def test_gradcheck_conv3d_3x3_on_8x8():
    rng = np.random.default_rng(11)
    px = T.parameter(rng.standard_normal((1, 8, 8, 2)))
    pw = T.parameter(rng.standard_normal((1, 3, 3, 2, 3)))
    build = lambda: T.conv3d(px, pw, pad=((0, 0), (1, 1), (1, 1)))
    assert _check(build, [px, pw], rng) < 1e-6


@pytest.mark.parametrize("seed", PRIMITIVE_SEEDS)
def test_gradcheck_elementwise_and_structural(seed):
    rng = np.random.default_rng(100 + seed)
    shape = (int(rng.integers(1, 3)), 2 * int(rng.integers(1, 3)), 2 * int(rng.integers(1, 3)), int(rng.integers(2, 4)))
    a = T.parameter(away_from_zero(rng, shape))
    b = T.parameter(rng.standard_normal(shape))
    bias = T.parameter(rng.standard_normal(shape[-1]))
    # distinct values keep max pooling away from ties
    pool_in = T.parameter(rng.permutation(np.prod(shape)).reshape(shape) * 0.1)
    positive = T.parameter(rng.uniform(0.5, 2.0, size=shape))
    cases = {
        "relu": (lambda: T.relu(a), [a]),
        "add": (lambda: T.add(a, b), [a, b]),
        "bias_add": (lambda: T.bias_add(a, bias), [a, bias]),
        "concat": (lambda: T.concat_channels(a, b), [a, b]),
        "maxpool": (lambda: T.maxpool2d(pool_in), [pool_in]),
        "upsample": (lambda: T.upsample2d_nearest(b), [b]),
        "softmax": (lambda: T.softmax_channels(b), [b]),
        "log_softmax": (lambda: T.log_softmax_channels(b), [b]),
        "clamp_min": (lambda: T.clamp_min(positive, 0.25), [positive]),
        "log": (lambda: T.log(positive), [positive]),
        "mul_tensor": (lambda: T.mul(a, b), [a, b]),
        "mul_const": (lambda: T.mul(a, 2.5), [a]),
        "mean_all": (lambda: T.mul(T.mean_all(a), np.ones(())), [a]),
    }
    for name, (build, params) in cases.items():
        err = _check(build, params, rng)
        assert err < 1e-6, f"{name}: relative error {err:.2e}"


def test_gradcheck_softmax_cross_entropy():
    rng = np.random.default_rng(9)
    logits = T.parameter(rng.standard_normal((1, 3, 3, 5)))
    target = np.eye(5)[rng.integers(0, 5, size=(1, 3, 3))]

    def loss():
        return T.mul(T.sum_all(T.mul(T.log(T.softmax_channels(logits)), target)), -1.0)

    assert T.gradient_check(loss, logits) < 1e-6


def test_clamp_min_blocks_gradient_below_floor():
    x = T.parameter(np.array([0.05, 0.5]))
    (g,) = T.backward(T.sum_all(T.clamp_min(x, 0.1)), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0])


# -- serialization ------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(shape=st.lists(st.integers(1, 4), min_size=0, max_size=4), seed=st.integers(0, 2**31 - 1))
def test_dump_load_round_trip(shape, seed):
    arr = np.random.default_rng(seed).standard_normal(tuple(shape))
    blob = T.dump_array(arr)
    assert blob.startswith(b"shape: ")
    back = T.load_array(blob)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.astype("<f8").tobytes()


def test_dump_format_is_little_endian_row_major():
    blob = T.dump_array(np.array([[1.0, 2.0], [3.0, 4.0]]))
    header, payload = blob.split(b"\n", 1)
    assert header == b"shape: 2,2"
    assert payload == np.array([1.0, 2.0, 3.0, 4.0], dtype="<f8").tobytes()


@pytest.mark.parametrize("blob", [b"no header", b"shape: 2,x\n", b"shape: 2,2\n" + b"\0" * 8])
def test_load_rejects_malformed_blobs(blob):
    with pytest.raises(OSError):
        T.load_array(blob, "w.tensor")


def test_stack_grads_sums_in_order():
    total = T.stack_grads([[np.ones(2), np.zeros(1)], [np.full(2, 2.0), np.ones(1)]])
    np.testing.assert_array_equal(total[0], [3.0, 3.0])
    np.testing.assert_array_equal(total[1], [1.0])
    assert T.stack_grads([]) == []
