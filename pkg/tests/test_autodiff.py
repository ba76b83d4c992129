import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recchains import autodiff as ad
from recchains.nets import init_mlp, mlp_forward, mlp_leaves


def central_fd(f, x, h=1e-5, coords=None):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for c in range(flat.size) if coords is None else coords:
        old = flat[c]
        flat[c] = old + h
        fp = f()
        flat[c] = old - h
        fm = f()
        flat[c] = old
        gflat[c] = (fp - fm) / (2 * h)
    return g


def rel_err(g, fd):
    return np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8)


def test_relu_values():
    t = ad.Tape()
    assert ad.relu(t.leaf([-1.0, 2.0])).value.tolist() == [0.0, 2.0]


def test_relu_subgradient_at_zero():
    t = ad.Tape()
    x = t.leaf([0.0, 1.0], "x")
    assert ad.leaf_grads(ad.sum(ad.relu(x)))["x"].tolist() == [0.0, 1.0]


def test_mean_over_single_tensor():
    t = ad.Tape()
    x = t.leaf([1.0, -2.0, 3.0])
    assert np.array_equal(ad.mean_over_set([x]).value, x.value)


def test_matmul_inner_product():
    t = ad.Tape()
    a = t.leaf([[1.0, 2.0, 3.0]])
    b = t.leaf([[4.0], [5.0], [6.0]])
    assert ad.matmul(a, b).value.item() == 32.0


def test_square_gradient():
    t = ad.Tape()
    x = t.leaf(3.0, "x")
    assert ad.leaf_grads(ad.square(x))["x"] == 6.0


def test_mean_of_copies_gradient():
    t = ad.Tape()
    x = t.leaf(1.5, "x")
    assert ad.leaf_grads(ad.mean_over_set([x] * 7))["x"] == pytest.approx(1.0, abs=1e-15)


def test_unreachable_leaf_gets_zero():
    t = ad.Tape()
    x = t.leaf([1.0, 2.0], "x")
    t.leaf([[3.0]], "y")
    g = ad.leaf_grads(ad.sum(ad.square(x)))
    assert g["y"].tolist() == [[0.0]]
    assert g["x"].tolist() == [2.0, 4.0]


def test_non_scalar_loss_rejected():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError):
        ad.backward(t.leaf([1.0, 2.0]))


@pytest.mark.parametrize(
    "build, name",
    [
        (lambda t: ad.add(t.leaf(np.ones((2, 3))), t.leaf(np.ones((3, 2)))), "add"),
        (lambda t: ad.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3)))), "matmul"),
        (lambda t: ad.concat([t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 4)))], axis=0), "concat"),
        (lambda t: ad.reshape(t.leaf(np.ones((2, 3))), (4, 2)), "reshape"),
    ],
)
def test_shape_errors_name_the_op(build, name):
    with pytest.raises(ad.ShapeError, match=name):
        build(ad.Tape())


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_trips():
    t = ad.Tape()
    x = t.leaf([1e200])
    with pytest.raises(FloatingPointError):
        ad.square(ad.square(x))


def test_mixed_tapes_rejected():
    with pytest.raises(ValueError):
        ad.add(ad.Tape().leaf(1.0), ad.Tape().leaf(1.0))


def test_mlp_gradient_matches_fd():
    rng = np.random.default_rng(0)
    params = init_mlp(6, rng, hidden=16)
    x0 = rng.normal(size=(4, 7))
    arrays = params.weights + params.biases + [x0]

    def run():
        t = ad.Tape()
        layers = mlp_leaves(t, params, "net")
        x = t.leaf(x0, "x")
        out = mlp_forward(layers, x)
        return t, ad.sum(ad.square(out))

    _, loss = run()
    grads = ad.leaf_grads(loss)
    names = [f"net.w{n}" for n in range(3)] + [f"net.b{n}" for n in range(3)] + ["x"]
    for name, arr in zip(names, arrays):
        fd = central_fd(lambda: float(run()[1].value), arr)
        assert rel_err(grads[name], fd) < 1e-4, name


def test_gather_accumulates_repeats():
    t = ad.Tape()
    x = t.leaf(np.arange(6.0).reshape(3, 2), "x")
    g = ad.leaf_grads(ad.sum(ad.gather(x, [0, 2, 0])))["x"]
    assert g.tolist() == [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]


@pytest.mark.parametrize("segments", [[0, 0, 1, 2, 2], [2, 0, 1, 0, 2]])
def test_segment_mean_matches_mean_over_set(segments):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 3))
    t = ad.Tape()
    out = ad.segment_mean(t.leaf(a), segments, 3).value
    for s in range(3):
        rows = [a[n] for n, g in enumerate(segments) if g == s]
        t2 = ad.Tape()
        ref = ad.mean_over_set([t2.leaf(r) for r in rows]).value
        np.testing.assert_allclose(out[s], ref, rtol=1e-14)


def test_segment_mean_rejects_empty_segment():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError):
        ad.segment_mean(t.leaf(np.ones((2, 2))), [0, 2], 3)


# Random composite expressions over the primitive set

_UNARY = ("scale", "relu", "square", "reshape", "sum_axis", "gather", "matmul")
_BINARY = ("add", "mul", "concat_gather", "mean_over_set", "segment_mean", "linear")


def _build(seed, t, leaves):
    """Deterministically build an expression from ``seed`` over named leaves."""
    rng = np.random.default_rng(seed)
    pool = [leaves["a"], leaves["b"], leaves["c"]]
    for _ in range(rng.integers(2, 7)):
        if rng.random() < 0.5:
            op = _UNARY[rng.integers(len(_UNARY))]
            x = pool[rng.integers(len(pool))]
            if op == "scale":
                y = ad.scale(x, rng.uniform(-2, 2))
            elif op == "relu":
                y = ad.relu(x)
            elif op == "square":
                y = ad.scale(ad.square(x), 0.5)
            elif op == "reshape":
                y = ad.reshape(ad.reshape(x, (4, 3)), (3, 4))
            elif op == "sum_axis":
                y = ad.mul(x, ad.reshape(ad.sum(x, axis=1), (3, 1)))
            elif op == "gather":
                y = ad.gather(x, rng.integers(0, 3, 3))
            else:
                y = ad.matmul(x, leaves["w"])
        else:
            op = _BINARY[rng.integers(len(_BINARY))]
            x, z = (pool[n] for n in rng.integers(len(pool), size=2))
            if op == "add":
                y = ad.add(x, z)
            elif op == "mul":
                y = ad.mul(x, z)
            elif op == "concat_gather":
                y = ad.gather(ad.concat([x, z], axis=0), rng.permutation(6)[:3])
            elif op == "mean_over_set":
                y = ad.mean_over_set([x, z, x])
            elif op == "segment_mean":
                seg = np.concatenate([np.arange(3), rng.integers(0, 3, 3)])
                y = ad.segment_mean(ad.concat([x, z], axis=0), rng.permutation(seg), 3)
            else:
                y = ad.add(ad.linear(x, leaves["w"], leaves["bias"]), z)
        pool.append(y)
    return ad.sum(ad.mul(pool[-1], leaves["probe"]))


@settings(max_examples=100, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**32 - 1))
def test_composite_expressions_match_fd(seed):
    rng = np.random.default_rng([seed, 99])
    values = {
        "a": rng.normal(size=(3, 4)),
        "b": rng.normal(size=(3, 4)),
        "c": rng.normal(size=(3, 4)),
        "w": rng.normal(size=(4, 4)) / 2,
        "bias": rng.normal(size=4),
    }
    probe = rng.normal(size=(3, 4))

    def run():
        t = ad.Tape()
        leaves = {k: t.leaf(v, k) for k, v in values.items()}
        leaves["probe"] = t.constant(probe)
        return _build(seed, t, leaves)

    grads = ad.leaf_grads(run())
    for name, arr in values.items():
        fd = central_fd(lambda: float(run().value), arr)
        assert rel_err(grads[name], fd) < 1e-4, name
