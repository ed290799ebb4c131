import numpy as np
import pytest

from mooss import autodiff as ad
from mooss.autodiff import Adam, Parameter, Tensor, backward, grad_check
from mooss.errors import ConfigError, UsageError


def numeric_grad(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for ix in np.ndindex(x.shape):
        old = x[ix]
        x[ix] = old + eps
        fp = f()
        x[ix] = old - eps
        fm = f()
        x[ix] = old
        g[ix] = (fp - fm) / (2 * eps)
    return g


def check_op(build, shapes, seed, tol=1e-4, positive=False):
    """Compare the analytic gradient of sum(w * build(*inputs)) with central differences."""
    rng = np.random.default_rng(seed)
    inputs = []
    for shp in shapes:
        v = rng.uniform(0.5, 2.0, shp) if positive else rng.normal(size=shp)
        inputs.append(Parameter(v, name=f"in{len(inputs)}"))
    out_shape = build(*inputs).shape
    weights = rng.normal(size=out_shape)

    def loss():
        return (build(*inputs) * weights).sum()

    for p in inputs:
        p.zero_grad()
    backward(loss())
    for p in inputs:
        num = numeric_grad(lambda: loss().item(), p.data)
        err = ad.relative_error(p.grad, num).max()
        assert err <= tol, f"{p.name}: rel err {err}"


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)], False),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)], False),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)], False),
    "div": (lambda a, b: a / b, [(2, 3), (2, 3)], True),
    "relu": (lambda a: ad.relu(a), [(4, 5)], False),
    "exp": (lambda a: ad.exp(a), [(6,)], False),
    "log": (lambda a: ad.log(a), [(6,)], True),
    "sum_axis": (lambda a: a.sum(axis=1), [(3, 4)], False),
    "mean": (lambda a: a.mean(axis=0, keepdims=True), [(3, 4)], False),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)], False),
    "batched_matmul": (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 3)], False),
    "transpose": (lambda a: a.transpose(2, 0, 1), [(2, 3, 4)], False),
    "reshape": (lambda a: a.reshape(4, 6), [(2, 3, 4)], False),
    "softmax": (lambda a: ad.softmax(a), [(3, 5)], False),
    "layer_norm": (lambda a, g, b: ad.layer_norm(a, g, b), [(3, 6), (6,), (6,)], False),
    "linear": (lambda x, w, b: ad.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)], False),
    "conv2d": (lambda x, w, b: ad.conv2d(x, w, b, stride=1), [(1, 2, 5, 5), (3, 2, 3, 3), (3,)], False),
    "conv2d_stride2": (lambda x, w: ad.conv2d(x, w, stride=2), [(2, 1, 7, 7), (2, 1, 3, 3)], False),
    "gather": (lambda a: ad.gather(a, [0, 2, 2], axis=1), [(2, 4, 3)], False),
    "getitem": (lambda a: a[1:, ::2], [(3, 5)], False),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)], False),
    "stack": (lambda a, b: ad.stack([a, b], axis=0), [(2, 3), (2, 3)], False),
    "masked_logsumexp": (lambda a: ad.masked_logsumexp(a, np.array([[1, 0, 1, 1], [0, 1, 0, 0], [1, 1, 1, 1]], bool)),
                         [(3, 4)], False),
    "attention": (lambda x, wq, wk, wv, wo: ad.multi_head_attention(x, wq, wk, wv, wo, 2, ad.causal_mask(4)),
                  [(1, 4, 4), (4, 4), (4, 4), (4, 4), (4, 4)], False),
}


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", sorted(OPS))
def test_operator_matches_finite_differences(name, seed):
    build, shapes, positive = OPS[name]
    check_op(build, shapes, seed, positive=positive)


def test_forward_examples():
    assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert np.array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    img = np.random.default_rng(0).normal(size=(2, 3, 6, 5))
    ident = np.zeros((3, 3, 1, 1))
    ident[np.arange(3), np.arange(3)] = 1.0
    assert np.array_equal(ad.conv2d(Tensor(img), Tensor(ident), stride=1).data, img)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, 3, 2))
    s = 2
    ho, wo = (9 - 3) // s + 1, (8 - 2) // s + 1
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[n, o, i, j] = (x[n, :, i * s:i * s + 3, j * s:j * s + 2] * w[o]).sum()
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(w), stride=s).data, ref, rtol=1e-12, atol=1e-12)


def test_softmax_shift_invariant():
    x = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_allclose(ad.softmax(Tensor(x)).data, ad.softmax(Tensor(x + 100.0)).data, atol=1e-15)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ConfigError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ConfigError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_backward_linear_and_quadratic():
    p = Parameter([0.5, -1.0, 3.0])
    backward(p.sum())
    assert np.array_equal(p.grad, [1, 1, 1])
    q = Parameter([1.0, 2.0])
    backward((q * q).sum())
    assert np.array_equal(q.grad, [2, 4])


def test_backward_requires_scalar():
    p = Parameter(np.ones(3))
    with pytest.raises(UsageError):
        backward(p * 2.0)


def test_backward_is_additive():
    rng = np.random.default_rng(0)
    w = Parameter(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(5, 4)))

    def loss():
        return ad.softmax(ad.relu(x @ w)).sum() + (ad.exp(x @ w * 0.1)).mean()

    backward(loss())
    once = w.grad.copy()
    backward(loss())
    assert np.array_equal(w.grad, 2 * once)


def test_forward_is_pure():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 6, 8)))
    ws = [Tensor(rng.normal(size=(8, 8))) for _ in range(4)]
    a = ad.multi_head_attention(x, *ws, heads=2, additive_mask=ad.causal_mask(6)).data
    b = ad.multi_head_attention(x, *ws, heads=2, additive_mask=ad.causal_mask(6)).data
    assert np.array_equal(a, b)


def test_shared_subexpression_accumulates():
    p = Parameter([3.0])
    y = p * p
    backward((y + y * p).sum())  # d/dp (p^2 + p^3) = 2p + 3p^2
    assert p.grad[0] == pytest.approx(2 * 3 + 3 * 9)


def test_no_grad_records_nothing():
    p = Parameter(np.ones(3))
    with ad.no_grad():
        y = (p * 2.0).sum()
    assert not y.requires_grad and y._parents == ()


def test_sinusoidal_table_layout():
    tab = ad.sinusoidal_table(5, 6)
    assert tab.shape == (5, 6)
    np.testing.assert_allclose(tab[0], [0, 1, 0, 1, 0, 1])
    np.testing.assert_allclose(tab[3, 0], np.sin(3.0))
    np.testing.assert_allclose(tab[3, 3], np.cos(3.0 / 10000 ** (2 / 6)))


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_keeps_value():
    p = Parameter([1.5])
    opt = Adam([p], lr=0.1)
    opt.step()
    assert p.data[0] == 1.5 and opt.step_count == 1


def test_adam_first_step_hand_computed():
    # m1 = 0.1, v1 = 0.001; bias-corrected m = 1, v = 1 -> p = 1 - 0.1 * 1 / (1 + 1e-8)
    p = Parameter([1.0])
    opt = Adam([p], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert p.data[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_identical_params_identical_trajectories():
    a, b = Parameter([0.3, -0.2]), Parameter([0.3, -0.2])
    opt = Adam([a, b], lr=0.05)
    for k in range(20):
        g = np.array([np.sin(k), np.cos(k)])
        a.grad, b.grad = g.copy(), g.copy()
        opt.step()
        assert np.array_equal(a.data, b.data)


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(ConfigError):
        Adam([Parameter([1.0])], lr=0.0)


# ---------------------------------------------------------------- grad_check

def test_grad_check_linear_layer():
    rng = np.random.default_rng(0)
    w = Parameter(rng.normal(size=(4, 4)), name="w")
    b = Parameter(rng.normal(size=4), name="b")
    x = Tensor(rng.normal(size=(3, 4)))
    frozen = Tensor(rng.normal(size=(3, 4)))
    rep = grad_check(lambda: ((ad.linear(x, w, b) - frozen) * ad.linear(x, w, b)).sum(), [w, b])
    assert set(rep.errors) == {"w", "b"}
    assert rep.max_error <= 1e-6 and rep.ok


def test_grad_check_reports_wrong_gradient():
    p = Parameter([1.0, 2.0], name="p")

    def bad_square(x):
        out = ad.mul(x, x)
        out._backward = lambda g: ad._accumulate(x, g * x.data)  # missing factor 2
        return out

    rep = grad_check(lambda: bad_square(p).sum(), [p], tol=1e-4)
    assert not rep.ok and rep.failures() == ["p"]
