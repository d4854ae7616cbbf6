import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roomsdf import autodiff as ad
from roomsdf.gradcheck import check_scalar_graph, run_autodiff_suite


def test_square_polynomial():
    x = ad.Tensor(3.0, requires_grad=True)
    y = ad.square(x)
    val, (gx,) = ad.eval_and_grad(y, [x])
    assert val == 9.0
    assert gx == 6.0


def test_product_rule():
    x = ad.Tensor(2.0, requires_grad=True)
    y = ad.Tensor(5.0, requires_grad=True)
    out = ad.mul(x, y)
    _, (gx, gy) = ad.eval_and_grad(out, [x, y])
    assert gx == 5.0 and gy == 2.0


def test_mlp_matches_finite_differences():
    # independent oracle: central differences at h=1e-4 on a 16-unit MLP
    rng = np.random.default_rng(11)
    dims = [(3, 16), (16, 16), (16, 1)]
    leaves = []
    for din, dout in dims:
        leaves.append(ad.Tensor(rng.normal(0, 1 / np.sqrt(din), (din, dout)), requires_grad=True))
        leaves.append(ad.Tensor(rng.normal(0, 0.1, (dout,)), requires_grad=True))
    xin = rng.normal(0, 1, (5, 3))

    def build(leaves):
        h = ad.constant(xin)
        for i in range(0, len(leaves), 2):
            h = ad.matmul(h, leaves[i]) + leaves[i + 1]
            if i < len(leaves) - 2:
                h = ad.softplus(h)
        return ad.reduce_sum(ad.square(h))

    assert check_scalar_graph(build, leaves) < 1e-4


def test_randomized_graph_suite():
    for name, err, tol in run_autodiff_suite(seed=3):
        assert err < tol, name


def test_min_tie_break_first_operand():
    a = ad.Tensor([0.3, 0.5], requires_grad=True)
    b = ad.Tensor([0.3, 0.2], requires_grad=True)
    out = ad.reduce_sum(ad.minimum(a, b))
    _, (ga, gb) = ad.eval_and_grad(out, [a, b])
    np.testing.assert_array_equal(ga, [1.0, 0.0])
    np.testing.assert_array_equal(gb, [0.0, 1.0])


def test_reduce_min_tie_goes_to_lowest_index():
    s = ad.Tensor([[0.3, 0.3]], requires_grad=True)
    out = ad.reduce_sum(ad.reduce_min(s, axis=1))
    val, (g,) = ad.eval_and_grad(out, [s])
    assert val == 0.3
    np.testing.assert_array_equal(g, [[1.0, 0.0]])


def test_softplus_overflow_safe():
    x = ad.Tensor([31.0, 100.0, 700.0])
    y = ad.softplus(x)
    assert np.all(np.abs(y.data - x.data) < 1e-9)
    assert np.all(np.isfinite(y.data))


def test_sigmoid_extreme_inputs_finite():
    x = ad.Tensor([-800.0, 800.0], requires_grad=True)
    y = ad.sigmoid(x)
    assert np.all(np.isfinite(y.data))
    assert y.data[0] == 0.0 and y.data[1] == 1.0


def test_determinism_bitwise():
    rng = np.random.default_rng(5)
    w = ad.Tensor(rng.normal(size=(8, 8)), requires_grad=True)
    x = rng.normal(size=(4, 8))

    def run():
        out = ad.reduce_sum(ad.sigmoid(ad.matmul(ad.constant(x), w)))
        return ad.eval_and_grad(out, [w])

    v1, (g1,) = run()
    v2, (g2,) = run()
    assert v1.tobytes() == v2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_nonfinite_detection_names_node():
    x = ad.Tensor([1.0, 0.0], requires_grad=True)
    ad.set_check_finite(True)
    try:
        with pytest.raises(ad.NonFiniteError, match="log"):
            ad.log(x - 1.0)
    finally:
        ad.set_check_finite(False)


def test_broadcasting_grads():
    a = ad.Tensor(np.ones((4, 3)), requires_grad=True)
    b = ad.Tensor(2.0, requires_grad=True)
    out = ad.reduce_sum(ad.mul(a, b))
    _, (ga, gb) = ad.eval_and_grad(out, [a, b])
    np.testing.assert_array_equal(ga, np.full((4, 3), 2.0))
    assert gb == 12.0


def test_cumprod_gradient():
    x = ad.Tensor([0.9, 0.5, 0.7], requires_grad=True)

    def build(leaves):
        return ad.reduce_sum(ad.cumprod(leaves[0], axis=0))

    assert check_scalar_graph(build, [x]) < 1e-6


def test_take_and_take_along():
    codes = ad.Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    picked = ad.take(codes, np.array([1, 1, 3]), axis=0)
    out = ad.reduce_sum(picked)
    _, (g,) = ad.eval_and_grad(out, [codes])
    np.testing.assert_array_equal(g.sum(axis=1), [0.0, 6.0, 0.0, 3.0])

    vals = ad.Tensor(np.array([[3.0, 1.0], [2.0, 5.0]]), requires_grad=True)
    idx = np.array([[1], [0]])
    sel = ad.take_along(vals, idx, axis=1)
    _, (g,) = ad.eval_and_grad(ad.reduce_sum(sel), [vals])
    np.testing.assert_array_equal(g, [[0.0, 1.0], [1.0, 0.0]])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6))
def test_minimum_never_exceeds_either(vals):
    a = np.array(vals)
    b = a[::-1].copy()
    m = ad.minimum(ad.constant(a), ad.constant(b)).data
    assert np.all(m <= a) and np.all(m <= b)


class TestAdam:
    def test_zero_grad_keeps_params(self):
        p = ad.Tensor([1.0, -2.0], requires_grad=True)
        st_ = ad.AdamState.for_params([p])
        before = p.data.copy()
        ad.adam_step([p], [np.zeros(2)], st_)
        np.testing.assert_array_equal(p.data, before)
        assert st_.step_count == 1

    def test_first_step_closed_form(self):
        p = ad.Tensor(0.0, requires_grad=True)
        st_ = ad.AdamState.for_params([p], lr=5e-4)
        ad.adam_step([p], [np.asarray(1.0)], st_)
        # bias-corrected m̂/sqrt(v̂) is 1, so the step is -lr/(1+eps)
        assert abs(p.data - (-5e-4)) < 1e-9

    def test_quadratic_convergence_oracle(self):
        # oracle: run the scalar optimization itself
        w = ad.Tensor(0.0, requires_grad=True)
        st_ = ad.AdamState.for_params([w], lr=0.1)
        for _ in range(100):
            loss = ad.square(w - 2.0)
            _, (g,) = ad.eval_and_grad(loss, [w])
            ad.adam_step([w], [g], st_)
        assert abs(float(w.data) - 2.0) < 0.05

    def test_shape_mismatch_raises(self):
        p = ad.Tensor([1.0, 2.0], requires_grad=True)
        st_ = ad.AdamState.for_params([p])
        with pytest.raises(ValueError):
            ad.adam_step([p], [np.zeros(3)], st_)


class TestGeometricInit:
    def _net(self, rng, k=3, hidden=32, enc_dim=15):
        shapes = [(enc_dim, hidden), (hidden, hidden), (hidden, k + 8)]
        ws, bs = ad.geometric_init(shapes, 0.5, rng, n_heads=k)
        return ws, bs

    def _eval(self, ws, bs, p):
        # first layer sees [xyz, zero-padded encoding]; encoding cols are zeroed
        enc = np.concatenate([p, np.zeros((len(p), 12))], axis=1)
        h = enc
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = h @ w.data + b.data
            if i < len(ws) - 1:
                z = 100.0 * h
                h = np.maximum(h, 0.0) + np.log1p(np.exp(-np.abs(z))) / 100.0
        return h

    def test_origin_inside(self):
        ws, bs = self._net(np.random.default_rng(0))
        out = self._eval(ws, bs, np.zeros((1, 3)))
        assert np.all(out[0, :3] < 0)

    def test_zero_level_near_sphere(self):
        rng = np.random.default_rng(1)
        ws, bs = self._net(rng)
        d = rng.normal(size=(100, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        out = self._eval(ws, bs, 0.5 * d)
        assert np.all(np.abs(out[:, :3]) < 0.1)

    def test_gradient_points_outward(self):
        rng = np.random.default_rng(2)
        ws, bs = self._net(rng)
        p = rng.uniform(0.5, 1.5, size=(50, 1)) * _unit(rng, 50)
        h = 1e-5
        for c in range(3):
            dp = np.zeros(3)
            dp[c] = h
            sp = self._eval(ws, bs, p + dp)[:, :3]
            sm = self._eval(ws, bs, p - dp)[:, :3]
            grad_c = (sp - sm) / (2 * h)
            if c == 0:
                grads = np.zeros((50, 3, 3))
            grads[:, c, :] = grad_c
        radial = np.einsum("nc,nch->nh", p, grads)
        assert np.all(radial > 0)

    def test_bad_args(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            ad.geometric_init([(3, 4)], -1.0, rng)


def _unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)
