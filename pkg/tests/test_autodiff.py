import numpy as np
import pytest

from aprop import autodiff as ad
from fdcheck import fd_grad, rel_err


def scalar_fn(build):
    """Wrap a graph builder into a value-only function of one ndarray."""

    def f(x):
        return float(build(ad.Tensor(x)).data)

    return f


class TestElementwise:
    def test_add_componentwise(self):
        out = ad.add(ad.Tensor([1.0, 2.0]), ad.Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_matmul_identity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 3))
        out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(x))
        assert np.array_equal(out.data, x)

    def test_grad_of_sum_product_is_other_factor(self):
        rng = np.random.default_rng(2)
        a0 = rng.normal(size=(4, 4))
        b0 = rng.normal(size=(4, 4))
        a = ad.Tensor(a0, requires_grad=True)
        loss = (a * ad.Tensor(b0)).sum()
        (ga,) = ad.backward(loss, [a])
        assert rel_err(ga.data, b0) < 1e-12
        fd = fd_grad(scalar_fn(lambda t: (t * ad.Tensor(b0)).sum()), a0)
        assert rel_err(ga.data, fd) < 1e-6

    def test_broadcast_gradients(self):
        rng = np.random.default_rng(3)
        a0 = rng.normal(size=(3, 1))
        b0 = rng.normal(size=(2, 3, 4))
        a = ad.Tensor(a0, requires_grad=True)
        loss = (a * ad.Tensor(b0)).sum()
        (ga,) = ad.backward(loss, [a])
        assert ga.shape == (3, 1)
        assert rel_err(ga.data, b0.sum(axis=(0, 2))[:, None]) < 1e-12

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4,))))
        with pytest.raises(ValueError):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))

    def test_checked_mode_divide_by_zero(self):
        with ad.checked_mode():
            with pytest.raises(ZeroDivisionError):
                ad.div(ad.Tensor([1.0]), ad.Tensor([0.0]))
        # unchecked: IEEE semantics
        with np.errstate(divide="ignore"):
            out = ad.div(ad.Tensor([1.0]), ad.Tensor([0.0]))
        assert np.isinf(out.data[0])

    def test_checked_mode_nonfinite(self):
        with ad.checked_mode():
            with pytest.raises(FloatingPointError):
                ad.Tensor([np.nan])
            with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
                ad.log(ad.Tensor([-1.0]))


class TestNonlinear:
    def test_relu_values(self):
        out = ad.relu(ad.Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_center(self):
        assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5

    def test_tanh_derivative(self):
        x = ad.Tensor(0.3, requires_grad=True)
        (g,) = ad.backward(ad.tanh(x), [x])
        analytic = 1.0 - np.tanh(0.3) ** 2
        assert rel_err(g.data, analytic) < 1e-12
        fd = fd_grad(scalar_fn(ad.tanh), np.asarray(0.3))
        assert rel_err(g.data, fd) < 1e-6

    def test_softmax_normalizes_last_dim(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 5))
        out = ad.softmax_lastdim(ad.Tensor(x))
        assert np.allclose(out.data.sum(axis=-1), 1.0)

    def test_nonlinear_dispatch(self):
        x = ad.Tensor([0.5])
        for kind in ad.NONLINEAR_KINDS:
            ad.nonlinear(x, kind)
        with pytest.raises(ValueError):
            ad.nonlinear(x, "gelu")

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 7)) * 10
        ls = ad.log_softmax_lastdim(ad.Tensor(x))
        ref = np.log(ad.softmax_lastdim(ad.Tensor(x)).data)
        assert rel_err(ls.data, ref) < 1e-12


class TestConvPool:
    def test_conv_all_ones_kernel_sums_input(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 1, 3, 3))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert rel_err(out.data, x.sum()) < 1e-12

    def test_maxpool_takes_window_max(self):
        x = ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = ad.maxpool2d(x, 2, 2)
        assert out.data.reshape(-1)[0] == 4.0

    def test_maxpool_tie_routes_to_lowest_index(self):
        x0 = np.zeros((1, 1, 2, 2))
        x = ad.Tensor(x0, requires_grad=True)
        out = ad.maxpool2d(x, 2, 2)
        (g,) = ad.backward(out.sum(), [x])
        expect = np.zeros((1, 1, 2, 2))
        expect[0, 0, 0, 0] = 1.0
        assert np.array_equal(g.data, expect)

    def test_avgpool_values(self):
        x = ad.Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = ad.avgpool2d(x, 2, 2)
        assert rel_err(out.data[0, 0, 0, 0], np.mean([0, 1, 4, 5])) < 1e-12

    def test_conv_kernel_gradient_matches_fd(self):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(2, 3, 8, 8))
        w0 = rng.normal(size=(4, 3, 3, 3))
        b0 = rng.normal(size=(4,))
        r = rng.normal(size=(2, 4, 6, 6))
        w = ad.Tensor(w0, requires_grad=True)
        out = ad.conv2d(ad.Tensor(x0), w, ad.Tensor(b0))
        (gw,) = ad.backward((out * ad.Tensor(r)).sum(), [w])

        def f(wd):
            o = ad.conv2d(ad.Tensor(x0), ad.Tensor(wd), ad.Tensor(b0))
            return float((o.data * r).sum())

        assert rel_err(gw.data, fd_grad(f, w0)) < 1e-4

    def test_conv_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            ad.conv2d(ad.Tensor(np.zeros((1, 2, 5, 5))),
                      ad.Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ValueError, match="larger"):
            ad.conv2d(ad.Tensor(np.zeros((1, 1, 3, 3))),
                      ad.Tensor(np.zeros((1, 1, 5, 5))))

    def test_conv_padding_stride(self):
        rng = np.random.default_rng(8)
        x0 = rng.normal(size=(1, 2, 7, 7))
        w0 = rng.normal(size=(3, 2, 3, 3))
        out = ad.conv2d(ad.Tensor(x0), ad.Tensor(w0), stride=2, padding=1)
        assert out.shape == (1, 3, 4, 4)
        # brute-force reference
        xp = np.pad(x0, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((1, 3, 4, 4))
        for co in range(3):
            for i in range(4):
                for j in range(4):
                    patch = xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    ref[0, co, i, j] = (patch * w0[co]).sum()
        assert rel_err(out.data, ref) < 1e-12


class TestBackward:
    def test_square_gradient(self):
        x = ad.Tensor(3.0, requires_grad=True)
        (g,) = ad.backward(x * x, [x])
        assert g.item() == 6.0

    def test_second_order_cubic(self):
        x = ad.Tensor(2.0, requires_grad=True)
        (g,) = ad.backward(x * x * x, [x], create_graph=True)
        (g2,) = ad.backward(g, [x])
        assert abs(g2.item() - 12.0) < 1e-12

    def test_second_order_mlp_matches_fd_of_first_order(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=(1, 4))
        w1_0 = rng.normal(size=(5, 4)) * 0.7
        w2_0 = rng.normal(size=(1, 5)) * 0.7

        def first_order_sq(w1d):
            xt = ad.Tensor(x0, requires_grad=True)
            h = ad.tanh(ad.matmul(xt, ad.transpose(ad.Tensor(w1d))))
            y = ad.tanh(ad.matmul(h, ad.transpose(ad.Tensor(w2_0))))
            (gx,) = ad.backward(y.sum(), [xt])
            return float((gx.data ** 2).sum())

        w1 = ad.Tensor(w1_0, requires_grad=True)
        xt = ad.Tensor(x0, requires_grad=True)
        h = ad.tanh(ad.matmul(xt, ad.transpose(w1)))
        y = ad.tanh(ad.matmul(h, ad.transpose(ad.Tensor(w2_0))))
        (gx,) = ad.backward(y.sum(), [xt], create_graph=True)
        (gw,) = ad.backward((gx * gx).sum(), [w1])
        fd = fd_grad(first_order_sq, w1_0, h=1e-4)
        assert rel_err(gw.data, fd) < 1e-3

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(x * x, [x])

    def test_wrt_not_in_graph_rejected(self):
        x = ad.Tensor(1.0, requires_grad=True)
        y = ad.Tensor(1.0, requires_grad=True)
        loss = x * x
        with pytest.raises(RuntimeError, match="not part"):
            ad.backward(loss, [y])

    def test_second_backward_without_create_graph_errors(self):
        x = ad.Tensor(2.0, requires_grad=True)
        (g,) = ad.backward(x * x, [x], create_graph=False)
        with pytest.raises(RuntimeError, match="graph"):
            ad.backward(g * g, [x])

    def test_backward_twice_same_graph_bit_identical(self):
        rng = np.random.default_rng(10)
        x = ad.Tensor(rng.normal(size=(6,)), requires_grad=True)
        loss = (ad.tanh(x) * x).sum()
        (g1,) = ad.backward(loss, [x], create_graph=True)
        (g2,) = ad.backward(loss, [x], create_graph=True)
        assert np.array_equal(g1.data, g2.data)

    def test_gradient_linearity_over_independent_losses(self):
        rng = np.random.default_rng(11)
        x0 = rng.normal(size=(5,))
        c = rng.normal(size=(5,))

        # each branch contributes one term to the leaf: bit-exact linearity
        x = ad.Tensor(x0, requires_grad=True)
        la = (x * ad.Tensor(c)).sum()
        lb = ad.tanh(x).sum()
        (g_joint,) = ad.backward(la + lb, [x])

        xa = ad.Tensor(x0, requires_grad=True)
        (ga,) = ad.backward((xa * ad.Tensor(c)).sum(), [xa])
        xb = ad.Tensor(x0, requires_grad=True)
        (gb,) = ad.backward(ad.tanh(xb).sum(), [xb])
        assert np.array_equal(g_joint.data, ga.data + gb.data)

        # multi-term branches reassociate the additions; still deterministic
        x1 = ad.Tensor(x0, requires_grad=True)
        (g1,) = ad.backward((x1 * x1).sum() + ad.tanh(x1).sum(), [x1])
        x2 = ad.Tensor(x0, requires_grad=True)
        (g2,) = ad.backward((x2 * x2).sum() + ad.tanh(x2).sum(), [x2])
        assert np.array_equal(g1.data, g2.data)

    def test_unreached_wrt_gets_zeros(self):
        x = ad.Tensor(1.0, requires_grad=True)
        y = ad.Tensor(2.0, requires_grad=True)
        z = x * y          # both leafed into one graph
        loss = x * x + z * 0.0
        gx, gy = ad.backward(loss, [x, y])
        assert gy.data == 0.0 and gx.data == 2.0


class TestSeedBackward:
    def test_identity_map_one_hot(self):
        x = ad.Tensor(np.arange(4.0), requires_grad=True)
        act = x * 1.0
        (g,) = ad.seed_backward(act, 1, [x])
        assert np.array_equal(g.data, [0.0, 1.0, 0.0, 0.0])

    def test_linear_model_row_extraction(self):
        rng = np.random.default_rng(12)
        w = rng.normal(size=(3, 5))
        x = ad.Tensor(rng.normal(size=(5, 1)), requires_grad=True)
        act = ad.reshape(ad.matmul(ad.Tensor(w), x), (3,))
        (g,) = ad.seed_backward(act, 2, [x])
        assert rel_err(g.data.ravel(), w[2]) < 1e-12

    def test_matches_slice_backward_bit_exactly(self):
        rng = np.random.default_rng(13)
        x0 = rng.normal(size=(1, 1, 6, 6))
        w0 = rng.normal(size=(2, 1, 3, 3))
        lin0 = rng.normal(size=(3, 2 * 4 * 4))

        def run(seeded):
            x = ad.Tensor(x0, requires_grad=True)
            h = ad.relu(ad.conv2d(x, ad.Tensor(w0)))
            act = ad.reshape(ad.matmul(ad.reshape(h, (1, -1)),
                                       ad.transpose(ad.Tensor(lin0))), (3,))
            if seeded:
                (g,) = ad.seed_backward(act, 1, [x])
            else:
                (g,) = ad.backward(act[1], [x])
            return g.data

        assert np.array_equal(run(True), run(False))

    def test_index_out_of_range(self):
        x = ad.Tensor(np.arange(3.0), requires_grad=True)
        act = x * 1.0
        with pytest.raises(IndexError):
            ad.seed_backward(act, 3, [x])

    def test_batched_one_hot_rows(self):
        rng = np.random.default_rng(14)
        x = ad.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        act = x * 2.0
        (g,) = ad.seed_backward(act, [1, 3], [x])
        expect = np.zeros((2, 4))
        expect[0, 1] = 2.0
        expect[1, 3] = 2.0
        assert np.array_equal(g.data, expect)


class TestOverrides:
    def _single_relu(self, x0):
        x = ad.Tensor(x0, requires_grad=True)
        y = ad.relu(x)
        return x, y

    def test_pass_through_override(self):
        x, y = self._single_relu(np.array([-1.0, 2.0]))
        ad.register_override(y, lambda g, f, ref: g)
        (g,) = ad.backward(y.sum(), [x])
        assert np.array_equal(g.data, [1.0, 1.0])

    def test_zero_override_kills_upstream_gradient(self):
        x, y = self._single_relu(np.array([1.0, 2.0]))
        ad.register_override(y, lambda g, f, ref: ad.mul(g, 0.0))
        (g,) = ad.backward(y.sum(), [x])
        assert np.array_equal(g.data, [0.0, 0.0])

    def test_doubling_override_doubles_input_gradient(self):
        # all-positive pre-activations so the analytic relu derivative is 1
        # everywhere and g -> 2g is exactly a doubling
        rng = np.random.default_rng(15)
        x0 = np.abs(rng.normal(size=(1, 1, 4, 4))) + 0.1
        w0 = np.abs(rng.normal(size=(1, 1, 3, 3))) + 0.1

        def grad_of(rule):
            x = ad.Tensor(x0, requires_grad=True)
            y = ad.relu(ad.conv2d(x, ad.Tensor(w0)))
            if rule is not None:
                ad.register_override(y, rule)
            (g,) = ad.backward(y.sum(), [x])
            return g.data

        base = grad_of(None)
        doubled = grad_of(lambda g, f, ref: ad.mul(g, 2.0))
        assert np.array_equal(doubled, 2.0 * base)

    def test_override_rejected_on_linear_node(self):
        x = ad.Tensor([1.0], requires_grad=True)
        y = x * 2.0
        with pytest.raises(ValueError, match="non-linear"):
            ad.register_override(y, lambda g, f, ref: g)

    def test_override_receives_saved_input_feature(self):
        x0 = np.array([0.5, -0.25])
        seen = {}

        def rule(g, f, ref):
            seen["f"] = f.data.copy()
            seen["ref"] = ref
            return g

        x = ad.Tensor(x0, requires_grad=True)
        y = ad.relu(x)
        ad.register_override(y, rule)
        ad.backward(y.sum(), [x])
        assert np.array_equal(seen["f"], x0)
        assert seen["ref"] is None


class TestGraphStructure:
    def test_ids_topologically_ordered(self):
        x = ad.Tensor([1.0], requires_grad=True)
        y = ad.tanh(x * 2.0)
        g = y.node.graph
        for node in g.nodes:
            for pid in node.parents:
                assert pid is None or pid < node.id

    def test_disjoint_graphs_merge_on_combination(self):
        a = ad.Tensor([1.0], requires_grad=True)
        b = ad.Tensor([2.0], requires_grad=True)
        pa = a * 2.0
        pb = b * 3.0
        out = pa + pb
        assert pa.node.graph is pb.node.graph is out.node.graph
        ga, gb = ad.backward(out.sum(), [a, b])
        assert ga.data[0] == 2.0 and gb.data[0] == 3.0

    def test_constant_inputs_get_no_gradient_path(self):
        c = ad.Tensor([1.0, 2.0])
        assert (c * 2.0).node is None

    def test_no_grad_disables_recording(self):
        x = ad.Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = x * 2.0
        assert y.node is None


class TestSliceConcat:
    def test_slice_then_embed_roundtrip_gradient(self):
        rng = np.random.default_rng(16)
        x0 = rng.normal(size=(4, 5))
        x = ad.Tensor(x0, requires_grad=True)
        part = x[1:3, ::2]
        (g,) = ad.backward((part * part).sum(), [x])
        fd = fd_grad(scalar_fn(lambda t: (t[1:3, ::2] * t[1:3, ::2]).sum()), x0)
        assert rel_err(g.data, fd) < 1e-6

    def test_concat_gradient_splits(self):
        a0 = np.array([1.0, 2.0])
        b0 = np.array([3.0])
        a = ad.Tensor(a0, requires_grad=True)
        b = ad.Tensor(b0, requires_grad=True)
        out = ad.concat([a, b])
        w = ad.Tensor(np.array([1.0, 10.0, 100.0]))
        ga, gb = ad.backward((out * w).sum(), [a, b])
        assert np.array_equal(ga.data, [1.0, 10.0])
        assert np.array_equal(gb.data, [100.0])
