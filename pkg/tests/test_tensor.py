import numpy as np
import pytest

from cardalign import tensor as T


class TestPrimitiveExamples:
    def test_conv3d_all_ones_kernel_sums_27(self):
        out = T.conv3d(T.Tensor(np.ones((1, 1, 4, 4, 4))), T.Tensor(np.ones((1, 1, 3, 3, 3))))
        assert out.shape == (1, 1, 2, 2, 2)
        assert np.all(out.data == 27.0)

    def test_conv3d_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 3, 5, 4))
        out = T.conv3d(T.Tensor(x), T.Tensor(np.ones((1, 1, 1, 1, 1))))
        assert np.array_equal(out.data, x)

    def test_softmax_symmetry(self):
        out = T.softmax(T.Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=0)

    def test_conv3d_stride_padding_shapes(self):
        x = T.Tensor(np.zeros((2, 3, 6, 16, 16)))
        w = T.Tensor(np.zeros((4, 3, 3, 3, 3)))
        out = T.conv3d(x, w, stride=(1, 2, 2), padding=1)
        assert out.shape == (2, 4, 6, 8, 8)

    def test_conv1d_shapes(self):
        out = T.conv1d(T.Tensor(np.zeros((2, 3, 20))), T.Tensor(np.zeros((5, 3, 7))), stride=2, padding=3)
        assert out.shape == (2, 5, 10)


class TestShapeErrors:
    def test_conv3d_channel_mismatch_names_primitive(self):
        with pytest.raises(T.ShapeError, match="conv3d"):
            T.conv3d(T.Tensor(np.zeros((1, 2, 4, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3, 3))))

    def test_conv3d_kernel_too_large(self):
        with pytest.raises(T.ShapeError, match="depth"):
            T.conv3d(T.Tensor(np.zeros((1, 1, 2, 8, 8))), T.Tensor(np.zeros((1, 1, 5, 3, 3))))

    def test_matmul_inner_mismatch(self):
        with pytest.raises(T.ShapeError, match="matmul"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))

    def test_add_broadcast_failure(self):
        with pytest.raises(T.ShapeError, match="add"):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 4))))

    def test_mse_shape_mismatch(self):
        with pytest.raises(T.ShapeError, match="mse"):
            T.mse(T.Tensor(np.zeros(3)), T.Tensor(np.zeros(4)))

    def test_unknown_primitive(self):
        with pytest.raises(ValueError, match="unknown primitive"):
            T.apply_primitive("frobnicate", T.Tensor([1.0]))

    def test_take_rows_out_of_range(self):
        with pytest.raises(T.ShapeError, match="take_rows"):
            T.take_rows(T.Tensor(np.zeros((1, 3, 2))), np.array([[3]]))


class TestBackward:
    def test_sum_of_squares_gradient(self):
        x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with T.tape():
            loss = T.reduce_sum(T.mul(x, x))
            grads = T.backward(loss)
        assert np.array_equal(grads[0].data, [2.0, 4.0, 6.0])

    def test_mse_self_is_zero_gradient(self):
        x = T.Tensor([1.0, -2.0, 0.5], requires_grad=True)
        with T.tape():
            grads = T.backward(T.mse(x, x))
            gid = x.node_id
        assert np.all(grads[gid].data == 0.0)

    def test_gelu_matches_finite_differences(self):
        err = T.finite_diff_check(
            lambda t: T.reduce_sum(T.gelu(t)), np.array([0.5, -1.0, 2.0]), step=1e-5
        )
        assert err < 1e-6

    def test_nonscalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.tape():
            y = T.mul(x, x)
            with pytest.raises(T.ShapeError, match="scalar"):
                T.backward(y)

    def test_unreachable_leaf_gets_zeros(self):
        a = T.Tensor([1.0, 2.0], requires_grad=True)
        b = T.Tensor([3.0], requires_grad=True)
        with T.tape():
            loss = T.reduce_sum(T.mul(a, a))
            T.mul(b, 2.0)  # watched but not reachable from loss
            grads = T.backward(loss)
            bid = b.node_id
        assert bid in grads
        assert np.all(grads[bid].data == 0.0)

    def test_loss_off_tape_rejected(self):
        with pytest.raises(RuntimeError, match="tape"):
            with T.tape():
                T.backward(T.Tensor(1.0))

    def test_constant_inputs_do_not_join_tape(self):
        c = T.Tensor([1.0, 2.0])  # requires_grad False
        x = T.Tensor([3.0, 4.0], requires_grad=True)
        with T.tape() as tp:
            T.reduce_sum(T.mul(c, x))
            assert c.node_id is None
            assert x.node_id is not None


class TestTape:
    def test_append_order_is_topological(self):
        x = T.Tensor([1.0], requires_grad=True)
        with T.tape() as tp:
            y = T.mul(x, 2.0)
            z = T.add(y, x)
            for node in tp.nodes:
                assert all(i < node.id for i in node.input_ids if i >= 0)

    def test_nested_tapes_rejected(self):
        with T.tape():
            with pytest.raises(RuntimeError, match="nest"):
                with T.tape():
                    pass

    def test_tape_released_after_exit(self):
        x = T.Tensor([1.0], requires_grad=True)
        with T.tape():
            y = T.mul(x, x)
            assert y.node_id is not None
        assert x.node_id is None
        assert y.node_id is None


class TestDeterminismAndModes:
    def test_apply_primitive_bitwise_deterministic(self):
        rng = np.random.default_rng(5)
        a = T.Tensor(rng.normal(size=(8, 12)))
        b = T.Tensor(rng.normal(size=(12, 6)))
        one = T.apply_primitive("matmul", a, b)
        two = T.apply_primitive("matmul", a, b)
        assert one.data.tobytes() == two.data.tobytes()

    def test_f32_mode(self):
        T.set_default_dtype("f32")
        try:
            x = T.Tensor([1.0, 2.0])
            assert x.dtype == np.float32
            out = T.gelu(x)
            assert out.dtype == np.float32
        finally:
            T.set_default_dtype("f64")

    def test_unknown_dtype_rejected(self):
        with pytest.raises(ValueError):
            T.set_default_dtype("f16")


class TestStatsInvariants:
    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 17)) * 10
        out = T.softmax(T.Tensor(x)).data
        assert out.min() >= 0.0
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12

    def test_layer_norm_pre_affine_stats(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(40, 33)) * 4 + 2
        out = T.layer_norm(T.Tensor(x)).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-10
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-8

    def test_l2_normalize_unit_norm(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(20, 9))
        out = T.l2_normalize(T.Tensor(x)).data
        assert np.abs(np.linalg.norm(out, axis=-1) - 1.0).max() < 1e-9


class TestFiniteDiffCheck:
    def test_sum_of_squares_small_error(self):
        rng = np.random.default_rng(3)
        err = T.finite_diff_check(lambda t: T.reduce_sum(T.mul(t, t)), rng.normal(size=7), step=1e-5)
        assert err < 1e-6

    def test_constant_function_zero_error(self):
        err = T.finite_diff_check(lambda t: T.reduce_sum(T.mul(t, 0.0)), np.ones(4), step=1e-5)
        assert err == 0.0

    def test_nonscalar_rejected(self):
        with pytest.raises(T.ShapeError, match="scalar"):
            T.finite_diff_check(lambda t: T.mul(t, 2.0), np.ones(3))

    def test_bad_step_rejected(self):
        with pytest.raises(ValueError):
            T.finite_diff_check(lambda t: T.reduce_sum(t), np.ones(3), step=0.0)
