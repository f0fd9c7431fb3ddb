"""Tensor engine tests: op semantics, gradient oracle checks, file format."""

import numpy as np
import pytest
from conftest import assert_grads_close, finite_diff_grads

from cstvsr import tensor as T
from cstvsr.tensor import Tensor, concat, conv2d, matmul, read_stif, tape, write_stif


class TestElementwise:
    def test_exp_identity(self):
        assert T.tensor(0.0).exp().item() == pytest.approx(1.0)

    def test_sqrt_gradient_at_four(self):
        x = T.tensor([4.0], requires_grad=True)
        with tape() as tp:
            y = x.sqrt().sum()
            tp.backward(y)
        assert x.grad[0] == pytest.approx(0.25)

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "maximum"])
    def test_binary_grad_vs_finite_differences(self, op, rng):
        a = Tensor(rng.uniform(-2, 2, (3, 4)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2, (3, 4)).astype(np.float32), requires_grad=True)

        def apply(x, y):
            return {
                "add": lambda: x + y,
                "sub": lambda: x - y,
                "mul": lambda: x * y,
                "div": lambda: x / y,
                "maximum": lambda: x.maximum(y),
            }[op]()

        with tape() as tp:
            loss = (apply(a, b) * apply(a, b)).sum()
            tp.backward(loss)

        def forward():
            out = apply(Tensor(a.data), Tensor(b.data))
            return ((out * out).sum()).item()

        fd_a, fd_b = finite_diff_grads(forward, [a.data, b.data])
        assert_grads_close(a.grad, fd_a)
        assert_grads_close(b.grad, fd_b)

    @pytest.mark.parametrize("op", ["exp", "sqrt", "abs", "sin", "relu"])
    def test_unary_grad_vs_finite_differences(self, op, rng):
        low = 0.5 if op == "sqrt" else -2.0
        # keep abs/relu samples away from their kinks
        data = rng.uniform(low, 2, (3, 4)).astype(np.float32)
        if op in ("abs", "relu"):
            data = data + np.sign(data) * 0.1 + (data == 0)
        a = Tensor(data, requires_grad=True)

        with tape() as tp:
            loss = getattr(a, op)().sum()
            tp.backward(loss)

        def forward():
            return getattr(Tensor(a.data), op)().sum().item()

        (fd,) = finite_diff_grads(forward, [a.data])
        assert_grads_close(a.grad, fd)

    def test_shape_mismatch_names_both_shapes(self):
        a = T.zeros((2, 3))
        b = T.zeros((2, 4))
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 4\)"):
            _ = a + b

    def test_trailing_singleton_broadcast(self):
        a = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        b = Tensor(np.array([[10.0], [20.0]], dtype=np.float32), requires_grad=True)
        with tape() as tp:
            out = (a * b).sum()
            tp.backward(out)
        np.testing.assert_allclose(b.grad, [[0 + 1 + 2], [3 + 4 + 5]])
        np.testing.assert_allclose(a.grad, [[10, 10, 10], [20, 20, 20]])

    def test_ops_do_not_mutate_inputs(self, rng):
        a_data = rng.uniform(-2, 2, (4, 4)).astype(np.float32)
        a = Tensor(a_data.copy())
        b = Tensor(a_data.copy())
        _ = (a + b) * a - b / (b + 3.0)
        _ = a.exp().sin().abs()
        np.testing.assert_array_equal(a.data, a_data)
        np.testing.assert_array_equal(b.data, a_data)


class TestMatmul:
    def test_identity(self, rng):
        a = Tensor(rng.uniform(-1, 1, (4, 4)).astype(np.float32))
        eye = Tensor(np.eye(4, dtype=np.float32))
        np.testing.assert_array_equal(matmul(eye, a).data, a.data)

    def test_one_by_one_is_scalar_mul(self):
        a = Tensor([[3.0]])
        b = Tensor([[-2.0]])
        assert matmul(a, b).item() == pytest.approx(-6.0)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            matmul(T.zeros((2, 3)), T.zeros((4, 2)))

    def test_grad_vs_finite_differences(self, rng):
        a = Tensor(rng.uniform(-2, 2, (3, 3)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, (3, 3)).astype(np.float32), requires_grad=True)
        with tape() as tp:
            loss = (matmul(a, b) * matmul(a, b)).sum()
            tp.backward(loss)

        def forward():
            out = matmul(Tensor(a.data), Tensor(b.data))
            return (out * out).sum().item()

        fd_a, fd_b = finite_diff_grads(forward, [a.data, b.data])
        assert_grads_close(a.grad, fd_a)
        assert_grads_close(b.grad, fd_b)

    def test_forward_deterministic(self, rng):
        a = rng.uniform(-1, 1, (17, 33)).astype(np.float32)
        b = rng.uniform(-1, 1, (33, 9)).astype(np.float32)
        r1 = matmul(Tensor(a), Tensor(b)).data
        r2 = matmul(Tensor(a.copy()), Tensor(b.copy())).data
        np.testing.assert_array_equal(r1, r2)


class TestConv2d:
    def test_one_by_one_identity(self, rng):
        x = Tensor(rng.uniform(0, 1, (1, 1, 5, 5)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        np.testing.assert_allclose(conv2d(x, w).data, x.data, rtol=1e-6)

    def test_zero_input(self):
        x = T.zeros((1, 2, 6, 6))
        w = Tensor(np.random.default_rng(0).normal(size=(3, 2, 3, 3)).astype(np.float32))
        out = conv2d(x, w, stride=1, pad=1)
        assert out.shape == (1, 3, 6, 6)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_output_size_contract(self):
        x = T.zeros((2, 3, 9, 11))
        w = T.zeros((4, 3, 3, 3))
        assert conv2d(x, w, stride=2, pad=1).shape == (2, 4, 5, 6)

    def test_nonpositive_output_errors(self):
        with pytest.raises(ValueError, match="non-positive"):
            conv2d(T.zeros((1, 1, 2, 2)), T.zeros((1, 1, 5, 5)))

    def test_grad_vs_finite_differences(self, rng):
        x = Tensor(rng.uniform(-2, 2, (1, 2, 5, 5)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)).astype(np.float32), requires_grad=True)
        with tape() as tp:
            out = conv2d(x, w, stride=1, pad=1)
            loss = (out * out).sum()
            tp.backward(loss)

        def forward():
            out = conv2d(Tensor(x.data), Tensor(w.data), stride=1, pad=1)
            return (out * out).sum().item()

        fd_x, fd_w = finite_diff_grads(forward, [x.data, w.data])
        assert_grads_close(x.grad, fd_x)
        assert_grads_close(w.grad, fd_w)

    def test_strided_grad_vs_finite_differences(self, rng):
        x = Tensor(rng.uniform(-1, 1, (1, 1, 7, 7)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (1, 1, 3, 3)).astype(np.float32), requires_grad=True)
        with tape() as tp:
            loss = conv2d(x, w, stride=2, pad=1).square().sum()
            tp.backward(loss)

        def forward():
            return conv2d(Tensor(x.data), Tensor(w.data), stride=2, pad=1).square().sum().item()

        fd_x, fd_w = finite_diff_grads(forward, [x.data, w.data])
        assert_grads_close(x.grad, fd_x)
        assert_grads_close(w.grad, fd_w)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        with tape() as tp:
            tp.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), dtype=np.float32))

    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with tape() as tp:
            tp.backward(x.square().sum())
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with tape() as tp:
            y = x * 2.0
            with pytest.raises(ValueError, match="scalar"):
                tp.backward(y)

    def test_grad_accumulates_across_consumers(self):
        x = Tensor([3.0], requires_grad=True)
        with tape() as tp:
            y = x * 2.0 + x * 5.0
            tp.backward(y.sum())
        assert x.grad[0] == pytest.approx(7.0)

    def test_tape_consumed_once(self):
        x = Tensor([1.0], requires_grad=True)
        with tape() as tp:
            y = x.sum()
            tp.backward(y)
            with pytest.raises(RuntimeError, match="consumed"):
                tp.backward(y)

    def test_composite_conv_mlp_charbonnier_grad(self, rng):
        x = Tensor(rng.uniform(-1, 1, (1, 1, 4, 4)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (2, 1, 3, 3)).astype(np.float32), requires_grad=True)
        dense = Tensor(rng.uniform(-1, 1, (32, 3)).astype(np.float32), requires_grad=True)
        target = rng.uniform(-1, 1, (1, 3)).astype(np.float32)

        def network(xt, wt, dt):
            hidden = conv2d(xt, wt, stride=1, pad=1).relu()
            flat = hidden.reshape(1, 32)
            pred = matmul(flat, dt)
            resid = pred - Tensor(target)
            return (resid.square().sum() + 1e-6).sqrt()

        with tape() as tp:
            tp.backward(network(x, w, dense))

        def forward():
            return network(Tensor(x.data), Tensor(w.data), Tensor(dense.data)).item()

        fds = finite_diff_grads(forward, [x.data, w.data, dense.data])
        assert_grads_close(x.grad, fds[0])
        assert_grads_close(w.grad, fds[1])
        assert_grads_close(dense.grad, fds[2])

    def test_grads_finite_after_backward(self, rng):
        x = Tensor(rng.uniform(-2, 2, (3, 3)).astype(np.float32), requires_grad=True)
        with tape() as tp:
            y = ((x * 3.0).sin().exp() + x.abs()).sum()
            tp.backward(y)
        assert np.all(np.isfinite(x.grad))


class TestShapePlumbing:
    def test_concat_and_split_grads(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        b = Tensor(np.ones((3, 2), dtype=np.float32), requires_grad=True)
        with tape() as tp:
            c = concat([a, b], axis=0)
            loss = (c * Tensor(np.arange(10, dtype=np.float32).reshape(5, 2))).sum()
            tp.backward(loss)
        np.testing.assert_allclose(a.grad, [[0, 1], [2, 3]])
        np.testing.assert_allclose(b.grad, [[4, 5], [6, 7], [8, 9]])

    def test_getitem_grad(self):
        x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4), requires_grad=True)
        with tape() as tp:
            tp.backward(x[1:3, :2].sum())
        expect = np.zeros((3, 4), dtype=np.float32)
        expect[1:3, :2] = 1.0
        np.testing.assert_array_equal(x.grad, expect)

    def test_reshape_transpose_roundtrip_grad(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 3, 4)).astype(np.float32), requires_grad=True)
        with tape() as tp:
            y = x.transpose(2, 0, 1).reshape(4, 6)
            tp.backward((y * y).sum())
        assert_grads_close(x.grad, 2.0 * x.data.astype(np.float64))


class TestNoGrad:
    def test_no_tape_means_no_recording(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        assert not y.requires_grad

    def test_no_grad_inside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with tape() as tp:
            with T.no_grad():
                frozen = x * 10.0
            live = x * 2.0 + frozen
            tp.backward(live.sum())
        assert x.grad[0] == pytest.approx(2.0)


class TestStifFormat:
    def test_roundtrip(self, tmp_path, rng):
        arr = rng.normal(size=(3, 4, 5)).astype(np.float32)
        path = tmp_path / "t.stif"
        write_stif(path, arr)
        back = read_stif(path)
        np.testing.assert_array_equal(back, arr)
        assert back.dtype == np.float32

    def test_header_layout(self, tmp_path):
        arr = np.zeros((2, 3), dtype=np.float32)
        path = tmp_path / "t.stif"
        write_stif(path, arr)
        raw = path.read_bytes()
        assert raw[:4] == b"STIF"
        assert raw[4] == 2
        assert raw[5:9] == (2).to_bytes(4, "little")
        assert raw[9:13] == (3).to_bytes(4, "little")
        assert len(raw) == 13 + 4 * 6

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.stif"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ValueError, match="magic"):
            read_stif(path)

    def test_scalar_rank_zero(self, tmp_path):
        path = tmp_path / "s.stif"
        write_stif(path, np.float32(2.5))
        assert read_stif(path).shape == ()
        assert float(read_stif(path)) == 2.5
