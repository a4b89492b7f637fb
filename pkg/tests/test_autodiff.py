"""Tape mechanics and gradient correctness of every primitive."""

import numpy as np
import pytest

from da2net import Rng, TapeError, Tensor, tensor_create
from da2net.checks import GRAD_TOLERANCE, run_scope
from da2net.ops import (
    BatchNormParams,
    Conv2dParams,
    OpTape,
    add,
    backward,
    batch_norm,
    conv1d_channel,
    conv2d_grouped,
    reduce_sum,
    sigmoid,
)
from da2net.tensor import elementwise_scale_broadcast, finite_difference_gradient

from oracles import conv1d_direct


@pytest.mark.parametrize("scope", [
    "conv2d", "conv1d", "gap", "batchnorm", "sigmoid", "relu", "linear",
    "scale", "cross_entropy",
])
def test_primitive_vjps_match_finite_differences(scope):
    errs = run_scope(scope, seed=0)
    assert errs, scope
    worst = max(errs.values())
    assert worst < GRAD_TOLERANCE, f"{scope}: {errs}"


class TestTapeMechanics:
    def test_double_replay_rejected(self):
        tape = OpTape()
        x = tensor_create([2, 2], [1, 2, 3, 4])
        tape.watch("x", x)
        reduce_sum(x, tape)
        backward(tape)
        with pytest.raises(TapeError, match="already replayed"):
            backward(tape)

    def test_reset_allows_reuse(self):
        tape = OpTape()
        x = tensor_create([2], [1, 2])
        tape.watch("x", x)
        reduce_sum(x, tape)
        backward(tape)
        tape.reset()
        tape.watch("x", x)
        reduce_sum(x, tape)
        grads = backward(tape)
        assert np.array_equal(grads["x"].data, [1.0, 1.0])

    def test_non_scalar_tail_rejected(self):
        tape = OpTape()
        x = tensor_create([2, 2], 1.0)
        sigmoid(x, tape)
        with pytest.raises(TapeError, match="scalar"):
            backward(tape)

    def test_empty_tape_rejected(self):
        with pytest.raises(TapeError, match="empty"):
            backward(OpTape())

    def test_untouched_param_gets_zeros(self):
        tape = OpTape()
        x = tensor_create([2], [1, 2])
        unused = tensor_create([3], 0.0)
        tape.watch("x", x)
        tape.watch("unused", unused)
        reduce_sum(x, tape)
        grads = backward(tape)
        assert np.array_equal(grads["unused"].data, np.zeros(3))

    def test_seed_scales_gradients(self):
        tape = OpTape()
        x = tensor_create([3], [1, 2, 3])
        tape.watch("x", x)
        reduce_sum(x, tape)
        grads = backward(tape, loss_grad=2.5)
        assert np.allclose(grads["x"].data, 2.5)

    def test_reused_tensor_accumulates(self):
        tape = OpTape()
        x = tensor_create([2], [1.0, 2.0])
        tape.watch("x", x)
        reduce_sum(add(x, x, tape), tape)
        grads = backward(tape)
        assert np.array_equal(grads["x"].data, [2.0, 2.0])

    def test_replay_visits_each_record_once(self):
        tape = OpTape()
        x = tensor_create([2], [1.0, 2.0])
        tape.watch("x", x)
        y = sigmoid(x, tape)
        reduce_sum(y, tape)
        assert tape.ops == ["sigmoid", "reduce_sum"]
        backward(tape)


class TestClosedFormGradients:
    def test_bilinear_gate_gradient(self, rng):
        # loss = sum(x * w): d/dw[c] is the sum of x over that channel's plane
        x = Tensor(rng.normal((2, 3, 4, 4), dtype="f64"))
        w = Tensor(rng.normal((1, 3, 1, 1), dtype="f64"))
        tape = OpTape()
        tape.watch("w", w)
        reduce_sum(elementwise_scale_broadcast(x, w, tape), tape)
        grads = backward(tape)
        expected = x.data.sum(axis=(0, 2, 3)).reshape(1, 3, 1, 1)
        assert np.allclose(grads["w"].data, expected, atol=1e-10)

    def test_composed_conv_bn_sigmoid_block(self, rng):
        # the diverse-extraction composite, checked end to end in f64
        x = Tensor(rng.normal((2, 4, 5, 5), dtype="f64"))
        w = Tensor(rng.normal((4, 4, 3, 3), 0.0, 0.4, dtype="f64"))
        gamma = Tensor(rng.normal((4,), 1.0, 0.2, dtype="f64"))
        beta = Tensor(rng.normal((4,), 0.0, 0.2, dtype="f64"))
        tensors = {"x": x, "w": w, "gamma": gamma, "beta": beta}

        def run(t, tape=None):
            conv = Conv2dParams(weight=t["w"], groups=1, padding=1)
            bn = BatchNormParams(gamma=t["gamma"], beta=t["beta"])
            y = conv2d_grouped(t["x"], conv, tape)
            y = batch_norm(y, bn, "train", tape)
            return reduce_sum(sigmoid(y, tape), tape)

        tape = OpTape()
        for name, t in tensors.items():
            tape.watch(name, t)
        run(tensors, tape)
        grads = backward(tape)
        for name in tensors:
            def f(v, _name=name):
                trial = dict(tensors)
                trial[_name] = v
                return run(trial).item()

            numeric = finite_difference_gradient(f, tensors[name], 1e-5)
            rel = np.max(np.abs(grads[name].data - numeric.data)
                         / np.maximum(1.0, np.abs(grads[name].data)))
            assert rel < GRAD_TOLERANCE, f"{name}: {rel}"

    def test_conv1d_shared_kernel_accumulates_across_positions(self, rng):
        d = Tensor(rng.normal((2, 8), dtype="f64"))
        k = Tensor(rng.normal((3,), dtype="f64"))
        tape = OpTape()
        tape.watch("k", k)
        reduce_sum(conv1d_channel(d, k, tape=tape), tape)
        grads = backward(tape)
        # independent oracle: perturb the shared kernel entry and re-run the
        # sliding-window reference
        eps = 1e-6
        expected = np.empty(3)
        for i in range(3):
            kp, km = k.data.copy(), k.data.copy()
            kp[i] += eps
            km[i] -= eps
            expected[i] = (conv1d_direct(d.data, kp).sum()
                           - conv1d_direct(d.data, km).sum()) / (2 * eps)
        assert np.allclose(grads["k"].data, expected, atol=1e-6)
