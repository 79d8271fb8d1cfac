import numpy as np
import pytest

from moba import ConvKernel, MobaConfig, ShapeError, key_conv_backward, key_conv_forward
from moba.keyconv import random_kernel
from moba.router import compute_centroids
from oracles import fd_gradient, grad_rel_err


def test_zero_weights_identity_exact():
    rng = np.random.default_rng(0)
    K = rng.standard_normal((32, 6))
    out = key_conv_forward(K, ConvKernel(np.zeros((3, 6))))
    assert np.array_equal(out, K)


def test_hand_case_constant_keys():
    # d=1, width=3, W=[1,0,0], constant keys 1: every output is 1 + silu(1)
    K = np.ones((3, 1))
    out = key_conv_forward(K, ConvKernel(np.array([[1.0], [0.0], [0.0]])))
    expect = 1.0 + 1.0 / (1.0 + np.exp(-1.0))
    assert np.abs(out - expect).max() <= 1e-12


def test_left_padding_behaviour():
    # W = [0, 1]: position t picks up k[t-1], position 0 reads the zero pad
    K = np.array([[2.0], [3.0], [5.0]])
    out = key_conv_forward(K, ConvKernel(np.array([[0.0], [1.0]])))
    silu = lambda x: x / (1.0 + np.exp(-x))
    np.testing.assert_allclose(
        out, [[2.0], [3.0 + silu(2.0)], [5.0 + silu(3.0)]], atol=1e-15
    )


@pytest.mark.parametrize("width", [3, 5])
def test_causality_every_position(width):
    rng = np.random.default_rng(1)
    N, d = 64, 4
    K = rng.standard_normal((N, d))
    kernel = random_kernel(width, d, seed=11)
    base = key_conv_forward(K, kernel)
    for t in range(N):
        bumped = K.copy()
        bumped[t] += 1.0
        delta = key_conv_forward(bumped, kernel) - base
        assert not delta[:t].any()
        assert delta[t].any()


def test_backward_zero_upstream():
    rng = np.random.default_rng(2)
    K = rng.standard_normal((16, 3))
    kernel = random_kernel(3, 3, seed=5)
    dK, dW = key_conv_backward(K, kernel, np.zeros_like(K))
    assert not dK.any() and not dW.any()


def test_backward_zero_weights_closed_form():
    # W = 0: a = 0, silu'(0) = 0.5. dK reduces to dK_out (conv path into dK is
    # killed by W), and dW[l] = sum_t 0.5 * dK_out[t] * k[t-l]
    rng = np.random.default_rng(3)
    N, d, width = 12, 3, 3
    K = rng.standard_normal((N, d))
    dOut = rng.standard_normal((N, d))
    dK, dW = key_conv_backward(K, ConvKernel(np.zeros((width, d))), dOut)
    assert np.array_equal(dK, dOut)
    for lag in range(width):
        expect = 0.5 * (dOut[lag:] * K[: N - lag]).sum(axis=0)
        np.testing.assert_allclose(dW[lag], expect, atol=1e-15)


def test_backward_finite_differences_sweep():
    rng = np.random.default_rng(4)
    for trial in range(10):
        N = int(rng.integers(4, 33))
        d = int(rng.integers(1, 5))
        width = 3 if trial % 2 == 0 else 5
        K = rng.standard_normal((N, d))
        kernel = random_kernel(width, d, seed=100 + trial)
        dOut = rng.standard_normal((N, d))
        dK, dW = key_conv_backward(K, kernel, dOut)

        def loss():
            return float((key_conv_forward(K, kernel) * dOut).sum())

        assert grad_rel_err(dK, fd_gradient(loss, K)) <= 1e-5
        assert grad_rel_err(dW, fd_gradient(loss, kernel.weights)) <= 1e-5


def test_reference_example_case():
    rng = np.random.default_rng(6)
    N, d, width = 32, 4, 3
    K = rng.standard_normal((N, d))
    kernel = random_kernel(width, d, seed=6)
    dOut = rng.standard_normal((N, d))
    dK, dW = key_conv_backward(K, kernel, dOut)

    def loss():
        return float((key_conv_forward(K, kernel) * dOut).sum())

    assert grad_rel_err(dK, fd_gradient(loss, K)) <= 1e-5
    assert grad_rel_err(dW, fd_gradient(loss, kernel.weights)) <= 1e-5


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        key_conv_forward(np.zeros((4, 3)), ConvKernel(np.zeros((3, 5))))
    with pytest.raises(ShapeError):
        key_conv_backward(np.zeros((4, 3)), ConvKernel(np.zeros((3, 3))), np.zeros((4, 2)))


def test_kernel_validation():
    with pytest.raises(ShapeError):
        ConvKernel(np.zeros(3))
    with pytest.raises(ShapeError):
        ConvKernel(np.array([[np.inf, 0.0]]))


def test_conv_boosts_aligned_cluster_centroid_score():
    # a block holding m adjacent query-aligned keys: positive aligned conv
    # weights can only push the block centroid further toward the query
    rng = np.random.default_rng(7)
    d, B, m = 8, 16, 6
    q = rng.standard_normal(d)
    q /= np.linalg.norm(q)
    N = 3 * B
    K = np.zeros((N, d))
    start = B + 4  # cluster sits inside block 1
    K[start : start + m] = q
    kernel = ConvKernel(np.full((3, d), 0.4))
    raw_score = float(compute_centroids(K, B).centroids[1] @ q)
    conv_score = float(compute_centroids(key_conv_forward(K, kernel), B).centroids[1] @ q)
    assert conv_score >= raw_score
    assert conv_score > raw_score + 1e-6


def test_config_conv_width_gate():
    cfg = MobaConfig(block_size_B=8, top_k=1, head_dim_d=4, conv_width=3)
    assert cfg.conv_width == 3
