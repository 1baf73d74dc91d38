"""Shared builders and oracles for the test suite."""

import numpy as np

from nrse.net import (CONCAT, SIGMOID, SOFTMAX, LayerSpec, NetworkSpec, dense, init_network,
                      loss_and_grad)


def tiny_dense_spec(inputs, hidden, classes):
    layers = []
    for n in hidden:
        layers += [dense(n), SIGMOID]
    return NetworkSpec(inputs, classes, tuple(layers + [dense(classes), SOFTMAX]))


def tiny_tfcnn_spec(bands=6, context=5, hidden=(4,), classes=3):
    time_branch = (LayerSpec("conv-time", num_filters=2, kernel_width=2),
                   LayerSpec("maxpool", pool_width=2), SIGMOID)
    freq_branch = (LayerSpec("conv-frequency", num_filters=2, kernel_width=3),
                   LayerSpec("maxpool", pool_width=2), SIGMOID)
    layers = [CONCAT]
    for n in hidden:
        layers += [dense(n), SIGMOID]
    return NetworkSpec(bands * context, classes, tuple(layers + [dense(classes), SOFTMAX]), context,
                       (time_branch, freq_branch))


def finite_difference_check(spec, seed, l2=0.0, batch=6, step=1e-4):
    """Max relative error of the analytic gradient against central differences.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)`` so parameters whose
    gradient is numerically zero are compared absolutely.
    """
    rng = np.random.default_rng(seed)
    params = init_network(spec, seed, dtype=np.float64)
    for b in params.arrays[1::2]:
        b[...] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(batch, spec.input_dim))
    y = rng.integers(0, spec.num_classes, batch)
    _, grads = loss_and_grad(spec, params, x, y, l2)
    worst = 0.0
    for a, g in zip(params.arrays, grads):
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up, _ = loss_and_grad(spec, params, x, y, l2)
            flat[i] = keep - step
            down, _ = loss_and_grad(spec, params, x, y, l2)
            flat[i] = keep
            num = (up - down) / (2 * step)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), 1e-6)
            worst = max(worst, err)
    return worst
