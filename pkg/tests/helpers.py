"""Shared oracle utilities for the test suite."""

import numpy as np


def stable_central_diff(f, flat, i, ana_scale=1.0, eps0=2e-5, levels=4):
    """Central difference at coordinate ``i`` with automatic step refinement.

    A piecewise-smooth function (ReLU kinks, max-pool argmax flips) can put
    a nondifferentiable point inside the difference interval, corrupting the
    estimate.  Two central differences at step eps and eps/2 agree to
    O(eps^2) when the interval is smooth and disagree sharply when it is
    not, so the step is halved until two consecutive estimates agree.

    Returns the stabilized estimate, or None if no smooth interval was
    found (the coordinate should then be skipped, not failed).
    """
    old = flat[i]
    scale = max(1.0, abs(old), abs(ana_scale))

    def central(eps):
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        return (fp - fm) / (2 * eps)

    prev = central(eps0 * max(1.0, abs(old)))
    for level in range(1, levels + 1):
        cur = central(eps0 * max(1.0, abs(old)) / 2 ** level)
        if abs(cur - prev) <= 1e-5 * max(1e-6, scale, abs(cur)):
            return cur
        prev = cur
    return None


def generic_parameters(net, rng):
    """Parameters drawn away from init symmetry so no activation sits at a kink."""
    params = {}
    for name, shape in net.parameter_shapes().items():
        if name.endswith(".norm.scale"):
            params[name] = rng.uniform(0.5, 1.5, size=shape)
        elif name.endswith(".norm.shift") or name.endswith(".b"):
            params[name] = rng.normal(scale=0.1, size=shape)
        else:
            params[name] = rng.normal(scale=0.3, size=shape)
    return params


def check_network_gradients(net, rng, coords_per_tensor=2, tol=1e-3):
    """Compare analytic parameter gradients against refined central differences.

    Returns (worst relative error over measurable coordinates, skipped count).
    """
    params = generic_parameters(net, rng)
    x = rng.normal(size=(1, *net.config.input_shape, net.config.in_channels))
    logits, state = net.forward(params, x)
    grads, _, _ = net.backward(params, state, np.ones(1))

    def f():
        out, _ = net.forward(params, x)
        return float(out[0])

    worst = 0.0
    skipped = 0
    for name, val in params.items():
        flat = val.reshape(-1)
        g_flat = grads[name].reshape(-1)
        n = min(coords_per_tensor, flat.size)
        idxs = rng.choice(flat.size, size=n, replace=False)
        for i in idxs:
            ana = float(g_flat[i])
            num = stable_central_diff(f, flat, i, ana_scale=abs(ana))
            if num is None:
                skipped += 1
                continue
            rel = abs(num - ana) / max(1e-6, abs(num), abs(ana))
            worst = max(worst, rel)
    return worst, skipped
