"""Pointwise max/min composition of constrained scalar networks.

The oracle is direct evaluation: h must satisfy c^-1 h(x) = max(f(x), g(x))
everywhere on the domain box, to tight tolerance, while staying inside the
constrained class (unit-norm hidden weights, c in [1/sqrt(2), 1]).
"""

import numpy as np
import pytest

from lipmpc.network import (
    LINEAR_FREE,
    SPECTRAL_DENSE,
    Layer,
    Network,
    forward,
    lattice_max,
    lattice_min,
)
from oracles import jacobi_sigma_max

LO, HI = -3.0 * np.ones(3), 3.0 * np.ones(3)


def make_scalar_net(widths, seed, in_dim=3, bias_scale=0.5):
    """Random scalar constrained net with every weight at unit spectral norm."""
    rng = np.random.default_rng(seed)
    dims = [in_dim, *widths, 1]
    layers = []
    for i, (n, m) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(size=(m, n))
        w = w / np.linalg.svd(w, compute_uv=False)[0]
        last = i == len(dims) - 2
        b = None if last else rng.normal(size=m) * bias_scale
        layers.append(Layer(LINEAR_FREE if last else SPECTRAL_DENSE, w, b))
    return Network(layers)


def sample_points(seed, n=1000, in_dim=3):
    rng = np.random.default_rng(seed)
    return rng.uniform(LO[0], HI[0], size=(n, in_dim))


def check_pair(f, g, seed, tol=1e-9):
    h, c = lattice_max(f, g, LO, HI)
    hmin, cmin = lattice_min(f, g, LO, HI)
    xs = sample_points(seed)
    fx = forward(f, xs)[:, 0]
    gx = forward(g, xs)[:, 0]
    hx = forward(h, xs)[:, 0] / c
    mx = forward(hmin, xs)[:, 0] / cmin
    assert np.max(np.abs(hx - np.maximum(fx, gx))) <= tol
    assert np.max(np.abs(mx - np.minimum(fx, gx))) <= tol
    for net, cc in ((h, c), (hmin, cmin)):
        assert 1.0 / np.sqrt(2.0) - 1e-12 <= cc <= 1.0 + 1e-12
        for layer in net.layers[:-1]:
            assert abs(jacobi_sigma_max(layer.weight) - 1.0) <= 1e-6
    return h, c


def test_lattice_of_identical_nets():
    f = make_scalar_net((6, 4), seed=30)
    h, c = lattice_max(f, f, LO, HI)
    xs = sample_points(31)
    assert np.max(np.abs(forward(h, xs)[:, 0] / c - forward(f, xs)[:, 0])) <= 1e-9


def test_lattice_of_affine_nets():
    # depth-1 operands: rows are unit vectors, so max is a hinge of two planes
    w1 = np.array([[0.6, 0.8, 0.0]])
    w2 = np.array([[0.0, -0.6, 0.8]])
    f = Network([Layer(LINEAR_FREE, w1, np.array([0.25]))])
    g = Network([Layer(LINEAR_FREE, w2, None)])
    h, c = check_pair(f, g, seed=32)
    xs = sample_points(33)
    direct = np.maximum(xs @ w1[0] + 0.25, xs @ w2[0])
    assert np.max(np.abs(forward(h, xs)[:, 0] / c - direct)) <= 1e-9


def test_lattice_mixed_depths():
    f = make_scalar_net((4,), seed=34)
    g = make_scalar_net((8, 6, 4), seed=35)
    check_pair(f, g, seed=36)


def test_lattice_affine_vs_deep():
    f = Network([Layer(LINEAR_FREE, np.array([[1.0, 0.0, 0.0]]), None)])
    g = make_scalar_net((6, 6), seed=37)
    check_pair(f, g, seed=38)


def test_lattice_odd_widths_padded():
    f = make_scalar_net((5, 4), seed=39)  # odd hidden layer exercises padding
    g = make_scalar_net((3,), seed=40)
    check_pair(f, g, seed=41)


def test_lattice_random_pairs():
    rng = np.random.default_rng(42)
    for trial in range(10):
        widths_f = tuple(int(w) for w in rng.integers(2, 9, size=rng.integers(1, 3)))
        widths_g = tuple(int(w) for w in rng.integers(2, 9, size=rng.integers(1, 3)))
        f = make_scalar_net(widths_f, seed=200 + 2 * trial)
        g = make_scalar_net(widths_g, seed=201 + 2 * trial)
        check_pair(f, g, seed=300 + trial)


def test_lattice_rejects_vector_output():
    rng = np.random.default_rng(43)
    w = rng.normal(size=(2, 3))
    w /= np.linalg.svd(w, compute_uv=False)[0]
    f = Network([Layer(LINEAR_FREE, w, None)])
    g = make_scalar_net((4,), seed=44)
    with pytest.raises(ValueError):
        lattice_max(f, g, LO, HI)


def test_lattice_rejects_unnormalized_weights():
    f = make_scalar_net((4,), seed=45)
    g = make_scalar_net((4,), seed=46)
    g.layers[0].weight *= 1.5
    with pytest.raises(ValueError):
        lattice_max(f, g, LO, HI)
