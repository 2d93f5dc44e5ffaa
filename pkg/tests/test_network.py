"""Layer arithmetic, projection, Lipschitz bookkeeping, persistence."""

import numpy as np
import pytest

from lipmpc.autodiff import Tensor, gradients
from lipmpc.network import (
    DENSE_RELU,
    LINEAR_CLIPPED,
    LINEAR_FREE,
    SPECTRAL_DENSE,
    Layer,
    Network,
    empirical_lipschitz_lower,
    forward,
    forward_taped,
    group_sort,
    init_network,
    lipschitz_upper_bound,
    load_network,
    project_spectral,
    save_network,
    taped_layers,
)
from oracles import central_diff_grad, groupsort_reference, jacobi_sigma_max


# -- group_sort ---------------------------------------------------------------


def test_group_sort_pinned_examples():
    assert np.array_equal(group_sort([0.0, 3.0, 4.0, 2.0]), [3.0, 0.0, 4.0, 2.0])
    assert np.array_equal(group_sort([5.0, 3.0, 2.0, 4.0]), [5.0, 3.0, 4.0, 2.0])


def test_group_sort_odd_tail_and_ties():
    assert np.array_equal(group_sort([1.0, 1.0, 7.0]), [1.0, 1.0, 7.0])


def test_group_sort_matches_reference():
    rng = np.random.default_rng(10)
    for _ in range(200):
        v = rng.normal(size=int(rng.integers(1, 12)))
        assert np.array_equal(group_sort(v), groupsort_reference(v))


def test_group_sort_is_permutation_and_1lipschitz():
    # documented properties, checked on 10^4 random pairs
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        n = int(rng.integers(1, 9))
        a = rng.normal(size=n) * 10.0
        b = rng.normal(size=n) * 10.0
        sa, sb = group_sort(a), group_sort(b)
        assert np.array_equal(np.sort(sa), np.sort(a))  # multiset preserved
        assert np.linalg.norm(sa - sb) <= np.linalg.norm(a - b) + 1e-12


def test_group_sort_batch_matches_rowwise():
    rng = np.random.default_rng(12)
    batch = rng.normal(size=(64, 7))
    out = group_sort(batch)
    for row_in, row_out in zip(batch, out):
        assert np.array_equal(row_out, group_sort(row_in))


# -- forward -------------------------------------------------------------------


def test_forward_single_sorting_layer():
    net = Network([Layer(SPECTRAL_DENSE, np.eye(2), np.zeros(2))])
    assert np.array_equal(forward(net, [1.0, 2.0]), [2.0, 1.0])


def test_forward_zero_final_weight():
    net = Network(
        [
            Layer(SPECTRAL_DENSE, np.eye(2), np.zeros(2)),
            Layer(LINEAR_FREE, np.zeros((1, 2)), None),
        ]
    )
    assert forward(net, [3.0, -1.0]) == np.array([0.0])


def test_forward_matches_hand_rolled_two_layer():
    rng = np.random.default_rng(13)
    w1, b1 = rng.normal(size=(6, 3)), rng.normal(size=6)
    w2, b2 = rng.normal(size=(2, 6)), rng.normal(size=2)
    net = Network([Layer(SPECTRAL_DENSE, w1, b1), Layer(LINEAR_FREE, w2, b2)])
    for _ in range(50):
        x = rng.normal(size=3)
        z = groupsort_reference(w1 @ x + b1)
        assert np.allclose(forward(net, x), w2 @ z + b2, atol=1e-12)


def test_forward_batch_equals_loop():
    net = init_network(4, (8, 8), 2, "lcnn", seed=1)
    rng = np.random.default_rng(14)
    xs = rng.normal(size=(32, 4))
    batch = forward(net, xs)
    for x, row in zip(xs, batch):
        assert np.allclose(row, forward(net, x), atol=1e-13)


def test_forward_taped_matches_forward():
    for kind in ("lcnn", "dense"):
        net = init_network(3, (6, 5), 2, kind, seed=2)
        layers = taped_layers(net)
        rng = np.random.default_rng(15)
        x = rng.normal(size=3)
        assert np.allclose(forward_taped(layers, Tensor(x)).data, forward(net, x))
        xb = rng.normal(size=(9, 3))
        assert np.allclose(forward_taped(layers, Tensor(xb)).data, forward(net, xb))


def test_forward_gradient_matches_central_diff():
    net = init_network(4, (6,), 1, "lcnn", seed=3)
    layers = taped_layers(net)
    rng = np.random.default_rng(16)

    def f_np(x):
        return float(forward(net, x)[0])

    checked = 0
    for _ in range(100):
        x = rng.normal(size=4)
        pre = net.layers[0].weight @ x + net.layers[0].bias
        if np.min(np.abs(pre[0::2] - pre[1::2])) < 1e-4:
            continue  # sorting tie, gradient not defined there
        xt = Tensor(x, requires_grad=True)
        (g,) = gradients(forward_taped(layers, xt).sum(), [xt])
        gd = central_diff_grad(f_np, x, h=1e-6)
        assert np.max(np.abs(g - gd)) / max(1.0, np.max(np.abs(gd))) < 1e-4
        checked += 1
    assert checked > 50


# -- projection -----------------------------------------------------------------


def test_project_rescales_to_unit_norm():
    net = Network(
        [
            Layer(SPECTRAL_DENSE, 2.0 * np.eye(2), np.zeros(2)),
            Layer(LINEAR_FREE, np.ones((1, 2)), None),
        ]
    )
    proj = project_spectral(net)
    assert np.allclose(proj.layers[0].weight, np.eye(2), atol=1e-12)


def test_project_clips_final_entries():
    net = Network(
        [
            Layer(SPECTRAL_DENSE, np.eye(2), np.zeros(2)),
            Layer(LINEAR_CLIPPED, np.array([[3.0, -0.5]]), None),
        ]
    )
    proj = project_spectral(net, c_max=1.0)
    assert np.array_equal(proj.layers[1].weight, [[1.0, -0.5]])


def test_project_idempotent_and_unit_norm():
    rng = np.random.default_rng(17)
    for _ in range(20):
        net = Network(
            [
                Layer(SPECTRAL_DENSE, rng.normal(size=(8, 4)) * 3.0, rng.normal(size=8)),
                Layer(SPECTRAL_DENSE, rng.normal(size=(6, 8)) * 0.1, rng.normal(size=6)),
                Layer(LINEAR_CLIPPED, rng.normal(size=(2, 6)) * 2.0, None),
            ]
        )
        proj = project_spectral(net)
        for layer in proj.layers[:-1]:
            assert abs(jacobi_sigma_max(layer.weight) - 1.0) < 1e-6
        assert np.max(np.abs(proj.layers[-1].weight)) <= 1.0
        again = project_spectral(proj)
        for a, b in zip(proj.layers, again.layers):
            assert np.allclose(a.weight, b.weight, atol=1e-9)


def test_project_zero_weight_rejected():
    net = Network([Layer(SPECTRAL_DENSE, np.zeros((2, 2)), None)])
    with pytest.raises(ValueError):
        project_spectral(net)


# -- Lipschitz bounds -------------------------------------------------------------


def test_upper_bound_unit_selector():
    net = Network(
        [
            Layer(SPECTRAL_DENSE, np.eye(2), np.zeros(2)),
            Layer(LINEAR_FREE, np.array([[1.0, 0.0]]), None),
        ]
    )
    assert lipschitz_upper_bound(net) == pytest.approx(1.0, abs=1e-9)


def test_upper_bound_scaled_final():
    net = Network(
        [
            Layer(SPECTRAL_DENSE, np.eye(2), np.zeros(2)),
            Layer(LINEAR_FREE, 2.0 * np.eye(2), None),
        ]
    )
    assert lipschitz_upper_bound(net) == pytest.approx(2.0, abs=1e-9)


def test_upper_bound_penalizes_unconstrained_products():
    net = Network(
        [
            Layer(DENSE_RELU, 3.0 * np.eye(2), np.zeros(2)),
            Layer(LINEAR_FREE, 2.0 * np.eye(2), None),
        ]
    )
    assert lipschitz_upper_bound(net) == pytest.approx(6.0, abs=1e-8)


def test_empirical_lower_linear_net_exact():
    rng = np.random.default_rng(18)
    w = rng.normal(size=(2, 3))
    net = Network([Layer(LINEAR_FREE, w, None)])
    est = empirical_lipschitz_lower(net, -np.ones(3), np.ones(3), n_samples=5, seed=0)
    assert est == pytest.approx(jacobi_sigma_max(w), abs=1e-8)


def test_certified_bound_dominates_sampled_jacobians():
    # documented invariant for projected constrained networks
    rng = np.random.default_rng(19)
    for trial in range(20):
        net = init_network(3, (6, 4), 2, "lcnn", seed=100 + trial)
        ub = lipschitz_upper_bound(net)
        lb = empirical_lipschitz_lower(net, -2 * np.ones(3), 2 * np.ones(3), 50, seed=trial)
        assert lb <= ub * (1.0 + 1e-9)


def test_random_pair_increments_respect_bound():
    # |f(x) - f(y)| <= L * |x - y| spot-checked on 10^4 pairs
    net = init_network(4, (10, 10), 2, "lcnn", seed=20)
    bound = lipschitz_upper_bound(net)
    rng = np.random.default_rng(21)
    xs = rng.normal(size=(10_000, 4)) * 3.0
    ys = rng.normal(size=(10_000, 4)) * 3.0
    fx, fy = forward(net, xs), forward(net, ys)
    num = np.linalg.norm(fx - fy, axis=1)
    den = np.linalg.norm(xs - ys, axis=1)
    assert np.all(num <= bound * den * (1.0 + 1e-9) + 1e-12)


# -- persistence -------------------------------------------------------------------


def test_save_load_round_trip_bit_exact(tmp_path):
    net = init_network(4, (8, 8), 2, "lcnn", seed=22)
    path = tmp_path / "model.json"
    save_network(net, path)
    back = load_network(path)
    for a, b in zip(net.layers, back.layers):
        assert a.kind == b.kind
        assert np.array_equal(a.weight, b.weight)  # exact, not approx
        assert (a.bias is None) == (b.bias is None)
        if a.bias is not None:
            assert np.array_equal(a.bias, b.bias)


def test_load_rejects_wrong_format(tmp_path):
    p = tmp_path / "bogus.json"
    p.write_text('{"format": "something-else", "version": 1, "layers": []}')
    with pytest.raises(ValueError):
        load_network(p)


def test_load_rejects_future_version(tmp_path):
    net = init_network(2, (4,), 1, "lcnn", seed=23)
    p = tmp_path / "model.json"
    save_network(net, p)
    doc = p.read_text().replace('"version": 1', '"version": 99')
    p.write_text(doc)
    with pytest.raises(ValueError):
        load_network(p)


def test_network_dim_chain_validated():
    with pytest.raises(ValueError):
        Network(
            [
                Layer(SPECTRAL_DENSE, np.eye(3), None),
                Layer(LINEAR_FREE, np.ones((1, 2)), None),
            ]
        )
