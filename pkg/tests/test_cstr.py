"""Reactor model: equilibrium consistency, input linearity, Euler order,
level-set geometry, and dataset generation."""

import json

import numpy as np
import pytest

from lipmpc.cstr import (
    CSTRParams,
    InputBounds,
    IntegrationDivergedError,
    LyapunovSpec,
    generate_dataset,
    in_level_set,
    level_set_box,
    load_process_config,
    lyapunov_gradient,
    lyapunov_value,
    rhs,
    sample_level_set,
    save_process_config,
    steady_state_residual,
    step_sample_hold,
)

P = CSTRParams.benchmark()
LYAP = LyapunovSpec()
BOUNDS = InputBounds()


def test_steady_state_residual_tiny():
    assert steady_state_residual(P, LYAP) < 1e-10


def test_published_rounding_alone_fails_the_gate():
    # the three-figure operating point is not an equilibrium of the ODE
    assert steady_state_residual(CSTRParams(), LYAP) > 1e-3


def test_rhs_linear_in_heat_input():
    rng = np.random.default_rng(80)
    gain = 1.0 / (P.density * P.heat_capacity * P.volume)
    for _ in range(20):
        x = rng.normal(size=2) * [0.5, 20.0]
        q1, q2 = rng.uniform(-5e5, 5e5, size=2)
        d = rhs(P, x, [0.3, q1]) - rhs(P, x, [0.3, q2])
        assert d[0] == pytest.approx(0.0, abs=1e-12)
        assert d[1] == pytest.approx(gain * (q1 - q2), rel=1e-12)


def test_rhs_linear_in_feed_concentration():
    rng = np.random.default_rng(81)
    gain = P.flow_rate / P.volume
    for _ in range(20):
        x = rng.normal(size=2) * [0.5, 20.0]
        c1, c2 = rng.uniform(-3.5, 3.5, size=2)
        d = rhs(P, x, [c1, 0.0]) - rhs(P, x, [c2, 0.0])
        assert d[0] == pytest.approx(gain * (c1 - c2), rel=1e-12)
        assert d[1] == pytest.approx(0.0, abs=1e-9)


def test_rhs_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        rhs(P, [0.0, -500.0], [0.0, 0.0])


def test_step_zero_duration_is_identity():
    x = np.array([0.3, -5.0])
    out = step_sample_hold(P, x, [0.1, 1e4], delta=0.0)
    assert np.array_equal(out, x)


def test_step_holds_equilibrium():
    out = step_sample_hold(P, np.zeros(2), np.zeros(2), delta=1e-3)
    assert np.max(np.abs(out)) < 1e-6


def test_step_requires_divisible_micro_step():
    with pytest.raises(ValueError):
        step_sample_hold(P, np.zeros(2), np.zeros(2), delta=1e-3, micro_step=3e-4)


def test_step_first_order_in_micro_step():
    # halving the micro step should halve the integration error (forward
    # Euler is first order), checked with a Richardson-style ratio
    rng = np.random.default_rng(82)
    ratios = []
    for _ in range(10):
        x = sample_level_set(LYAP, 1, rng)[0]
        u = rng.uniform(BOUNDS.lo, BOUNDS.hi)
        coarse = step_sample_hold(P, x, u, delta=1e-3, micro_step=2e-5)
        half = step_sample_hold(P, x, u, delta=1e-3, micro_step=1e-5)
        quarter = step_sample_hold(P, x, u, delta=1e-3, micro_step=5e-6)
        num = np.linalg.norm(coarse - half)
        den = np.linalg.norm(half - quarter)
        if den > 1e-14:
            ratios.append(num / den)
    assert len(ratios) >= 5
    assert 1.6 < np.median(ratios) < 2.4


def test_step_flags_divergence():
    with pytest.raises(IntegrationDivergedError):
        step_sample_hold(P, [0.5, 20.0], [3.5, 5e5], delta=1.0, validity=[0.6, 30.0])


# -- level set ---------------------------------------------------------------------


def test_lyapunov_pinned_values():
    assert lyapunov_value(LYAP, [0.0, 0.0]) == 0.0
    assert lyapunov_value(LYAP, [1.0, 0.0]) == pytest.approx(1060.0)
    assert lyapunov_value(LYAP, [0.0, 1.0]) == pytest.approx(0.52)
    assert lyapunov_value(LYAP, [1.0, 1.0]) == pytest.approx(1060.0 + 44.0 + 0.52)


def test_lyapunov_gradient_matches_quadratic():
    rng = np.random.default_rng(83)
    for _ in range(10):
        x = rng.normal(size=2)
        h = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (lyapunov_value(LYAP, x + e) - lyapunov_value(LYAP, x - e)) / (2 * h)
            assert lyapunov_gradient(LYAP, x)[i] == pytest.approx(fd, rel=1e-6)


def test_level_membership():
    assert in_level_set(LYAP, [0.0, 0.0])
    assert in_level_set(LYAP, [-1.65, 72.0])  # V = 354.3
    assert not in_level_set(LYAP, [1.65, 72.0])  # cross term flips sign
    assert in_level_set(LYAP, [0.04, 0.0], level=LYAP.inner_level)


def test_level_set_box_is_tight():
    box = level_set_box(LYAP)
    for i in range(2):
        edge = np.zeros(2)
        edge[i] = box[i]
        # the extreme point in each coordinate sits exactly on the ellipse
        other = -LYAP.matrix[i, 1 - i] / LYAP.matrix[1 - i, 1 - i] * box[i]
        point = edge.copy()
        point[1 - i] = other
        assert lyapunov_value(LYAP, point) == pytest.approx(LYAP.level, rel=1e-12)


def test_sampling_stays_inside_and_is_deterministic():
    a = sample_level_set(LYAP, 2000, np.random.default_rng(84))
    b = sample_level_set(LYAP, 2000, np.random.default_rng(84))
    assert np.array_equal(a, b)
    assert np.all(lyapunov_value(LYAP, a) <= LYAP.level)
    # both signs of both coordinates show up: the ellipse is actually covered
    assert a[:, 0].min() < -1.0 and a[:, 0].max() > 1.0
    assert a[:, 1].min() < -50 and a[:, 1].max() > 50


def test_sampling_rejects_hopeless_proposal_box():
    with pytest.raises(ValueError):
        sample_level_set(LYAP, 50, np.random.default_rng(85), box=[2000.0, 90000.0])


# -- dataset ------------------------------------------------------------------------


def test_generate_dataset_shapes_and_ranges():
    ds = generate_dataset(P, LYAP, BOUNDS, n=500, seed=86)
    assert ds.inputs.shape == (500, 4)
    assert ds.outputs.shape == (500, 2)
    assert np.all(lyapunov_value(LYAP, ds.inputs[:, :2]) <= LYAP.level)
    assert np.all(np.abs(ds.inputs[:, 2]) <= BOUNDS.feed_delta_max)
    assert np.all(np.abs(ds.inputs[:, 3]) <= BOUNDS.heat_max)
    assert np.all(np.isfinite(ds.outputs))


def test_generate_dataset_deterministic():
    a = generate_dataset(P, LYAP, BOUNDS, n=100, seed=87)
    b = generate_dataset(P, LYAP, BOUNDS, n=100, seed=87)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.outputs, b.outputs)


def test_generate_dataset_successors_match_single_steps():
    ds = generate_dataset(P, LYAP, BOUNDS, n=20, seed=88)
    for row_in, row_out in zip(ds.inputs, ds.outputs):
        single = step_sample_hold(P, row_in[:2], row_in[2:], delta=1e-3)
        assert np.allclose(single, row_out, atol=1e-12)


# -- config -------------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    path = tmp_path / "process.json"
    save_process_config(path, P, LYAP, BOUNDS)
    params, lyap, bounds = load_process_config(path)
    assert params == P
    assert lyap == LYAP
    assert bounds == BOUNDS


def test_config_rejects_inconsistent_operating_point(tmp_path):
    path = tmp_path / "process.json"
    save_process_config(path, P, LYAP, BOUNDS)
    doc = json.loads(path.read_text())
    doc["params"]["steady_temperature"] = 390.0  # no longer an equilibrium
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="residual"):
        load_process_config(path)


def test_config_rejects_unknown_format(tmp_path):
    path = tmp_path / "bogus.json"
    path.write_text('{"format": "other", "version": 1}')
    with pytest.raises(ValueError):
        load_process_config(path)
