"""Lyapunov-constrained predictive control of the reactor benchmark.

The controller minimizes a quadratic stage cost over a short input horizon
subject to one of two stability constraints, chosen by where the current
state sits:

  * outside the terminal set: the first predicted step must shrink the
    Lyapunov function at least as fast as the fallback feedback law does
    (contraction mode);
  * inside the terminal set: every predicted state must stay inside it
    (confinement mode).

Predictions come from a pluggable one-step model: either the learned
network surrogate or direct integration of the plant equations. The solver
is a multi-start projected-gradient loop on a penalized objective with a
derivative-free polish, and it falls back to the feedback law whenever no
candidate satisfies the constraints.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .autodiff import Tensor, gradients
from .cstr import (
    CSTRParams,
    InputBounds,
    LyapunovSpec,
    in_level_set,
    lyapunov_gradient,
    lyapunov_value,
    step_sample_hold,
)
from .io_utils import atomic_write_text
from .network import forward, forward_taped, taped_layers

__all__ = [
    "FallbackLaw",
    "FirstPrinciplesPredictor",
    "NetworkPredictor",
    "MPCConfig",
    "SolveResult",
    "ClosedLoopTrace",
    "rollout",
    "solve_lmpc",
    "simulate_closed_loop",
    "save_trace",
    "load_trace",
]


# -- fallback feedback law -------------------------------------------------------


@dataclass(frozen=True)
class FallbackLaw:
    """Saturated feedback that pushes the Lyapunov function downhill.

    Each input channel opposes its own contribution to dV/dt and saturates
    at the actuator limit. The linear band (set by `widths`) keeps the law
    proportional near the target so the zero-order hold between samples does
    not overshoot; outside the band both channels run at full authority.
    `widths` are sized so saturation engages at roughly the edge of the
    terminal set.
    """

    params: CSTRParams
    lyap: LyapunovSpec = field(default_factory=LyapunovSpec)
    bounds: InputBounds = field(default_factory=InputBounds)
    widths: tuple = (1000.0, 0.05)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        g = lyapunov_gradient(self.lyap, x)
        # dV/du1 and dV/du2 along the (constant) input directions of the ODE
        b = np.stack(
            [
                g[..., 0] * (p.flow_rate / p.volume),
                g[..., 1] / (p.density * p.heat_capacity * p.volume),
            ],
            axis=-1,
        )
        limits = np.array([self.bounds.feed_delta_max, self.bounds.heat_max])
        return -limits * np.clip(b / np.asarray(self.widths), -1.0, 1.0)


# -- one-step predictors ---------------------------------------------------------


class FirstPrinciplesPredictor:
    """One-step model that integrates the plant equations under a held input."""

    def __init__(self, params, delta=1e-3, micro_step=1e-4):
        self.params = params
        self.delta = float(delta)
        self.micro_step = float(micro_step)

    def predict(self, x, u):
        return step_sample_hold(self.params, x, u, self.delta, self.micro_step)


class NetworkPredictor:
    """One-step surrogate: standardize (x, u), run the network, destandardize.

    The scaler must have been fit on 4-column inputs (state then input pair)
    and 2-column outputs (successor state).
    """

    def __init__(self, network, scaler):
        if network.in_dim != 4 or network.out_dim != 2:
            raise ValueError("predictor network must map 4 inputs to 2 outputs")
        if scaler.in_mean.shape != (4,) or scaler.out_mean.shape != (2,):
            raise ValueError("scaler shape does not match a 4-to-2 predictor")
        self.network = network
        self.scaler = scaler
        self._layers = taped_layers(network, requires_grad=False)

    def predict(self, x, u):
        z = np.concatenate([np.asarray(x, float), np.asarray(u, float)], axis=-1)
        z = (z - self.scaler.in_mean) / self.scaler.in_sd
        y = forward(self.network, z)
        return y * self.scaler.out_sd + self.scaler.out_mean

    def taped_step(self, x_t, u_t):
        """Tape-graph twin of predict for single states; x_t, u_t are Tensors."""
        s = self.scaler
        z = x_t.concat(u_t)
        z = (z - s.in_mean) * (1.0 / s.in_sd)
        y = forward_taped(self._layers, z)
        return y * s.out_sd + s.out_mean


def rollout(predictor, x0, inputs):
    """Apply the predictor along an input sequence; returns (N+1, 2) states."""
    xs = [np.asarray(x0, dtype=float)]
    for u in np.asarray(inputs, dtype=float):
        xs.append(predictor.predict(xs[-1], u))
    return np.stack(xs)


# -- controller configuration ----------------------------------------------------


@dataclass(frozen=True)
class MPCConfig:
    horizon: int = 2
    delta: float = 1e-3
    state_weight: tuple = ((6.25e-4, 0.0), (0.0, 1.0))
    input_weight: tuple = ((1e-2, 0.0), (0.0, 4e-12))
    n_candidates: int = 5
    grad_iters: int = 60
    grad_rate: float = 0.05
    polish_iters: int = 120
    penalty: float = 1e5
    feasibility_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.n_candidates < 3:
            raise ValueError("need at least the fallback, zero, and warm candidates")
        q1 = np.asarray(self.state_weight, dtype=float)
        q2 = np.asarray(self.input_weight, dtype=float)
        if q1.shape != (2, 2) or q2.shape != (2, 2):
            raise ValueError("weights must be 2x2")


@dataclass
class SolveResult:
    inputs: np.ndarray       # (N, 2) planned sequence
    applied: np.ndarray      # (2,) first input, the one sent to the plant
    cost: float
    violation: float         # worst raw constraint excess of the plan
    status: str              # "optimal" or "fallback"
    mode: str                # "contraction" or "confinement"
    predicted: np.ndarray    # (N+1, 2) predicted states under `inputs`


# -- solver internals ------------------------------------------------------------


def _quad(x, m):
    return float(x @ m @ x)


def _plan_cost(states, inputs, q1, q2):
    c = 0.0
    for k in range(inputs.shape[0]):
        c += _quad(states[k + 1], q1) + _quad(inputs[k], q2)
    return c


def _plan_violation(states, mode, lyap, decrease_cap):
    v = 0.0
    if mode == "contraction":
        v = max(v, lyapunov_value(lyap, states[1]) - decrease_cap)
    else:
        for k in range(1, states.shape[0]):
            v = max(v, lyapunov_value(lyap, states[k]) - lyap.inner_level)
    return max(v, 0.0)


class _Problem:
    """Penalized objective over the normalized input sequence s in [-1, 1]^(N,2).

    Physical inputs are limits * clip(s), so any iterate maps to a legal plan.
    """

    def __init__(self, predictor, x0, mode, decrease_cap, config, lyap, bounds):
        self.predictor = predictor
        self.x0 = np.asarray(x0, dtype=float)
        self.mode = mode
        self.decrease_cap = decrease_cap
        self.config = config
        self.lyap = lyap
        self.limits = np.array([bounds.feed_delta_max, bounds.heat_max])
        self.q1 = np.asarray(config.state_weight, dtype=float)
        self.q2 = np.asarray(config.input_weight, dtype=float)
        self._taped = hasattr(predictor, "taped_step")

    def inputs_of(self, s):
        return self.limits * np.clip(s, -1.0, 1.0)

    def evaluate(self, s):
        """(cost, raw violation) of the plan encoded by s."""
        u = self.inputs_of(np.asarray(s, dtype=float).reshape(-1, 2))
        states = rollout(self.predictor, self.x0, u)
        return (
            _plan_cost(states, u, self.q1, self.q2),
            _plan_violation(states, self.mode, self.lyap, self.decrease_cap),
        )

    def evaluate_many(self, s_rows):
        """Batched evaluate over rows of flattened plans; returns (costs, viols).

        Both predictors vectorize over leading axes, so one call rolls every
        plan forward in lockstep.
        """
        s_rows = np.asarray(s_rows, dtype=float)
        m = s_rows.shape[0]
        n = s_rows.shape[1] // 2
        u = self.limits * np.clip(s_rows.reshape(m, n, 2), -1.0, 1.0)
        p_mat = self.lyap.matrix
        x = np.broadcast_to(self.x0, (m, 2)).copy()
        costs = np.zeros(m)
        viols = np.zeros(m)
        for k in range(n):
            x = self.predictor.predict(x, u[:, k, :])
            costs += np.einsum("bi,ij,bj->b", x, self.q1, x)
            costs += np.einsum("bi,ij,bj->b", u[:, k, :], self.q2, u[:, k, :])
            v_k = np.einsum("bi,ij,bj->b", x, p_mat, x)
            if self.mode == "contraction":
                if k == 0:
                    viols = np.maximum(viols, v_k - self.decrease_cap)
            else:
                viols = np.maximum(viols, v_k - self.lyap.inner_level)
        return costs, np.maximum(viols, 0.0)

    def penalized(self, s):
        c, v = self.evaluate(s)
        return c + self.config.penalty * v

    def gradient(self, s):
        if self._taped:
            return self._tape_gradient(s)
        return self._numeric_gradient(s)

    def _tape_gradient(self, s):
        s = np.asarray(s, dtype=float).reshape(-1, 2)
        p_mat = self.lyap.matrix
        u_vars = [Tensor(self.limits * np.clip(row, -1, 1), requires_grad=True)
                  for row in s]
        x_t = Tensor(self.x0)
        cost = Tensor(np.asarray(0.0))
        states = [x_t]
        for u_t in u_vars:
            x_t = self.predictor.taped_step(x_t, u_t)
            states.append(x_t)
            cost = cost + (x_t @ self.q1) @ x_t + (u_t @ self.q2) @ u_t
        if self.mode == "contraction":
            viol = ((states[1] @ p_mat) @ states[1] - self.decrease_cap).relu()
        else:
            viol = Tensor(np.asarray(0.0))
            for x_k in states[1:]:
                viol = viol + ((x_k @ p_mat) @ x_k - self.lyap.inner_level).relu()
        total = cost + viol * self.config.penalty
        grads = gradients(total, u_vars)
        # chain rule through u = limits * s; clip kinks get subgradient 1 inside
        return np.stack([g * self.limits for g in grads]).reshape(-1)

    def _numeric_gradient(self, s, h=1e-6):
        s = np.asarray(s, dtype=float).reshape(-1)
        g = np.zeros_like(s)
        for i in range(s.size):
            sp = s.copy(); sp[i] += h
            sm = s.copy(); sm[i] -= h
            g[i] = (self.penalized(sp) - self.penalized(sm)) / (2 * h)
        return g


def _descend(problem, s0, config):
    """Adam descent on the penalized objective, projected onto [-1, 1].

    Returns the best iterate visited, judged feasibility-first then by cost,
    so the result is never worse than the starting point.
    """
    s = np.asarray(s0, dtype=float).reshape(-1).copy()
    m = np.zeros_like(s)
    v = np.zeros_like(s)
    best = s.copy()
    best_cost, best_viol = problem.evaluate(s)
    for t in range(1, config.grad_iters + 1):
        g = problem.gradient(s)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1.0 - 0.9 ** t)
        v_hat = v / (1.0 - 0.999 ** t)
        s = np.clip(s - config.grad_rate * m_hat / (np.sqrt(v_hat) + 1e-8), -1, 1)
        c, viol = problem.evaluate(s)
        if _better(c, viol, best_cost, best_viol, config.feasibility_tol):
            best, best_cost, best_viol = s.copy(), c, viol
    return best, best_cost, best_viol


def _descend_batch(problem, starts, config, h=1e-6):
    """Lockstep Adam over many starts with batched central-difference gradients.

    One evaluate_many call per iteration covers every start and coordinate
    perturbation, which keeps the integrating predictor affordable. Returns
    a list of (cost, violation, s) bests, one per start.
    """
    s = np.asarray(starts, dtype=float).reshape(len(starts), -1).copy()
    m_rows, d = s.shape
    mom = np.zeros_like(s)
    vel = np.zeros_like(s)
    best = s.copy()
    best_cost, best_viol = problem.evaluate_many(s)
    pen = config.penalty
    for t in range(1, config.grad_iters + 1):
        probe = np.repeat(s[:, None, :], 2 * d, axis=1)
        for j in range(d):
            probe[:, 2 * j, j] += h
            probe[:, 2 * j + 1, j] -= h
        c, viol = problem.evaluate_many(probe.reshape(m_rows * 2 * d, d))
        f = (c + pen * viol).reshape(m_rows, 2 * d)
        g = (f[:, 0::2] - f[:, 1::2]) / (2 * h)
        mom = 0.9 * mom + 0.1 * g
        vel = 0.999 * vel + 0.001 * g * g
        m_hat = mom / (1.0 - 0.9 ** t)
        v_hat = vel / (1.0 - 0.999 ** t)
        s = np.clip(s - config.grad_rate * m_hat / (np.sqrt(v_hat) + 1e-8), -1, 1)
        c, viol = problem.evaluate_many(s)
        for i in range(m_rows):
            if _better(c[i], viol[i], best_cost[i], best_viol[i],
                       config.feasibility_tol):
                best[i] = s[i]
                best_cost[i] = c[i]
                best_viol[i] = viol[i]
    return [(best_cost[i], best_viol[i], best[i]) for i in range(m_rows)]


def _better(c, v, c_ref, v_ref, tol):
    feas, feas_ref = v <= tol, v_ref <= tol
    if feas != feas_ref:
        return feas
    if not feas:
        return v < v_ref
    return c < c_ref


def solve_lmpc(predictor, phi, lyap, x, config, rng=None, previous=None,
               bounds=None):
    """One controller step: plan an input sequence from state x.

    phi is the fallback feedback law; its one-step prediction sets the
    contraction cap and it is always a candidate, so a feasible plan is never
    costlier than the fallback plan. When every candidate violates the
    constraints beyond `feasibility_tol`, the fallback input is applied
    unplanned and the result is flagged "fallback".
    """
    x = np.asarray(x, dtype=float)
    bounds = bounds or InputBounds()
    rng = rng or np.random.default_rng(config.seed)
    n = config.horizon
    limits = np.array([bounds.feed_delta_max, bounds.heat_max])

    mode = "confinement" if lyapunov_value(lyap, x) <= lyap.inner_level \
        else "contraction"
    u_phi = bounds.clip(phi(x))
    decrease_cap = float(lyapunov_value(lyap, predictor.predict(x, u_phi)))

    problem = _Problem(predictor, x, mode, decrease_cap, config, lyap, bounds)

    # fallback plan: run the feedback law along the predicted rollout
    phi_plan = np.zeros((n, 2))
    x_k = x
    for k in range(n):
        phi_plan[k] = bounds.clip(phi(x_k))
        x_k = predictor.predict(x_k, phi_plan[k])

    starts = [phi_plan / limits, np.zeros((n, 2))]
    if previous is not None:
        shifted = np.vstack([previous[1:], previous[-1:]])
        starts.append(np.clip(shifted / limits, -1, 1))
    while len(starts) < config.n_candidates:
        starts.append(rng.uniform(-1.0, 1.0, size=(n, 2)))

    phi_cost, phi_viol = problem.evaluate(phi_plan / limits)
    candidates = [(phi_cost, phi_viol, (phi_plan / limits).reshape(-1))]
    if problem._taped:
        for s0 in starts:
            s, c, v = _descend(problem, s0, config)
            candidates.append((c, v, s))
    else:
        candidates.extend(_descend_batch(problem, starts, config))

    best_c, best_v, best_s = min(
        candidates, key=lambda t: (t[1] > config.feasibility_tol, t[1], t[0])
    )

    if config.polish_iters > 0:
        res = minimize(
            problem.penalized, best_s.reshape(-1), method="Nelder-Mead",
            options={"maxiter": config.polish_iters, "xatol": 1e-10,
                     "fatol": 1e-12},
        )
        c, v = problem.evaluate(res.x)
        if _better(c, v, best_c, best_v, config.feasibility_tol):
            best_c, best_v, best_s = c, v, res.x

    if best_v <= config.feasibility_tol:
        u_seq = problem.inputs_of(np.asarray(best_s).reshape(n, 2))
        return SolveResult(
            inputs=u_seq,
            applied=u_seq[0].copy(),
            cost=best_c,
            violation=best_v,
            status="optimal",
            mode=mode,
            predicted=rollout(predictor, x, u_seq),
        )
    plan = np.tile(u_phi, (n, 1))
    c, v = problem.evaluate(plan / limits)
    return SolveResult(
        inputs=plan,
        applied=u_phi.copy(),
        cost=c,
        violation=v,
        status="fallback",
        mode=mode,
        predicted=rollout(predictor, x, plan),
    )


# -- closed loop -----------------------------------------------------------------


@dataclass
class ClosedLoopTrace:
    times: np.ndarray        # (n+1,) hours
    states: np.ndarray       # (n+1, 2) plant states (deviation form)
    inputs: np.ndarray       # (n, 2) applied inputs
    predicted: np.ndarray    # (n, 2) model's one-step-ahead state
    lyapunov: np.ndarray     # (n+1,) V along the plant trajectory
    costs: np.ndarray        # (n,) planned cost per step
    fallback: np.ndarray     # (n,) bool, True where the solver fell back

    def __post_init__(self):
        n = self.inputs.shape[0]
        if self.states.shape != (n + 1, 2) or self.times.shape != (n + 1,):
            raise ValueError("trace arrays disagree on length")


def simulate_closed_loop(params, predictor, config, x0, duration,
                         lyap=None, bounds=None, phi=None, plant_micro=1e-5):
    """Run the controller against the integrated plant for `duration` hours.

    The plant is integrated at `plant_micro` regardless of the predictor's
    own step, so model error shows up in the trace. x0 must lie in the
    stability region.
    """
    lyap = lyap or LyapunovSpec()
    bounds = bounds or InputBounds()
    phi = phi or FallbackLaw(params, lyap, bounds)
    x0 = np.asarray(x0, dtype=float)
    if not in_level_set(lyap, x0):
        raise ValueError("initial state lies outside the stability region")
    n = int(round(duration / config.delta))
    if abs(n * config.delta - duration) > 1e-9:
        raise ValueError("delta must divide duration")

    states = np.zeros((n + 1, 2))
    inputs = np.zeros((n, 2))
    predicted = np.zeros((n, 2))
    costs = np.zeros(n)
    fell_back = np.zeros(n, dtype=bool)
    states[0] = x0

    previous = None
    x = x0.copy()
    for k in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, k]))
        res = solve_lmpc(predictor, phi, lyap, x, config, rng=rng,
                         previous=previous, bounds=bounds)
        inputs[k] = res.applied
        predicted[k] = res.predicted[1]
        costs[k] = res.cost
        fell_back[k] = res.status == "fallback"
        x = step_sample_hold(params, x, res.applied, config.delta, plant_micro)
        states[k + 1] = x
        previous = res.inputs

    times = np.arange(n + 1) * config.delta
    return ClosedLoopTrace(
        times=times,
        states=states,
        inputs=inputs,
        predicted=predicted,
        lyapunov=lyapunov_value(lyap, states),
        costs=costs,
        fallback=fell_back,
    )


# -- trace persistence -----------------------------------------------------------

_TRACE_COLUMNS = (
    "time", "ca_dev", "t_dev", "feed_dev", "heat",
    "pred_ca_dev", "pred_t_dev", "lyapunov", "cost", "fallback",
)


def save_trace(path, trace, metadata=None):
    buf = io.StringIO()
    buf.write("# format=lipmpc-trace\n# version=1\n")
    for k, v in (metadata or {}).items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf)
    w.writerow(_TRACE_COLUMNS)
    n = trace.inputs.shape[0]
    for k in range(n + 1):
        row = [repr(float(trace.times[k])),
               repr(float(trace.states[k, 0])), repr(float(trace.states[k, 1]))]
        if k < n:
            row += [repr(float(trace.inputs[k, 0])), repr(float(trace.inputs[k, 1])),
                    repr(float(trace.predicted[k, 0])),
                    repr(float(trace.predicted[k, 1])),
                    repr(float(trace.lyapunov[k])), repr(float(trace.costs[k])),
                    str(int(trace.fallback[k]))]
        else:
            row += [""] * 4 + [repr(float(trace.lyapunov[k])), "", ""]
        w.writerow(row)
    atomic_write_text(path, buf.getvalue())


def load_trace(path):
    with open(path, "r", encoding="utf-8") as fh:
        meta = {}
        pos = fh.tell()
        line = fh.readline()
        while line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k.strip()] = v.strip()
            pos = fh.tell()
            line = fh.readline()
        fh.seek(pos)
        if meta.get("format") != "lipmpc-trace":
            raise ValueError("not a trace file")
        if int(meta.get("version", "0")) > 1:
            raise ValueError("trace file from a newer version")
        rows = list(csv.reader(fh))
    if rows[0] != list(_TRACE_COLUMNS):
        raise ValueError("unexpected trace columns")
    body = rows[1:]
    n = len(body) - 1
    times = np.array([float(r[0]) for r in body])
    states = np.array([[float(r[1]), float(r[2])] for r in body])
    inputs = np.array([[float(r[3]), float(r[4])] for r in body[:n]])
    predicted = np.array([[float(r[5]), float(r[6])] for r in body[:n]])
    lyap = np.array([float(r[7]) for r in body])
    costs = np.array([float(r[8]) for r in body[:n]])
    fell = np.array([r[9] == "1" for r in body[:n]])
    return ClosedLoopTrace(times, states, inputs.reshape(n, 2),
                           predicted.reshape(n, 2), lyap, costs, fell), meta
