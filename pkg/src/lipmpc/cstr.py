"""Benchmark exothermic CSTR: a second-order A -> B reaction in a cooled,
constant-volume stirred tank, written in deviation form around its unstable
operating point.

States (deviation): x1 = C_A - C_As [kmol/m^3], x2 = T - T_s [K].
Inputs (deviation): u1 = C_A0 - C_A0s [kmol/m^3], u2 = Q - Q_s [kJ/h].
Time in hours throughout.

The published operating point is rounded to three figures, so the raw ODE
residual there is not numerically zero; `CSTRParams.benchmark()` polishes the
equilibrium with a Newton solve and `steady_state_residual` guards any
hand-edited config against transcription errors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .io_utils import atomic_write_text
from .training import LabeledDataset

__all__ = [
    "CSTRParams",
    "LyapunovSpec",
    "InputBounds",
    "IntegrationDivergedError",
    "rhs",
    "step_sample_hold",
    "lyapunov_value",
    "lyapunov_gradient",
    "in_level_set",
    "level_set_box",
    "sample_level_set",
    "generate_dataset",
    "steady_state_residual",
    "save_process_config",
    "load_process_config",
]


class IntegrationDivergedError(RuntimeError):
    """State left the validity box during explicit integration."""


@dataclass(frozen=True)
class CSTRParams:
    flow_rate: float = 5.0  # F [m^3/h]
    volume: float = 1.0  # V [m^3]
    feed_temperature: float = 300.0  # T0 [K]
    preexponential: float = 8.46e6  # k0 [m^3/(kmol h)]
    activation_energy: float = 5.0e4  # E [kJ/kmol]
    gas_constant: float = 8.314  # R [kJ/(kmol K)]
    reaction_enthalpy: float = -1.15e4  # dH [kJ/kmol], exothermic
    density: float = 1000.0  # rho_L [kg/m^3]
    heat_capacity: float = 0.231  # Cp [kJ/(kg K)]
    steady_concentration: float = 1.95  # C_As [kmol/m^3]
    steady_temperature: float = 402.0  # T_s [K]
    steady_feed_concentration: float = 4.0  # C_A0s [kmol/m^3]
    steady_heat: float = 0.0  # Q_s [kJ/h]

    @classmethod
    def benchmark(cls):
        """Benchmark constants with the equilibrium polished by Newton so the
        steady-state residual is at rounding level rather than the published
        three-figure level."""
        rough = cls()
        ca, temp = rough.steady_concentration, rough.steady_temperature
        for _ in range(60):
            f = np.array(_rhs_absolute(rough, ca, temp, rough.steady_feed_concentration, rough.steady_heat))
            jac = _equilibrium_jacobian(rough, ca, temp)
            delta = np.linalg.solve(jac, -f)
            ca, temp = ca + delta[0], temp + delta[1]
            if np.max(np.abs(delta)) < 1e-13:
                break
        return cls(steady_concentration=float(ca), steady_temperature=float(temp))


def _arrhenius(p, temp_abs):
    return p.preexponential * np.exp(-p.activation_energy / (p.gas_constant * temp_abs))


def _rhs_absolute(p, ca, temp, ca0, q):
    rate = _arrhenius(p, temp) * ca * ca
    f_over_v = p.flow_rate / p.volume
    heat_cap = p.density * p.heat_capacity
    dca = f_over_v * (ca0 - ca) - rate
    dtemp = (
        f_over_v * (p.feed_temperature - temp)
        - p.reaction_enthalpy / heat_cap * rate
        + q / (heat_cap * p.volume)
    )
    return dca, dtemp


def _equilibrium_jacobian(p, ca, temp):
    k = _arrhenius(p, temp)
    kprime = k * p.activation_energy / (p.gas_constant * temp * temp)
    f_over_v = p.flow_rate / p.volume
    gamma = p.reaction_enthalpy / (p.density * p.heat_capacity)
    return np.array(
        [
            [-f_over_v - 2.0 * k * ca, -kprime * ca * ca],
            [-gamma * 2.0 * k * ca, -f_over_v - gamma * kprime * ca * ca],
        ]
    )


def rhs(p, x, u):
    """Deviation-state time derivative. Vectorized: x and u may be (..., 2).

    Raises ValueError if any absolute temperature is nonpositive (the rate
    law stops meaning anything there).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    ca = p.steady_concentration + x[..., 0]
    temp = p.steady_temperature + x[..., 1]
    if np.any(temp <= 0.0):
        raise ValueError("nonpositive absolute temperature")
    ca0 = p.steady_feed_concentration + u[..., 0]
    q = p.steady_heat + u[..., 1]
    dca, dtemp = _rhs_absolute(p, ca, temp, ca0, q)
    return np.stack([dca, dtemp], axis=-1)


_DEFAULT_VALIDITY = np.array([20.0, 500.0])  # generous deviation box


def step_sample_hold(p, x, u, delta=1e-3, micro_step=1e-5, validity=None):
    """Hold u constant and integrate the deviation ODE for `delta` hours with
    forward Euler at `micro_step`. Vectorized over leading axes of x/u.

    micro_step must tile delta evenly. Raises IntegrationDivergedError when
    the state leaves the validity box (componentwise deviation bound).
    """
    if delta < 0 or micro_step <= 0:
        raise ValueError("delta must be >= 0 and micro_step > 0")
    n = int(round(delta / micro_step))
    if abs(n * micro_step - delta) > 1e-12 * max(1.0, delta):
        raise ValueError("micro_step must divide delta")
    box = _DEFAULT_VALIDITY if validity is None else np.asarray(validity, dtype=float)
    z = np.asarray(x, dtype=float).copy()
    for _ in range(n):
        z = z + micro_step * rhs(p, z, u)
        if np.any(np.abs(z) > box):
            raise IntegrationDivergedError(
                f"state left validity box (|x| up to {np.max(np.abs(z)):.3g})"
            )
    return z


def steady_state_residual(p, lyap=None):
    """Norm of the ODE right side at (0, 0), with each component divided by
    the corresponding half-width of the stability region's bounding box (so
    the two states contribute on comparable footing)."""
    lyap = lyap or LyapunovSpec()
    scale = level_set_box(lyap)
    r = rhs(p, np.zeros(2), np.zeros(2))
    return float(np.linalg.norm(r / scale))


# -- stability region -------------------------------------------------------------


@dataclass(frozen=True)
class LyapunovSpec:
    """Quadratic certificate x'Px with an outer operating level and a small
    terminal level around the origin."""

    p_matrix: tuple = ((1060.0, 22.0), (22.0, 0.52))
    level: float = 372.0
    inner_level: float = 2.0

    def __post_init__(self):
        m = self.matrix
        if m.shape != (2, 2) or not np.allclose(m, m.T, atol=1e-12):
            raise ValueError("P must be a symmetric 2x2 matrix")
        if m[0, 0] <= 0 or np.linalg.det(m) <= 0:
            raise ValueError("P must be positive definite")
        if not (0 < self.inner_level < self.level):
            raise ValueError("need 0 < inner_level < level")

    @property
    def matrix(self):
        return np.asarray(self.p_matrix, dtype=float)


def lyapunov_value(lyap, x):
    x = np.asarray(x, dtype=float)
    m = lyap.matrix
    return np.einsum("...i,ij,...j->...", x, m, x)


def lyapunov_gradient(lyap, x):
    return 2.0 * np.asarray(x, dtype=float) @ lyap.matrix


def in_level_set(lyap, x, level=None):
    level = lyap.level if level is None else level
    return lyapunov_value(lyap, x) <= level


def level_set_box(lyap, level=None):
    """Componentwise half-widths of the tightest axis-aligned box containing
    the ellipse x'Px <= level: half_i = sqrt(level * (P^-1)_ii)."""
    level = lyap.level if level is None else level
    inv = np.linalg.inv(lyap.matrix)
    return np.sqrt(level * np.diag(inv))


def sample_level_set(lyap, n, rng, level=None, box=None):
    """Uniform samples from the ellipse by rejection from a box proposal
    (default: the ellipse's own bounding box, whose acceptance is bounded
    well away from zero). Errors out if acceptance drops below 1%, which
    means the proposal box and the level set disagree badly."""
    level = lyap.level if level is None else level
    box = level_set_box(lyap, level) if box is None else np.asarray(box, dtype=float)
    out = np.empty((n, 2))
    got = 0
    proposed = 0
    while got < n:
        chunk = max(256, n - got)
        cand = rng.uniform(-box, box, size=(chunk, 2))
        proposed += chunk
        keep = cand[lyapunov_value(lyap, cand) <= level]
        take = min(len(keep), n - got)
        out[got : got + take] = keep[:take]
        got += take
        if proposed >= 25_600 and got < 0.01 * proposed:
            raise ValueError(
                "rejection acceptance below 1%; proposal box and level set disagree"
            )
    return out


# -- input bounds and data generation ------------------------------------------------


@dataclass(frozen=True)
class InputBounds:
    feed_delta_max: float = 3.5  # |u1| [kmol/m^3]
    heat_max: float = 5.0e5  # |u2| [kJ/h]

    def __post_init__(self):
        if self.feed_delta_max <= 0 or self.heat_max <= 0:
            raise ValueError("input bounds must be positive")

    @property
    def lo(self):
        return np.array([-self.feed_delta_max, -self.heat_max])

    @property
    def hi(self):
        return np.array([self.feed_delta_max, self.heat_max])

    def clip(self, u):
        return np.clip(u, self.lo, self.hi)

    def contains(self, u, slack=1e-12):
        u = np.asarray(u, dtype=float)
        return bool(np.all(np.abs(u[..., 0]) <= self.feed_delta_max + slack)
                    and np.all(np.abs(u[..., 1]) <= self.heat_max + slack))


DATASET_COLUMNS = ("ca_dev", "t_dev", "feed_dev", "heat", "ca_dev_next", "t_dev_next")


def generate_dataset(p, lyap, bounds, n, seed, delta=1e-3, micro_step=1e-5):
    """Sampled one-step transition pairs: initial states uniform over the
    operating ellipse, inputs uniform over the box, successor states from the
    held-input Euler integration over one sampling period."""
    rng = np.random.default_rng(seed)
    x0 = sample_level_set(lyap, n, rng)
    u = rng.uniform(bounds.lo, bounds.hi, size=(n, 2))
    x_next = step_sample_hold(p, x0, u, delta=delta, micro_step=micro_step)
    return LabeledDataset(np.hstack([x0, u]), x_next)


# -- config persistence ----------------------------------------------------------------

CONFIG_FORMAT = "lipmpc-process"
CONFIG_VERSION = 1
_RESIDUAL_LIMIT = 1e-3


def save_process_config(path, params, lyap=None, bounds=None):
    doc = {
        "format": CONFIG_FORMAT,
        "version": CONFIG_VERSION,
        "params": asdict(params),
        "lyapunov": asdict(lyap or LyapunovSpec()),
        "input_bounds": asdict(bounds or InputBounds()),
    }
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def load_process_config(path):
    """Read and validate a process config. The steady-state consistency check
    runs here so a hand-edited file with inconsistent constants is rejected
    at the boundary instead of producing silently wrong datasets."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CONFIG_FORMAT:
        raise ValueError(f"not a {CONFIG_FORMAT} file: {path}")
    if doc.get("version") != CONFIG_VERSION:
        raise ValueError(f"unsupported process config version {doc.get('version')!r}")
    lyap_doc = dict(doc["lyapunov"])
    lyap_doc["p_matrix"] = tuple(tuple(row) for row in lyap_doc["p_matrix"])
    params = CSTRParams(**doc["params"])
    lyap = LyapunovSpec(**lyap_doc)
    bounds = InputBounds(**doc["input_bounds"])
    resid = steady_state_residual(params, lyap)
    if resid >= _RESIDUAL_LIMIT:
        raise ValueError(
            f"steady-state residual {resid:.3e} exceeds {_RESIDUAL_LIMIT}; "
            "the operating point does not solve the ODE with these constants"
        )
    return params, lyap, bounds
