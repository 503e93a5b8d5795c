"""Closed-form planar dynamics of a free-floating chain of thruster-driven links.

The chain is a sequence of N rigid links connected by unactuated pin joints.
Each link carries a thruster that applies a force at the link's center of mass
(CM), at a fixed angle relative to the link axis. There is no anchor: the
system CM accelerates only under the net applied force. The joint constraint
forces are eliminated analytically, leaving an N-dimensional angular equation
plus the 2-dimensional CM equation.

Conventions:
  * link indices are 1-based in public APIs (link 1 .. link N),
  * angles are CCW from the inertial x-axis and are never wrapped,
  * state layout when flattened is (theta[N], cm[2], theta_dot[N], cm_dot[2]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "ChainParams",
    "ChainState",
    "CouplingMatrices",
    "LinkKinematics",
    "Trajectory",
    "IntegrationError",
    "build_coupling",
    "mass_matrix",
    "w_matrix",
    "net_forces",
    "angular_accel",
    "dynamics_rhs",
    "control_field",
    "reconstruct_links",
    "link_polyline",
    "integrate",
]


def _vector(values, name: str, n: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D array, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"{name} must have length {n}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class ChainParams:
    """Physical constants of the chain.

    half_lengths:    distance from each link CM to its joints (m)
    masses:          link masses (kg)
    inertias:        link moments of inertia about the link CM (kg m^2)
    thruster_angles: CCW angle from each link axis to its thrust direction (rad)
    """

    half_lengths: np.ndarray
    masses: np.ndarray
    inertias: np.ndarray
    thruster_angles: np.ndarray

    def __post_init__(self):
        l = _vector(self.half_lengths, "half_lengths")
        n = l.shape[0]
        if n < 1:
            raise ValueError("chain needs at least one link")
        m = _vector(self.masses, "masses", n)
        j = _vector(self.inertias, "inertias", n)
        psi = _vector(self.thruster_angles, "thruster_angles", n)
        for name, arr in (("half_lengths", l), ("masses", m), ("inertias", j)):
            if np.any(arr <= 0.0):
                raise ValueError(f"{name} must be strictly positive")
        object.__setattr__(self, "half_lengths", l)
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "inertias", j)
        object.__setattr__(self, "thruster_angles", psi)

    @property
    def n(self) -> int:
        return self.half_lengths.shape[0]

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def inv_masses(self) -> np.ndarray:
        return 1.0 / self.masses


@dataclass(frozen=True)
class ChainState:
    """Full simulation state: link angles, system CM, and their rates."""

    theta: np.ndarray
    cm: np.ndarray
    theta_dot: np.ndarray
    cm_dot: np.ndarray

    def __post_init__(self):
        theta = _vector(self.theta, "theta")
        n = theta.shape[0]
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "cm", _vector(self.cm, "cm", 2))
        object.__setattr__(self, "theta_dot", _vector(self.theta_dot, "theta_dot", n))
        object.__setattr__(self, "cm_dot", _vector(self.cm_dot, "cm_dot", 2))

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    def flatten(self) -> np.ndarray:
        """Pack into the canonical (2N+4,) layout."""
        return np.concatenate([self.theta, self.cm, self.theta_dot, self.cm_dot])

    @classmethod
    def from_flat(cls, flat, n: int) -> "ChainState":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (2 * n + 4,):
            raise ValueError(f"flat state must have shape ({2 * n + 4},)")
        return cls(flat[:n], flat[n:n + 2], flat[n + 2:2 * n + 2], flat[2 * n + 2:])

    @classmethod
    def at_rest(cls, theta, cm=(0.0, 0.0)) -> "ChainState":
        theta = np.asarray(theta, dtype=float)
        return cls(theta, np.asarray(cm, dtype=float), np.zeros_like(theta), np.zeros(2))


@dataclass(frozen=True)
class CouplingMatrices:
    """Joint-coupling matrices derived from the chain topology and masses.

    a: (N-1, N) adjacent-sum matrix, rows (.., 1, 1, ..)
    d: (N-1, N) adjacent-difference matrix, rows (.., 1, -1, ..)
    e: (2N, 2) column-block summation matrix
    v: (N, N) symmetric inertia-coupling matrix
    k: (N, N) constraint-force distribution matrix, rank N-1
    """

    a: np.ndarray
    d: np.ndarray
    e: np.ndarray
    v: np.ndarray
    k: np.ndarray


def build_coupling(params: ChainParams) -> CouplingMatrices:
    """Assemble the banded topology matrices and the mass-weighted couplings.

    v and k depend on the masses only; rebuild when masses change.
    For a single link the chain has no joints and v = k = 0.
    """
    n = params.n
    e = np.zeros((2 * n, 2))
    e[:n, 0] = 1.0
    e[n:, 1] = 1.0
    if n == 1:
        empty = np.zeros((0, 1))
        zero = np.zeros((1, 1))
        return CouplingMatrices(a=empty, d=empty.copy(), e=e, v=zero, k=zero.copy())

    idx = np.arange(n - 1)
    a = np.zeros((n - 1, n))
    d = np.zeros((n - 1, n))
    a[idx, idx] = 1.0
    a[idx, idx + 1] = 1.0
    d[idx, idx] = 1.0
    d[idx, idx + 1] = -1.0

    core = d @ np.diag(params.inv_masses) @ d.T
    v = a.T @ np.linalg.solve(core, a)
    k = a.T @ np.linalg.solve(core, d)
    return CouplingMatrices(a=a, d=d, e=e, v=v, k=k)


def mass_matrix(params: ChainParams, coupling: CouplingMatrices, theta) -> np.ndarray:
    """Configuration-dependent angular mass matrix (symmetric positive definite)."""
    theta = _vector(theta, "theta", params.n)
    s = np.sin(theta)
    c = np.cos(theta)
    ll = np.outer(params.half_lengths, params.half_lengths)
    coupled = coupling.v * (np.outer(s, s) + np.outer(c, c))
    return np.diag(params.inertias) + ll * coupled


def w_matrix(params: ChainParams, coupling: CouplingMatrices, theta) -> np.ndarray:
    """Skew-symmetric velocity-coupling matrix multiplying theta_dot**2."""
    theta = _vector(theta, "theta", params.n)
    s = np.sin(theta)
    c = np.cos(theta)
    ll = np.outer(params.half_lengths, params.half_lengths)
    return ll * coupling.v * (np.outer(s, c) - np.outer(c, s))


def net_forces(params: ChainParams, theta, u, fext=None):
    """Per-link net inertial-frame forces: external plus thruster components.

    u is the per-link thrust magnitude (N,); the thrust on link i points along
    theta_i + psi_i. fext is an optional (fx, fy) pair of (N,) arrays.
    """
    theta = _vector(theta, "theta", params.n)
    u = _vector(u, "u", params.n)
    phi = theta + params.thruster_angles
    fx = np.cos(phi) * u
    fy = np.sin(phi) * u
    if fext is not None:
        fx = fx + _vector(fext[0], "fext_x", params.n)
        fy = fy + _vector(fext[1], "fext_y", params.n)
    return fx, fy


def angular_accel(params: ChainParams, coupling: CouplingMatrices,
                  theta, theta_dot, fx, fy) -> np.ndarray:
    """Link angular accelerations for given net per-link forces."""
    theta = np.asarray(theta, dtype=float)
    theta_dot = np.asarray(theta_dot, dtype=float)
    l = params.half_lengths
    m_theta = mass_matrix(params, coupling, theta)
    w = w_matrix(params, coupling, theta)
    s = np.sin(theta)
    c = np.cos(theta)
    kx = coupling.k @ (np.asarray(fx, dtype=float) / params.masses)
    ky = coupling.k @ (np.asarray(fy, dtype=float) / params.masses)
    rhs = -w @ theta_dot**2 + l * s * kx - l * c * ky
    return cho_solve(cho_factor(m_theta, lower=True), rhs)


def dynamics_rhs(params: ChainParams, coupling: CouplingMatrices,
                 state: ChainState, u, fext=None) -> np.ndarray:
    """Time derivative of the flattened state.

    fext is an optional (fx, fy) pair of per-link external force arrays
    evaluated at the current instant.
    """
    fx, fy = net_forces(params, state.theta, u, fext)
    theta_ddot = angular_accel(params, coupling, state.theta, state.theta_dot, fx, fy)
    cm_ddot = np.array([fx.sum(), fy.sum()]) / params.total_mass
    return np.concatenate([state.theta_dot, state.cm_dot, theta_ddot, cm_ddot])


def control_field(params: ChainParams, coupling: CouplingMatrices,
                  theta, link: int) -> np.ndarray:
    """Control-affine vector field of one thruster on the augmented state.

    Returns the (4N,) direction in (theta, theta_dot, masses, inertias)
    coordinates along which a unit thrust on the given link (1-based) moves
    the augmented state. Only the theta_dot block is nonzero.
    """
    n = params.n
    if not 1 <= link <= n:
        raise IndexError(f"link must be in 1..{n}, got {link}")
    theta = _vector(theta, "theta", n)
    i = link - 1
    phi_i = theta[i] + params.thruster_angles[i]
    col = coupling.k[:, i] / params.masses[i]
    l = params.half_lengths
    direction = l * (np.sin(theta) * np.cos(phi_i) - np.cos(theta) * np.sin(phi_i)) * col
    m_theta = mass_matrix(params, coupling, theta)
    accel = cho_solve(cho_factor(m_theta, lower=True), direction)
    out = np.zeros(4 * n)
    out[n:2 * n] = accel
    return out


@dataclass(frozen=True)
class LinkKinematics:
    """Per-link CM positions and velocities in the inertial frame."""

    x: np.ndarray
    y: np.ndarray
    x_dot: np.ndarray
    y_dot: np.ndarray


def reconstruct_links(params: ChainParams, coupling: CouplingMatrices,
                      state: ChainState) -> LinkKinematics:
    """Recover link CM positions/velocities from angles and the system CM.

    Solves the stacked system combining joint-coincidence differences with the
    mass-weighted-mean (CM) row. For a single link this reduces to identity.
    """
    n = params.n
    t_mat = np.vstack([coupling.d, params.masses / params.total_mass])
    s = np.sin(state.theta)
    c = np.cos(state.theta)
    al_c = coupling.a @ (params.half_lengths * c)
    al_s = coupling.a @ (params.half_lengths * s)
    x = np.linalg.solve(t_mat, np.concatenate([-al_c, [state.cm[0]]]))
    y = np.linalg.solve(t_mat, np.concatenate([-al_s, [state.cm[1]]]))
    dal_s = coupling.a @ (params.half_lengths * s * state.theta_dot)
    dal_c = coupling.a @ (params.half_lengths * c * state.theta_dot)
    x_dot = np.linalg.solve(t_mat, np.concatenate([dal_s, [state.cm_dot[0]]]))
    y_dot = np.linalg.solve(t_mat, np.concatenate([-dal_c, [state.cm_dot[1]]]))
    return LinkKinematics(x=x, y=y, x_dot=x_dot, y_dot=y_dot)


def link_polyline(params: ChainParams, coupling: CouplingMatrices,
                  state: ChainState) -> np.ndarray:
    """Chain endpoints as an (N+1, 2) polyline, tail of link 1 to head of link N."""
    kin = reconstruct_links(params, coupling, state)
    c = np.cos(state.theta) * params.half_lengths
    s = np.sin(state.theta) * params.half_lengths
    pts = np.empty((params.n + 1, 2))
    pts[0] = (kin.x[0] - c[0], kin.y[0] - s[0])
    pts[1:, 0] = kin.x + c
    pts[1:, 1] = kin.y + s
    return pts


@dataclass(frozen=True)
class Trajectory:
    """Fixed-step integration result sampled at every step."""

    times: np.ndarray
    states: np.ndarray

    def state_at(self, index: int, n: int) -> ChainState:
        return ChainState.from_flat(self.states[index], n)


class IntegrationError(RuntimeError):
    """Raised when propagation produces a non-finite state."""


def _rhs_flat(params, coupling, t, y, u_vec, fext):
    n = params.n
    state = ChainState.from_flat(y, n)
    fe = fext(t, state) if fext is not None else None
    return dynamics_rhs(params, coupling, state, u_vec, fe)


def integrate(params: ChainParams, state0: ChainState, u_of_t, fext,
              t0: float, t1: float, dt: float) -> Trajectory:
    """Classical fixed-step RK4 propagation.

    u_of_t(t) returns the per-link thrust vector; it is sampled once per step
    at the step midpoint and held constant across the four stages, so schedules
    whose switch times align with step boundaries are integrated exactly.
    fext(t, state) returns (fx, fy) per-link external forces; None means zero.
    Deterministic; raises IntegrationError on a non-finite state.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if t1 <= t0:
        raise ValueError("t1 must exceed t0")
    span = t1 - t0
    n_steps = int(round(span / dt))
    if n_steps < 1 or abs(n_steps * dt - span) > 1e-9 * max(1.0, abs(span)):
        raise ValueError(f"dt={dt} does not evenly divide the span {span}")

    coupling = build_coupling(params)
    n = params.n
    zero_u = np.zeros(n)
    times = t0 + np.arange(n_steps + 1) * dt
    states = np.empty((n_steps + 1, 2 * n + 4))
    y = state0.flatten()
    states[0] = y
    for step in range(n_steps):
        t = times[step]
        u_vec = np.asarray(u_of_t(t + 0.5 * dt), dtype=float) if u_of_t is not None else zero_u
        try:
            k1 = _rhs_flat(params, coupling, t, y, u_vec, fext)
            k2 = _rhs_flat(params, coupling, t + 0.5 * dt, y + 0.5 * dt * k1, u_vec, fext)
            k3 = _rhs_flat(params, coupling, t + 0.5 * dt, y + 0.5 * dt * k2, u_vec, fext)
            k4 = _rhs_flat(params, coupling, t + dt, y + dt * k3, u_vec, fext)
        except ValueError as exc:
            raise IntegrationError(f"state blew up during step {step + 1} "
                                   f"(t={t:.6g}): {exc}") from exc
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(
                f"non-finite state after step {step + 1} (t={times[step + 1]:.6g})")
        states[step + 1] = y
    return Trajectory(times=times, states=states)
