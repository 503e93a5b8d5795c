"""Local observability analysis of the thruster chain with per-link IMUs.

The augmented estimation state stacks link angles, angular rates, masses, and
inertias. With CM-mounted IMUs the stacked measurement depends on the state
through the net forces and the rates, and the observability matrix built from
the zeroth-order output gradient plus the first-order response along each
thruster channel becomes block diagonal after a column reordering. Full rank
of that matrix certifies local observability; the blocks admit closed-form
conditions (a per-link thrust/net-force product for the force block, a no-zero
-row condition on the geometry-coupling matrix for the thruster block) that
this module evaluates alongside a direct numeric SVD rank for cross-checking.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .chain import ChainParams, ChainState, CouplingMatrices, build_coupling, mass_matrix

__all__ = [
    "AugmentedState",
    "ObservabilityReport",
    "augmented_params",
    "f_matrix",
    "build_observability_matrix",
    "omega1_determinant",
    "check_theorem4",
    "numeric_rank",
    "transformed_measurement",
    "control_response",
    "observability_sweep",
]

CONDITION_TOL = 1e-9  # default margin, force units


@dataclass(frozen=True)
class AugmentedState:
    """Estimation state: angles, rates, and the per-link inertial parameters.

    Masses and inertias are stored directly in kg and kg m^2.
    """

    theta: np.ndarray
    theta_dot: np.ndarray
    masses: np.ndarray
    inertias: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        n = theta.shape[0]
        theta_dot = np.asarray(self.theta_dot, dtype=float)
        masses = np.asarray(self.masses, dtype=float)
        inertias = np.asarray(self.inertias, dtype=float)
        for name, arr in (("theta_dot", theta_dot), ("masses", masses),
                          ("inertias", inertias)):
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if np.any(masses <= 0.0) or np.any(inertias <= 0.0):
            raise ValueError("masses and inertias must be strictly positive")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "theta_dot", theta_dot)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "inertias", inertias)

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.theta, self.theta_dot, self.masses, self.inertias])

    @classmethod
    def from_flat(cls, flat, n: int) -> "AugmentedState":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (4 * n,):
            raise ValueError(f"flat augmented state must have shape ({4 * n},)")
        return cls(flat[:n], flat[n:2 * n], flat[2 * n:3 * n], flat[3 * n:])

    @classmethod
    def from_chain(cls, state: ChainState, params: ChainParams) -> "AugmentedState":
        return cls(state.theta, state.theta_dot, params.masses, params.inertias)


def augmented_params(params: ChainParams, aug: AugmentedState) -> ChainParams:
    """Chain parameters with masses/inertias replaced by the augmented state's."""
    return replace(params, masses=aug.masses, inertias=aug.inertias)


@dataclass(frozen=True)
class ObservabilityReport:
    """Observability matrix diagnostics at one augmented state.

    cond1 holds u_i * sin(psi_i) per link; cond2 holds the per-link net-force
    margin u_i + cos(theta_i+psi_i) f_ext_x_i + sin(theta_i+psi_i) f_ext_y_i.
    observable requires both margins to clear the tolerance on every link.
    """

    matrix: np.ndarray
    rank: int
    singular_values: np.ndarray
    omega1_det: float
    omega1_det_via_schur: float
    omega2_has_zero_row: bool
    cond1: np.ndarray
    cond2: np.ndarray
    observable: bool

    def to_record(self) -> dict:
        """Compact serializable summary (matrix omitted)."""
        return {
            "rank": int(self.rank),
            "singularValues": [float(v) for v in self.singular_values],
            "omega1Det": float(self.omega1_det),
            "omega1DetViaSchur": float(self.omega1_det_via_schur),
            "omega2HasZeroRow": bool(self.omega2_has_zero_row),
            "cond1": [float(v) for v in self.cond1],
            "cond2": [float(v) for v in self.cond2],
            "observable": bool(self.observable),
        }


def f_matrix(params: ChainParams, coupling: CouplingMatrices, theta) -> np.ndarray:
    """Geometry-coupling matrix in reduced elementwise form.

    Entry (i, j) is k_ij * sin((theta_i - theta_j) - psi_j), which equals the
    matrix product form sin(theta) K cos(theta+psi) - cos(theta) K sin(theta+psi)
    built from diagonal trig factors.
    """
    theta = np.asarray(theta, dtype=float)
    psi = params.thruster_angles
    return coupling.k * np.sin(theta[:, None] - theta[None, :] - psi[None, :])


def _f_matrix_product_form(coupling: CouplingMatrices, theta, psi) -> np.ndarray:
    s, c = np.sin(theta), np.cos(theta)
    phi = theta + psi
    return s[:, None] * (coupling.k * np.cos(phi)[None, :]) \
        - c[:, None] * (coupling.k * np.sin(phi)[None, :])


def _net_force_terms(params, aug, u, fext):
    u = np.asarray(u, dtype=float)
    phi = aug.theta + params.thruster_angles
    if fext is None:
        fext_x = np.zeros(params.n)
        fext_y = np.zeros(params.n)
    else:
        fext_x = np.asarray(fext[0], dtype=float)
        fext_y = np.asarray(fext[1], dtype=float)
    return u, phi, fext_x, fext_y


def build_observability_matrix(params: ChainParams, aug: AugmentedState,
                               u, fext=None) -> np.ndarray:
    """Assemble the (3N + N^2) x 4N observability matrix.

    Row blocks: accelerometer-output gradients (2N rows over the angle and
    mass columns), gyro-output gradient (the inverse-inertia-scaled angular
    mass matrix over the rate column), then one N-row diagonal block per
    thruster channel over the inertia column. Blocks known to carry no rank
    information are assembled as zero, so the numeric rank is conservative.
    """
    n = params.n
    u, phi, fext_x, fext_y = _net_force_terms(params, aug, u, fext)
    p_aug = augmented_params(params, aug)
    coupling = build_coupling(p_aug)
    mbar = 1.0 / aug.masses
    sbar, cbar = np.sin(phi), np.cos(phi)

    big = np.zeros((3 * n + n * n, 4 * n))
    big[0:n, 0:n] = np.diag(-mbar * sbar * u)
    big[0:n, n:2 * n] = np.diag(fext_x + cbar * u)
    big[n:2 * n, 0:n] = np.diag(mbar * cbar * u)
    big[n:2 * n, n:2 * n] = np.diag(fext_y + sbar * u)
    m_theta = mass_matrix(p_aug, coupling, aug.theta)
    big[2 * n:3 * n, 2 * n:3 * n] = (1.0 / aug.inertias)[:, None] * m_theta
    fmat = _f_matrix_product_form(coupling, aug.theta, params.thruster_angles)
    g = p_aug.half_lengths[:, None] * fmat * mbar[None, :]
    for i in range(n):
        block = slice(3 * n + i * n, 3 * n + (i + 1) * n)
        big[block, 3 * n:4 * n] = np.diag(g[:, i])
    return big


def omega1_determinant(params: ChainParams, aug: AugmentedState,
                       u, fext=None) -> tuple[float, float]:
    """Determinant of the 2N x 2N force block, directly and in product form.

    The product form exploits that all four sub-blocks are diagonal and
    commute: det = det(-diag(1/m)) * prod_i u_i * (net-force margin)_i.
    """
    n = params.n
    u, phi, fext_x, fext_y = _net_force_terms(params, aug, u, fext)
    mbar = 1.0 / aug.masses
    sbar, cbar = np.sin(phi), np.cos(phi)
    omega1 = np.zeros((2 * n, 2 * n))
    omega1[0:n, 0:n] = np.diag(-mbar * sbar * u)
    omega1[0:n, n:2 * n] = np.diag(fext_x + cbar * u)
    omega1[n:2 * n, 0:n] = np.diag(mbar * cbar * u)
    omega1[n:2 * n, n:2 * n] = np.diag(fext_y + sbar * u)
    direct = float(np.linalg.det(omega1))
    margin = u + cbar * fext_x + sbar * fext_y
    via_schur = float(np.prod(-mbar) * np.prod(u * margin))
    return direct, via_schur


def numeric_rank(matrix: np.ndarray) -> tuple[int, np.ndarray]:
    """SVD rank with the usual max(dim) * eps * sigma_max cutoff."""
    svals = np.linalg.svd(matrix, compute_uv=False)
    if svals.size == 0:
        return 0, svals
    tol = max(matrix.shape) * np.finfo(float).eps * svals[0]
    return int(np.sum(svals > tol)), svals


def check_theorem4(params: ChainParams, aug: AugmentedState, u, fext=None,
                   tol: float = CONDITION_TOL) -> ObservabilityReport:
    """Evaluate the analytic observability conditions and the numeric rank.

    cond1_i = u_i sin(psi_i) must be nonzero for the thruster-response block
    to avoid zero rows; cond2_i is the per-link net-force margin required for
    the force block determinant. Both are compared against tol.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    n = params.n
    u, phi, fext_x, fext_y = _net_force_terms(params, aug, u, fext)
    big = build_observability_matrix(params, aug, u, (fext_x, fext_y))
    rank, svals = numeric_rank(big)
    direct, via_schur = omega1_determinant(params, aug, u, (fext_x, fext_y))

    p_aug = augmented_params(params, aug)
    coupling = build_coupling(p_aug)
    fmat = _f_matrix_product_form(coupling, aug.theta, params.thruster_angles)
    g = p_aug.half_lengths[:, None] * fmat * (1.0 / aug.masses)[None, :]
    row_peak = np.max(np.abs(g), axis=1) if n > 0 else np.zeros(0)
    zero_cut = 1e-12 * float(np.max(np.abs(g), initial=0.0)) + 1e-300
    has_zero_row = bool(np.any(row_peak <= zero_cut))

    cond1 = u * np.sin(params.thruster_angles)
    cond2 = u + np.cos(phi) * fext_x + np.sin(phi) * fext_y
    observable = bool(np.min(np.abs(cond1)) > tol and np.min(np.abs(cond2)) > tol)
    return ObservabilityReport(
        matrix=big,
        rank=rank,
        singular_values=svals,
        omega1_det=direct,
        omega1_det_via_schur=via_schur,
        omega2_has_zero_row=has_zero_row,
        cond1=cond1,
        cond2=cond2,
        observable=observable,
    )


def transformed_measurement(params: ChainParams, theta, scaled_rate, inv_masses,
                            inertias, u, fext=None) -> np.ndarray:
    """Stacked measurement in the transformed coordinates used by the analysis.

    Coordinates are (theta, z, inverse masses, inertias) where the physical
    rate is theta_dot = diag(1/j) M_theta z. Used by finite-difference checks
    of the assembled gradient blocks; the force channels are linear in the
    inverse masses and the rate channel is linear in z.
    """
    theta = np.asarray(theta, dtype=float)
    z = np.asarray(scaled_rate, dtype=float)
    mbar = np.asarray(inv_masses, dtype=float)
    j = np.asarray(inertias, dtype=float)
    u = np.asarray(u, dtype=float)
    phi = theta + params.thruster_angles
    if fext is None:
        fext_x = np.zeros(params.n)
        fext_y = np.zeros(params.n)
    else:
        fext_x, fext_y = (np.asarray(f, dtype=float) for f in fext)
    p_aug = replace(params, masses=1.0 / mbar, inertias=j)
    coupling = build_coupling(p_aug)
    m_theta = mass_matrix(p_aug, coupling, theta)
    rate_out = (m_theta @ z) / j
    return np.concatenate([
        mbar * (fext_x + np.cos(phi) * u),
        mbar * (fext_y + np.sin(phi) * u),
        rate_out,
    ])


def control_response(params: ChainParams, theta, inv_masses, inertias,
                     link: int) -> np.ndarray:
    """First-order rate-channel response along one thruster, inertia-scaled.

    Linear in the inertias by construction; its gradient with respect to the
    inertias is exactly the corresponding diagonal block of the observability
    matrix. link is 1-based.
    """
    n = params.n
    if not 1 <= link <= n:
        raise IndexError(f"link must be in 1..{n}, got {link}")
    theta = np.asarray(theta, dtype=float)
    mbar = np.asarray(inv_masses, dtype=float)
    j = np.asarray(inertias, dtype=float)
    p_aug = replace(params, masses=1.0 / mbar, inertias=j)
    coupling = build_coupling(p_aug)
    fmat = _f_matrix_product_form(coupling, theta, params.thruster_angles)
    g_col = p_aug.half_lengths * fmat[:, link - 1] * mbar[link - 1]
    return j * g_col


def observability_sweep(params: ChainParams, times, states, u_of_t, fext=None,
                        tol: float = CONDITION_TOL):
    """Evaluate the analytic conditions and numeric rank along a trajectory.

    states is an array of flattened chain states aligned with times; the
    augmented state at each sample carries the true masses and inertias.
    Returns (cond1, cond2, rank, observable) arrays.
    """
    times = np.asarray(times, dtype=float)
    n = params.n
    n_t = times.shape[0]
    cond1 = np.empty((n_t, n))
    cond2 = np.empty((n_t, n))
    rank = np.empty(n_t, dtype=int)
    observable = np.empty(n_t, dtype=bool)
    for idx, t in enumerate(times):
        state = ChainState.from_flat(states[idx], n)
        aug = AugmentedState.from_chain(state, params)
        u = np.asarray(u_of_t(t), dtype=float)
        fe = fext(t, state) if fext is not None else None
        report = check_theorem4(params, aug, u, fe, tol=tol)
        cond1[idx] = report.cond1
        cond2[idx] = report.cond2
        rank[idx] = report.rank
        observable[idx] = report.observable
    return cond1, cond2, rank, observable
