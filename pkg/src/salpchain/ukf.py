"""Unscented Kalman filtering of the augmented chain state from stacked IMUs.

The filter estimates (theta, theta_dot, masses, inertias) jointly; the
parameter rows have zero dynamics. Sigma points are propagated through one
RK4 step of the augmented dynamics per predict, and the update consumes the
stacked per-link (accel_x, accel_y, gyro) measurement with CM-mounted IMUs.
Process and measurement noise are additive. Sigma-point evaluation is batched
across points for speed; the batched dynamics path is cross-checked against
the scalar chain model in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

from .chain import ChainParams

__all__ = [
    "GaussianBelief",
    "FilterConfig",
    "FilterTrace",
    "UpdateInfo",
    "FilterNumericsError",
    "sigma_points",
    "unscented_moments",
    "predict",
    "update",
    "run_filter",
    "nees_chi2_band",
]


class FilterNumericsError(RuntimeError):
    """Raised when the belief covariance loses a usable square root."""


@dataclass
class GaussianBelief:
    """Gaussian belief over the flattened 4N augmented state."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ValueError(f"cov must be ({n}, {n})")


@dataclass
class FilterConfig:
    """Noise, sigma-point, and stepping configuration.

    process_noise: per-step additive variances, length 4N
    meas_noise:    per-IMU channel variances (acc_x, acc_y, gyro)
    dt:            predict step, one per measurement
    param_floor:   lower clamp for sigma-point masses/inertias (length 2N);
                   resolved from the initial mean by run_filter when None
    log_params:    estimate log-masses/log-inertias instead of clamping
    """

    process_noise: np.ndarray
    meas_noise: np.ndarray
    dt: float
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0
    param_floor: np.ndarray | None = None
    log_params: bool = False

    def __post_init__(self):
        self.process_noise = np.asarray(self.process_noise, dtype=float)
        self.meas_noise = np.asarray(self.meas_noise, dtype=float)
        if self.meas_noise.shape != (3,):
            raise ValueError("meas_noise must hold (acc, acc, gyro) variances")
        if np.any(self.process_noise < 0.0) or np.any(self.meas_noise < 0.0):
            raise ValueError("noise variances must be nonnegative")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")


@dataclass
class UpdateInfo:
    """Innovation diagnostics from one measurement update."""

    innovation: np.ndarray
    innovation_cov: np.ndarray
    regularized: bool = False


def sigma_points(mean: np.ndarray, cov: np.ndarray, alpha: float, beta: float,
                 kappa: float):
    """Scaled symmetric sigma-point set with mean/covariance weights.

    Returns (points (2n+1, n), w_mean, w_cov). Falls back to one jittered
    Cholesky retry before failing.
    """
    n = mean.shape[0]
    scale = alpha * alpha * (n + kappa)
    lam = scale - n
    try:
        root = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        try:
            root = np.linalg.cholesky(cov + 1e-12 * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise FilterNumericsError(
                "covariance square root failed even after regularization") from exc
    offsets = np.sqrt(scale) * root.T
    pts = np.empty((2 * n + 1, n))
    pts[0] = mean
    pts[1:n + 1] = mean + offsets
    pts[n + 1:] = mean - offsets
    w_mean = np.full(2 * n + 1, 0.5 / scale)
    w_mean[0] = lam / scale
    w_cov = w_mean.copy()
    w_cov[0] += 1.0 - alpha * alpha + beta
    return pts, w_mean, w_cov


def unscented_moments(points: np.ndarray, w_mean: np.ndarray, w_cov: np.ndarray):
    """Weighted mean and covariance of transformed sigma points."""
    mean = w_mean @ points
    dev = points - mean
    cov = (w_cov * dev.T) @ dev
    return mean, cov


# Cached adjacency matrices keyed by link count.
_TOPOLOGY: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _topology(n: int):
    if n not in _TOPOLOGY:
        idx = np.arange(n - 1)
        a = np.zeros((n - 1, n))
        d = np.zeros((n - 1, n))
        a[idx, idx] = 1.0
        a[idx, idx + 1] = 1.0
        d[idx, idx] = 1.0
        d[idx, idx + 1] = -1.0
        _TOPOLOGY[n] = (a, d)
    return _TOPOLOGY[n]


def _theta_ddot_batch(l, psi, theta, theta_dot, masses, inertias, u, fext_x, fext_y):
    """Angular accelerations for a batch of augmented states, (B, n) arrays."""
    b, n = theta.shape
    phi = theta + psi
    fx = fext_x + np.cos(phi) * u
    fy = fext_y + np.sin(phi) * u
    if n == 1:
        return np.zeros((b, 1))
    a_mat, d_mat = _topology(n)
    mbar = 1.0 / masses
    core = np.einsum("an,bn,cn->bac", d_mat, mbar, d_mat)
    a_rhs = np.broadcast_to(a_mat, (b, n - 1, n))
    d_rhs = np.broadcast_to(d_mat, (b, n - 1, n))
    v = np.einsum("an,bam->bnm", a_mat, np.linalg.solve(core, a_rhs))
    k = np.einsum("an,bam->bnm", a_mat, np.linalg.solve(core, d_rhs))
    s = np.sin(theta)
    c = np.cos(theta)
    ll = np.outer(l, l)
    m_theta = ll * v * (s[:, :, None] * s[:, None, :] + c[:, :, None] * c[:, None, :])
    m_theta[:, np.arange(n), np.arange(n)] += inertias
    w = ll * v * (s[:, :, None] * c[:, None, :] - c[:, :, None] * s[:, None, :])
    kx = np.einsum("bij,bj->bi", k, fx * mbar)
    ky = np.einsum("bij,bj->bi", k, fy * mbar)
    rhs = -np.einsum("bij,bj->bi", w, theta_dot**2) + l * s * kx - l * c * ky
    return np.linalg.solve(m_theta, rhs[:, :, None])[:, :, 0]


def _unpack(points: np.ndarray, n: int, log_params: bool):
    theta = points[:, :n]
    theta_dot = points[:, n:2 * n]
    masses = points[:, 2 * n:3 * n]
    inertias = points[:, 3 * n:]
    if log_params:
        masses = np.exp(masses)
        inertias = np.exp(inertias)
    return theta, theta_dot, masses, inertias


def _aug_rhs_batch(params: ChainParams, points, u, fext_x, fext_y, log_params):
    theta, theta_dot, masses, inertias = _unpack(points, params.n, log_params)
    ddot = _theta_ddot_batch(params.half_lengths, params.thruster_angles,
                             theta, theta_dot, masses, inertias, u, fext_x, fext_y)
    out = np.zeros_like(points)
    out[:, :params.n] = theta_dot
    out[:, params.n:2 * params.n] = ddot
    return out


def _measurement_batch(params: ChainParams, points, u, fext_x, fext_y, log_params):
    theta, theta_dot, masses, _ = _unpack(points, params.n, log_params)
    phi = theta + params.thruster_angles
    hx = (fext_x + np.cos(phi) * u) / masses
    hy = (fext_y + np.sin(phi) * u) / masses
    return np.concatenate([hx, hy, theta_dot], axis=1)


def _resolve_fext(fext, n):
    if fext is None:
        return np.zeros(n), np.zeros(n)
    return np.asarray(fext[0], dtype=float), np.asarray(fext[1], dtype=float)


def _clamp_params(points_or_mean: np.ndarray, n: int, config: FilterConfig):
    if config.log_params:
        return points_or_mean
    floor = config.param_floor
    if floor is None:
        floor = 1e-12
    block = points_or_mean[..., 2 * n:]
    np.maximum(block, floor, out=block)
    return points_or_mean


def _expand_r(config: FilterConfig, n: int) -> np.ndarray:
    acc_x, acc_y, gyro = config.meas_noise
    return np.concatenate([np.full(n, acc_x), np.full(n, acc_y), np.full(n, gyro)])


def predict(belief: GaussianBelief, u, fext, params: ChainParams,
            config: FilterConfig) -> GaussianBelief:
    """One unscented time update: RK4 over config.dt plus additive process noise."""
    n = params.n
    u = np.asarray(u, dtype=float)
    fext_x, fext_y = _resolve_fext(fext, n)
    pts, w_mean, w_cov = sigma_points(belief.mean, belief.cov,
                                      config.alpha, config.beta, config.kappa)
    _clamp_params(pts, n, config)
    dt = config.dt
    k1 = _aug_rhs_batch(params, pts, u, fext_x, fext_y, config.log_params)
    k2 = _aug_rhs_batch(params, pts + 0.5 * dt * k1, u, fext_x, fext_y, config.log_params)
    k3 = _aug_rhs_batch(params, pts + 0.5 * dt * k2, u, fext_x, fext_y, config.log_params)
    k4 = _aug_rhs_batch(params, pts + dt * k3, u, fext_x, fext_y, config.log_params)
    propagated = pts + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    mean, cov = unscented_moments(propagated, w_mean, w_cov)
    cov = cov + np.diag(config.process_noise)
    cov = 0.5 * (cov + cov.T)
    return GaussianBelief(mean=mean, cov=cov)


def update(belief: GaussianBelief, z, u, fext, params: ChainParams,
           config: FilterConfig) -> tuple[GaussianBelief, UpdateInfo]:
    """One unscented measurement update with the stacked 3N IMU vector."""
    n = params.n
    z = np.asarray(z, dtype=float)
    if z.shape != (3 * n,):
        raise ValueError(f"measurement must have shape ({3 * n},)")
    u = np.asarray(u, dtype=float)
    fext_x, fext_y = _resolve_fext(fext, n)
    pts, w_mean, w_cov = sigma_points(belief.mean, belief.cov,
                                      config.alpha, config.beta, config.kappa)
    _clamp_params(pts, n, config)
    z_pts = _measurement_batch(params, pts, u, fext_x, fext_y, config.log_params)
    z_hat = w_mean @ z_pts
    dz = z_pts - z_hat
    s_mat = (w_cov * dz.T) @ dz + np.diag(_expand_r(config, n))
    x_bar = w_mean @ pts
    dx = pts - x_bar
    cross = (w_cov * dx.T) @ dz
    regularized = False
    try:
        gain = np.linalg.solve(s_mat, cross.T).T
    except np.linalg.LinAlgError:
        s_mat = s_mat + (1e-12 * np.trace(s_mat) / s_mat.shape[0]) * np.eye(s_mat.shape[0])
        gain = np.linalg.solve(s_mat, cross.T).T
        regularized = True
    innovation = z - z_hat
    mean = belief.mean + gain @ innovation
    cov = belief.cov - gain @ s_mat @ gain.T
    cov = 0.5 * (cov + cov.T)
    mean = _clamp_params(mean.copy(), n, config)
    posterior = GaussianBelief(mean=mean, cov=cov)
    return posterior, UpdateInfo(innovation=innovation, innovation_cov=s_mat,
                                 regularized=regularized)


@dataclass
class FilterTrace:
    """Per-step belief history with optional truth-referenced diagnostics.

    means/covs are reported in physical coordinates even under log_params.
    """

    times: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    errors: np.ndarray | None = None
    nees: np.ndarray | None = None
    regularized_steps: list = field(default_factory=list)

    @property
    def sigma3(self) -> np.ndarray:
        diags = np.clip(np.einsum("tii->ti", self.covs), 0.0, None)
        return 3.0 * np.sqrt(diags)


def _to_log_belief(belief: GaussianBelief, n: int) -> GaussianBelief:
    mean = belief.mean.copy()
    jac = np.ones(4 * n)
    jac[2 * n:] = 1.0 / mean[2 * n:]
    mean[2 * n:] = np.log(mean[2 * n:])
    cov = belief.cov * np.outer(jac, jac)
    return GaussianBelief(mean=mean, cov=cov)


def _to_physical(mean: np.ndarray, cov: np.ndarray, n: int):
    phys_mean = mean.copy()
    phys_mean[2 * n:] = np.exp(mean[2 * n:])
    jac = np.ones(4 * n)
    jac[2 * n:] = phys_mean[2 * n:]
    return phys_mean, cov * np.outer(jac, jac)


def run_filter(params: ChainParams, config: FilterConfig, times, measurements,
               u_predict, u_update, fext=None, init_belief: GaussianBelief = None,
               truth=None) -> FilterTrace:
    """Run the predict/update cycle over a measurement grid.

    times has T entries; measurements, u_predict, and u_update have T-1 rows
    (one per interval, updates at the interval's right endpoint). init_belief
    is given in physical coordinates. truth, when given as (T, 4N) flattened
    augmented states, enables per-step errors and NEES.
    """
    times = np.asarray(times, dtype=float)
    measurements = np.asarray(measurements, dtype=float)
    n = params.n
    n_steps = times.shape[0] - 1
    if measurements.shape != (n_steps, 3 * n):
        raise ValueError(f"measurements must have shape ({n_steps}, {3 * n})")
    if init_belief is None:
        raise ValueError("init_belief is required")

    if config.param_floor is None and not config.log_params:
        floor = 1e-9 * np.abs(init_belief.mean[2 * n:])
        config = replace(config, param_floor=np.maximum(floor, 1e-300))

    if config.log_params:
        q = config.process_noise.copy()
        q[2 * n:] = q[2 * n:] / init_belief.mean[2 * n:] ** 2
        config = replace(config, process_noise=q)
        belief = _to_log_belief(init_belief, n)
    else:
        mean0 = _clamp_params(init_belief.mean.copy(), n, config)
        belief = GaussianBelief(mean=mean0, cov=init_belief.cov.copy())

    u_predict = np.asarray(u_predict, dtype=float)
    u_update = np.asarray(u_update, dtype=float)
    means = np.empty((n_steps + 1, 4 * n))
    covs = np.empty((n_steps + 1, 4 * n, 4 * n))
    regularized_steps = []

    def record(idx, bel):
        if config.log_params:
            means[idx], covs[idx] = _to_physical(bel.mean, bel.cov, n)
        else:
            means[idx] = bel.mean
            covs[idx] = bel.cov

    record(0, belief)
    for k in range(n_steps):
        belief = predict(belief, u_predict[k], fext, params, config)
        belief, info = update(belief, measurements[k], u_update[k], fext, params, config)
        if info.regularized:
            regularized_steps.append(k + 1)
        record(k + 1, belief)

    errors = nees = None
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        errors = means - truth
        nees = np.empty(n_steps + 1)
        for idx in range(n_steps + 1):
            nees[idx] = errors[idx] @ np.linalg.solve(covs[idx], errors[idx])
    return FilterTrace(times=times, means=means, covs=covs, errors=errors,
                       nees=nees, regularized_steps=regularized_steps)


def nees_chi2_band(dim: int, alpha: float = 0.05, runs: int | None = None):
    """Two-sided chi-square acceptance band for NEES.

    With runs given, returns the tighter band for a NEES average over that
    many independent runs; otherwise the band for a single chi-square draw.
    """
    if runs is None:
        return float(chi2.ppf(alpha / 2, dim)), float(chi2.ppf(1 - alpha / 2, dim))
    return (float(chi2.ppf(alpha / 2, runs * dim) / runs),
            float(chi2.ppf(1 - alpha / 2, runs * dim) / runs))
