"""IMU (accelerometer + gyroscope) measurement synthesis for chain links.

An IMU is rigidly mounted on one link at a fixed offset from the link CM,
expressed in the link frame. The accelerometer reports the inertial-frame
components of the mount point's acceleration by default; the planar model has
no gravity term and no sensor biases. The gyro reports the link's angular
rate exactly (before noise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import ChainParams, ChainState, CouplingMatrices, dynamics_rhs, net_forces

__all__ = ["ImuMount", "ImuReading", "ImuNoise", "imu_true", "imu_noisy", "measure_all"]

_ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class ImuMount:
    """Rigid mounting of an IMU on a link.

    link:   1-based link index
    offset: mount position relative to the link CM, link-frame coordinates (m)
    """

    link: int
    offset: np.ndarray = (0.0, 0.0)

    def __post_init__(self):
        offset = np.asarray(self.offset, dtype=float)
        if offset.shape != (2,) or not np.all(np.isfinite(offset)):
            raise ValueError("offset must be a finite 2-vector")
        object.__setattr__(self, "offset", offset)


@dataclass(frozen=True)
class ImuReading:
    """One accelerometer (2-axis) plus gyroscope sample."""

    accel: np.ndarray
    gyro: float

    def __post_init__(self):
        accel = np.asarray(self.accel, dtype=float)
        if accel.shape != (2,):
            raise ValueError("accel must be a 2-vector")
        object.__setattr__(self, "accel", accel)
        object.__setattr__(self, "gyro", float(self.gyro))


@dataclass(frozen=True)
class ImuNoise:
    """Independent zero-mean Gaussian channel noise (standard deviations)."""

    sigma_acc: float = 0.0
    sigma_gyro: float = 0.0

    def __post_init__(self):
        if self.sigma_acc < 0.0 or self.sigma_gyro < 0.0:
            raise ValueError("noise sigmas must be nonnegative")


def imu_true(params: ChainParams, coupling: CouplingMatrices, state: ChainState,
             u, fext, mount: ImuMount, body_frame: bool = False) -> ImuReading:
    """Noise-free IMU reading on the mounted link.

    At the link CM (offset zero) the accelerometer reads exactly the net
    per-link force over the link mass. A nonzero mount offset adds the
    centripetal and tangential terms of the rotating mount point; the angular
    acceleration is evaluated from the dynamics, not differenced numerically.
    Set body_frame=True to rotate the accelerometer output into the link frame.
    """
    n = params.n
    if not 1 <= mount.link <= n:
        raise IndexError(f"mount.link must be in 1..{n}, got {mount.link}")
    i = mount.link - 1
    fx, fy = net_forces(params, state.theta, u, fext)
    accel = np.array([fx[i], fy[i]]) / params.masses[i]
    if np.any(mount.offset):
        deriv = dynamics_rhs(params, coupling, state, u, fext)
        theta_ddot_i = deriv[n + 2 + i]
        th = state.theta[i]
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        r_inertial = rot @ mount.offset
        accel = accel - state.theta_dot[i] ** 2 * r_inertial \
            + theta_ddot_i * (_ROT90 @ r_inertial)
    if body_frame:
        th = state.theta[i]
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        accel = rot.T @ accel
    return ImuReading(accel=accel, gyro=state.theta_dot[i])


def imu_noisy(reading: ImuReading, noise: ImuNoise, rng: np.random.Generator) -> ImuReading:
    """Add per-channel Gaussian noise; draws 3 samples even when sigmas are zero."""
    draws = rng.standard_normal(3)
    accel = reading.accel + noise.sigma_acc * draws[:2]
    return ImuReading(accel=accel, gyro=reading.gyro + noise.sigma_gyro * draws[2])


def measure_all(params: ChainParams, coupling: CouplingMatrices, state: ChainState,
                u, fext=None, mounts=None, noise: ImuNoise | None = None,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Stacked measurement for one IMU per link: (accel_x[N], accel_y[N], gyro[N]).

    mounts defaults to CM-mounted IMUs (offset zero) on links 1..N. When noise
    is given, channels are perturbed link by link from the supplied rng stream.
    """
    n = params.n
    if mounts is None:
        mounts = [ImuMount(link=i + 1) for i in range(n)]
    if len(mounts) != n:
        raise ValueError(f"expected one mount per link ({n}), got {len(mounts)}")
    readings = [imu_true(params, coupling, state, u, fext, mount) for mount in mounts]
    if noise is not None:
        if rng is None:
            raise ValueError("rng is required when noise is given")
        readings = [imu_noisy(r, noise, rng) for r in readings]
    out = np.empty(3 * n)
    for i, r in enumerate(readings):
        out[i] = r.accel[0]
        out[n + i] = r.accel[1]
        out[2 * n + i] = r.gyro
    return out
