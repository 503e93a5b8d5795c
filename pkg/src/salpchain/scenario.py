"""Scenario configuration: chain setup, thrust schedules, noise, and JSON I/O.

A scenario is a single versioned JSON document with sections
(schemaVersion, chain, initialState, thrust, externalForces, noise, sim) plus
an optional filter section for sigma-point tuning. Validation errors carry
the offending field path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chain import ChainParams, ChainState, reconstruct_links, build_coupling

__all__ = [
    "ConfigError",
    "ThrustSchedule",
    "NoiseSpec",
    "FilterTuning",
    "Scenario",
    "external_force_model",
    "register_external_force",
    "default_paper_scenario",
]

SCHEMA_VERSION = 1
_TICK = 1e-9  # schedule times resolve on a 1 ns grid so window edges are exact


class ConfigError(ValueError):
    """Scenario validation failure; message names the offending field."""


def _ticks(t: float) -> int:
    return int(round(t / _TICK))


@dataclass(frozen=True)
class ThrustSchedule:
    """Per-link thrust waveform.

    kind "constant" applies amplitude at all times. kind "squareWave" pulses:
    starting at start_time the wave is active for on_duration, idle for
    off_duration, repeating. Windows are left-open/right-closed, so a wave
    starting at 0.2 s with 0.1 s on-time is active for 0.2 < t <= 0.3; a
    sample taken exactly at a window's start instant still sees the pre-switch
    level. phase_offsets shift each link's wave independently.
    """

    kind: str
    amplitude: np.ndarray
    start_time: float = 0.0
    on_duration: float = 0.0
    off_duration: float = 0.0
    phase_offsets: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "squareWave"):
            raise ConfigError(f"thrust.type: unknown kind {self.kind!r}")
        amp = np.atleast_1d(np.asarray(self.amplitude, dtype=float))
        object.__setattr__(self, "amplitude", amp)
        if self.kind == "squareWave":
            if self.on_duration <= 0.0 or self.off_duration < 0.0:
                raise ConfigError("thrust.onDuration must be > 0 and offDuration >= 0")
        if self.phase_offsets is not None:
            ph = np.asarray(self.phase_offsets, dtype=float)
            if ph.shape != amp.shape:
                raise ConfigError("thrust.phaseOffsets: length must match amplitude")
            object.__setattr__(self, "phase_offsets", ph)

    @property
    def n(self) -> int:
        return self.amplitude.shape[0]

    def u_at(self, t: float) -> np.ndarray:
        if self.kind == "constant":
            return self.amplitude.copy()
        period = _ticks(self.on_duration) + _ticks(self.off_duration)
        on_ticks = _ticks(self.on_duration)
        out = np.zeros(self.n)
        for i in range(self.n):
            phase = self.phase_offsets[i] if self.phase_offsets is not None else 0.0
            s = _ticks(t) - _ticks(self.start_time + phase)
            if s > 0 and (s - 1) % period < on_ticks:
                out[i] = self.amplitude[i]
        return out


# Named external-force builders keyed by config type. Each factory maps the
# config section to a callable (t, ChainState) -> (fx, fy) or None for zero.
_EXTERNAL_FORCES: dict = {}


def register_external_force(name: str, factory):
    _EXTERNAL_FORCES[name] = factory


def _make_linear_drag(section, params: ChainParams):
    try:
        coeff = float(section["coefficient"])
    except KeyError:
        raise ConfigError("externalForces.coefficient: required for linear-drag")
    coupling = build_coupling(params)

    def drag(t, state):
        kin = reconstruct_links(params, coupling, state)
        return -coeff * kin.x_dot, -coeff * kin.y_dot

    return drag


register_external_force("none", lambda section, params: None)
register_external_force("linear-drag", _make_linear_drag)


def external_force_model(section: dict, params: ChainParams):
    kind = section.get("type", "none")
    if kind not in _EXTERNAL_FORCES:
        raise ConfigError(f"externalForces.type: unknown model {kind!r}")
    return _EXTERNAL_FORCES[kind](section, params)


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement, initial-estimate, and filter process noise (std devs)."""

    sigma_acc: float
    sigma_gyro: float
    init_theta: float
    init_theta_dot: float
    init_mass: float
    init_inertia: float
    process_theta: float
    process_theta_dot: float
    process_mass: float
    process_inertia: float

    def init_cov_diag(self, n: int) -> np.ndarray:
        sig = [self.init_theta, self.init_theta_dot, self.init_mass, self.init_inertia]
        return np.concatenate([np.full(n, s * s) for s in sig])

    def process_diag(self, n: int) -> np.ndarray:
        sig = [self.process_theta, self.process_theta_dot,
               self.process_mass, self.process_inertia]
        return np.concatenate([np.full(n, s * s) for s in sig])


@dataclass(frozen=True)
class FilterTuning:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0
    log_params: bool = False


@dataclass(frozen=True)
class Scenario:
    chain: ChainParams
    initial_state: ChainState
    thrust: ThrustSchedule
    noise: NoiseSpec
    duration: float
    imu_rate: float
    integrator_dt: float
    seed: int
    external_forces: dict = field(default_factory=lambda: {"type": "none"})
    filter_tuning: FilterTuning = FilterTuning()

    def __post_init__(self):
        n = self.chain.n
        if self.initial_state.n != n:
            raise ConfigError("initialState.theta: length must match chain size")
        if self.thrust.n != n:
            raise ConfigError("thrust.amplitude: length must match chain size")
        if self.duration <= 0.0:
            raise ConfigError("sim.duration: must be positive")
        if self.imu_rate <= 0.0:
            raise ConfigError("sim.imuRate: must be positive")
        if self.integrator_dt <= 0.0:
            raise ConfigError("sim.integratorDt: must be positive")
        period = 1.0 / self.imu_rate
        substeps = round(period / self.integrator_dt)
        if substeps < 1 or abs(period - substeps * self.integrator_dt) > 1e-12:
            raise ConfigError("sim.integratorDt: must divide the measurement period")

    @property
    def measurement_period(self) -> float:
        return 1.0 / self.imu_rate

    @property
    def n_measurements(self) -> int:
        return int(math.floor(self.duration * self.imu_rate + 1e-9))

    def grid_times(self) -> np.ndarray:
        return np.arange(self.n_measurements + 1) * self.measurement_period


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"{where}.{key}: missing")
    return section[key]


def _float_list(values, where: str) -> list[float]:
    if not isinstance(values, (list, tuple)):
        raise ConfigError(f"{where}: must be a list of numbers")
    out = []
    for i, v in enumerate(values):
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ConfigError(f"{where}[{i}]: must be a number")
        out.append(float(v))
    return out


def _check_positive(values: list[float], where: str):
    for i, v in enumerate(values):
        if not v > 0.0:
            raise ConfigError(f"{where}[{i}]: must be > 0, got {v}")


def _reject_unknown(section: dict, allowed: set, where: str):
    extra = set(section) - allowed
    if extra:
        raise ConfigError(f"{where}.{sorted(extra)[0]}: unknown field")


def scenario_from_dict(doc: dict) -> Scenario:
    """Parse and validate a scenario document."""
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    _reject_unknown(doc, {"schemaVersion", "chain", "initialState", "thrust",
                          "externalForces", "noise", "sim", "filter"}, "config")
    version = _require(doc, "schemaVersion", "config")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config.schemaVersion: expected {SCHEMA_VERSION}, got {version}")

    chain_sec = _require(doc, "chain", "config")
    _reject_unknown(chain_sec, {"halfLengths", "masses", "inertias", "thrusterAngles"},
                    "chain")
    half = _float_list(_require(chain_sec, "halfLengths", "chain"), "chain.halfLengths")
    masses = _float_list(_require(chain_sec, "masses", "chain"), "chain.masses")
    inertias = _float_list(_require(chain_sec, "inertias", "chain"), "chain.inertias")
    psi = _float_list(_require(chain_sec, "thrusterAngles", "chain"), "chain.thrusterAngles")
    n = len(half)
    for name, vals in (("masses", masses), ("inertias", inertias),
                       ("thrusterAngles", psi)):
        if len(vals) != n:
            raise ConfigError(f"chain.{name}: length {len(vals)} != halfLengths length {n}")
    _check_positive(half, "chain.halfLengths")
    _check_positive(masses, "chain.masses")
    _check_positive(inertias, "chain.inertias")
    chain = ChainParams(half, masses, inertias, psi)

    init_sec = _require(doc, "initialState", "config")
    _reject_unknown(init_sec, {"theta", "cm", "thetaDot", "cmDot"}, "initialState")
    theta = _float_list(_require(init_sec, "theta", "initialState"), "initialState.theta")
    if len(theta) != n:
        raise ConfigError(f"initialState.theta: length {len(theta)} != chain size {n}")
    cm = _float_list(init_sec.get("cm", [0.0, 0.0]), "initialState.cm")
    theta_dot = _float_list(init_sec.get("thetaDot", [0.0] * n), "initialState.thetaDot")
    cm_dot = _float_list(init_sec.get("cmDot", [0.0, 0.0]), "initialState.cmDot")
    try:
        initial = ChainState(theta, cm, theta_dot, cm_dot)
    except ValueError as exc:
        raise ConfigError(f"initialState: {exc}") from exc

    thrust_sec = _require(doc, "thrust", "config")
    _reject_unknown(thrust_sec, {"type", "startTime", "onDuration", "offDuration",
                                 "amplitude", "phaseOffsets"}, "thrust")
    kind = _require(thrust_sec, "type", "thrust")
    amp_raw = thrust_sec.get("amplitude", 1.0)
    if isinstance(amp_raw, (int, float)) and not isinstance(amp_raw, bool):
        amplitude = [float(amp_raw)] * n
    else:
        amplitude = _float_list(amp_raw, "thrust.amplitude")
        if len(amplitude) != n:
            raise ConfigError(f"thrust.amplitude: length {len(amplitude)} != chain size {n}")
    phase = thrust_sec.get("phaseOffsets")
    if phase is not None:
        phase = _float_list(phase, "thrust.phaseOffsets")
        if len(phase) != n:
            raise ConfigError(f"thrust.phaseOffsets: length {len(phase)} != chain size {n}")
    try:
        thrust = ThrustSchedule(
            kind=kind,
            amplitude=amplitude,
            start_time=float(thrust_sec.get("startTime", 0.0)),
            on_duration=float(thrust_sec.get("onDuration", 0.0)),
            off_duration=float(thrust_sec.get("offDuration", 0.0)),
            phase_offsets=phase,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"thrust: {exc}") from exc

    ext_sec = doc.get("externalForces", {"type": "none"})
    if not isinstance(ext_sec, dict) or "type" not in ext_sec:
        raise ConfigError("externalForces.type: missing")
    external_force_model(ext_sec, chain)  # validate eagerly

    noise_sec = _require(doc, "noise", "config")
    _reject_unknown(noise_sec, {"sigmaAcc", "sigmaGyro", "initSigma", "processSigma"},
                    "noise")
    init_sig = _require(noise_sec, "initSigma", "noise")
    proc_sig = _require(noise_sec, "processSigma", "noise")
    for where, sec in (("noise.initSigma", init_sig), ("noise.processSigma", proc_sig)):
        _reject_unknown(sec, {"theta", "thetaDot", "mass", "inertia"}, where)
        for key in ("theta", "thetaDot", "mass", "inertia"):
            val = _require(sec, key, where)
            if not isinstance(val, (int, float)) or isinstance(val, bool) or val < 0:
                raise ConfigError(f"{where}.{key}: must be a nonnegative number")
    noise = NoiseSpec(
        sigma_acc=float(_require(noise_sec, "sigmaAcc", "noise")),
        sigma_gyro=float(_require(noise_sec, "sigmaGyro", "noise")),
        init_theta=float(init_sig["theta"]),
        init_theta_dot=float(init_sig["thetaDot"]),
        init_mass=float(init_sig["mass"]),
        init_inertia=float(init_sig["inertia"]),
        process_theta=float(proc_sig["theta"]),
        process_theta_dot=float(proc_sig["thetaDot"]),
        process_mass=float(proc_sig["mass"]),
        process_inertia=float(proc_sig["inertia"]),
    )
    if noise.sigma_acc < 0 or noise.sigma_gyro < 0:
        raise ConfigError("noise.sigmaAcc/sigmaGyro: must be nonnegative")

    sim_sec = _require(doc, "sim", "config")
    _reject_unknown(sim_sec, {"duration", "imuRate", "integratorDt", "seed"}, "sim")
    seed = sim_sec.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("sim.seed: must be an integer")

    filt_sec = doc.get("filter", {})
    _reject_unknown(filt_sec, {"alpha", "beta", "kappa", "logParams"}, "filter")
    tuning = FilterTuning(
        alpha=float(filt_sec.get("alpha", 1e-3)),
        beta=float(filt_sec.get("beta", 2.0)),
        kappa=float(filt_sec.get("kappa", 0.0)),
        log_params=bool(filt_sec.get("logParams", False)),
    )

    return Scenario(
        chain=chain,
        initial_state=initial,
        thrust=thrust,
        noise=noise,
        duration=float(_require(sim_sec, "duration", "sim")),
        imu_rate=float(_require(sim_sec, "imuRate", "sim")),
        integrator_dt=float(_require(sim_sec, "integratorDt", "sim")),
        seed=seed,
        external_forces=dict(ext_sec),
        filter_tuning=tuning,
    )


def scenario_to_dict(scenario: Scenario) -> dict:
    """Inverse of scenario_from_dict; round-trips through JSON."""
    thrust: dict = {"type": scenario.thrust.kind,
                    "amplitude": list(scenario.thrust.amplitude)}
    if scenario.thrust.kind == "squareWave":
        thrust["startTime"] = scenario.thrust.start_time
        thrust["onDuration"] = scenario.thrust.on_duration
        thrust["offDuration"] = scenario.thrust.off_duration
    if scenario.thrust.phase_offsets is not None:
        thrust["phaseOffsets"] = list(scenario.thrust.phase_offsets)
    doc = {
        "schemaVersion": SCHEMA_VERSION,
        "chain": {
            "halfLengths": list(scenario.chain.half_lengths),
            "masses": list(scenario.chain.masses),
            "inertias": list(scenario.chain.inertias),
            "thrusterAngles": list(scenario.chain.thruster_angles),
        },
        "initialState": {
            "theta": list(scenario.initial_state.theta),
            "cm": list(scenario.initial_state.cm),
            "thetaDot": list(scenario.initial_state.theta_dot),
            "cmDot": list(scenario.initial_state.cm_dot),
        },
        "thrust": thrust,
        "externalForces": dict(scenario.external_forces),
        "noise": {
            "sigmaAcc": scenario.noise.sigma_acc,
            "sigmaGyro": scenario.noise.sigma_gyro,
            "initSigma": {
                "theta": scenario.noise.init_theta,
                "thetaDot": scenario.noise.init_theta_dot,
                "mass": scenario.noise.init_mass,
                "inertia": scenario.noise.init_inertia,
            },
            "processSigma": {
                "theta": scenario.noise.process_theta,
                "thetaDot": scenario.noise.process_theta_dot,
                "mass": scenario.noise.process_mass,
                "inertia": scenario.noise.process_inertia,
            },
        },
        "sim": {
            "duration": scenario.duration,
            "imuRate": scenario.imu_rate,
            "integratorDt": scenario.integrator_dt,
            "seed": scenario.seed,
        },
    }
    tuning = scenario.filter_tuning
    if tuning != FilterTuning():
        doc["filter"] = {"alpha": tuning.alpha, "beta": tuning.beta,
                         "kappa": tuning.kappa, "logParams": tuning.log_params}
    return doc


def default_paper_scenario(seed: int = 12345) -> Scenario:
    """Three equal links at rest, pulsed thrusters, 1 s at 100 Hz.

    Half-lengths 0.125 m, masses 0.5 kg, inertias 2.6e-3 kg m^2 (slender rod
    about an end), thruster angles (pi/4, 2pi/3, -pi/2). Square wave starts at
    0.2 s, 0.1 s on, 0.2 s off, amplitude 1.0 N on every link. The amplitude
    is a configurable default; it is not pinned by any reference data.
    """
    n = 3
    chain = ChainParams(
        half_lengths=[0.125] * n,
        masses=[0.5] * n,
        inertias=[2.6e-3] * n,
        thruster_angles=[math.pi / 4, 2 * math.pi / 3, -math.pi / 2],
    )
    return Scenario(
        chain=chain,
        initial_state=ChainState.at_rest(np.zeros(n)),
        thrust=ThrustSchedule(kind="squareWave", amplitude=np.full(n, 1.0),
                              start_time=0.2, on_duration=0.1, off_duration=0.2),
        noise=NoiseSpec(
            sigma_acc=1.0e-2, sigma_gyro=1.0e-3,
            init_theta=0.1, init_theta_dot=5.0e-3,
            init_mass=0.1, init_inertia=1.0e-4,
            process_theta=5.0e-3, process_theta_dot=1.0e-3,
            process_mass=1.0e-2, process_inertia=7.0e-6,
        ),
        duration=1.0,
        imu_rate=100.0,
        integrator_dt=1.0e-3,
        seed=seed,
    )
