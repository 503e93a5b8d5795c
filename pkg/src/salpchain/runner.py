"""Scenario orchestration: truth simulation, measurement synthesis, filtering,
observability monitoring, and CSV/JSON trace emission.

All artifacts live on the measurement grid (floor(duration * rate) + 1 rows
including t = 0). Row 0 carries the initial truth state and initial belief;
its measurement cells are empty. Per-run RNG streams derive from the master
seed as seed XOR run_index; within a stream the measurement noise is drawn
first (step order), then the initial-estimate perturbation, so `simulate`
output matches run 0 of `estimate` for the same seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chain import ChainState, build_coupling, integrate, link_polyline
from .imu import ImuNoise, measure_all
from .observability import AugmentedState, observability_sweep
from .scenario import Scenario, external_force_model, scenario_to_dict
from .ukf import FilterConfig, FilterTrace, GaussianBelief, nees_chi2_band, run_filter

__all__ = [
    "RunArtifacts",
    "run_scenario",
    "trace_columns",
    "build_table",
    "nees_table",
    "emit",
    "load_table_json",
    "load_table_csv",
    "snapshot_polylines",
]


@dataclass
class RunArtifacts:
    """Aligned time-indexed outputs of one scenario execution."""

    scenario: Scenario
    times: np.ndarray
    truth_states: np.ndarray
    measurements: list[np.ndarray]
    filter_traces: list[FilterTrace]
    cond1: np.ndarray
    cond2: np.ndarray
    rank: np.ndarray
    observable: np.ndarray
    nees_avg: np.ndarray | None

    @property
    def runs(self) -> int:
        return len(self.measurements)


def _derived_rng(seed: int, run: int) -> np.random.Generator:
    return np.random.default_rng(seed ^ run)


def _truth_on_grid(scenario: Scenario) -> np.ndarray:
    params = scenario.chain
    fext = external_force_model(scenario.external_forces, params)
    times = scenario.grid_times()
    states = np.empty((times.shape[0], 2 * params.n + 4))
    state = scenario.initial_state
    states[0] = state.flatten()
    for k in range(times.shape[0] - 1):
        traj = integrate(params, state, scenario.thrust.u_at, fext,
                         times[k], times[k + 1], scenario.integrator_dt)
        state = ChainState.from_flat(traj.states[-1], params.n)
        states[k + 1] = traj.states[-1]
    return states


def run_scenario(scenario: Scenario, runs: int = 1, with_filter: bool = True,
                 seed: int | None = None) -> RunArtifacts:
    """Simulate truth, synthesize measurements, and (optionally) estimate.

    Fully deterministic for a given (scenario, seed, runs). The estimator
    always assumes zero external forces, mirroring its measurement model;
    configured external forces act on the truth and observability traces only.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    params = scenario.chain
    n = params.n
    master_seed = scenario.seed if seed is None else seed
    coupling = build_coupling(params)
    times = scenario.grid_times()
    n_meas = times.shape[0] - 1
    truth_states = _truth_on_grid(scenario)

    fext = external_force_model(scenario.external_forces, params)
    cond1, cond2, rank, observable = observability_sweep(
        params, times, truth_states, scenario.thrust.u_at, fext)

    noise = ImuNoise(sigma_acc=scenario.noise.sigma_acc,
                     sigma_gyro=scenario.noise.sigma_gyro)
    u_update = np.stack([scenario.thrust.u_at(times[k + 1]) for k in range(n_meas)])
    u_predict = np.stack([
        scenario.thrust.u_at(times[k] + 0.5 * scenario.measurement_period)
        for k in range(n_meas)
    ])

    truth_aug = np.empty((n_meas + 1, 4 * n))
    for k in range(n_meas + 1):
        state = ChainState.from_flat(truth_states[k], n)
        truth_aug[k] = AugmentedState.from_chain(state, params).flatten()

    p0 = np.diag(scenario.noise.init_cov_diag(n))
    p0_root = np.linalg.cholesky(p0) if np.any(p0) else np.zeros_like(p0)
    config = FilterConfig(
        process_noise=scenario.noise.process_diag(n),
        meas_noise=np.array([scenario.noise.sigma_acc**2,
                             scenario.noise.sigma_acc**2,
                             scenario.noise.sigma_gyro**2]),
        dt=scenario.measurement_period,
        alpha=scenario.filter_tuning.alpha,
        beta=scenario.filter_tuning.beta,
        kappa=scenario.filter_tuning.kappa,
        log_params=scenario.filter_tuning.log_params,
    )

    measurements: list[np.ndarray] = []
    traces: list[FilterTrace] = []
    for run in range(runs):
        rng = _derived_rng(master_seed, run)
        z = np.empty((n_meas, 3 * n))
        for k in range(n_meas):
            state = ChainState.from_flat(truth_states[k + 1], n)
            fe = fext(times[k + 1], state) if fext is not None else None
            z[k] = measure_all(params, coupling, state, u_update[k], fe,
                               noise=noise, rng=rng)
        measurements.append(z)
        if with_filter:
            init_mean = truth_aug[0] + p0_root @ rng.standard_normal(4 * n)
            init_mean[2 * n:] = np.maximum(init_mean[2 * n:],
                                           1e-9 * truth_aug[0][2 * n:])
            belief = GaussianBelief(mean=init_mean, cov=p0.copy())
            traces.append(run_filter(params, config, times, z, u_predict,
                                     u_update, fext=None, init_belief=belief,
                                     truth=truth_aug))

    nees_avg = None
    if traces:
        nees_avg = np.mean(np.stack([t.nees for t in traces]), axis=0)
    return RunArtifacts(scenario=scenario, times=times, truth_states=truth_states,
                        measurements=measurements, filter_traces=traces,
                        cond1=cond1, cond2=cond2, rank=rank,
                        observable=observable, nees_avg=nees_avg)


def trace_columns(n: int) -> list[str]:
    """Documented trace schema for an N-link chain (stable column order)."""
    links = range(1, n + 1)
    cols = ["time"]
    cols += [f"theta_{i}" for i in links]
    cols += [f"theta_dot_{i}" for i in links]
    cols += ["p_x", "p_y", "p_dot_x", "p_dot_y"]
    cols += [f"acc_x_{i}" for i in links]
    cols += [f"acc_y_{i}" for i in links]
    cols += [f"gyro_{i}" for i in links]
    for block in ("est_theta", "est_theta_dot", "est_mass", "est_inertia"):
        cols += [f"{block}_{i}" for i in links]
    for block in ("sig3_theta", "sig3_theta_dot", "sig3_mass", "sig3_inertia"):
        cols += [f"{block}_{i}" for i in links]
    cols += [f"cond1_{i}" for i in links]
    cols += [f"cond2_{i}" for i in links]
    cols.append("rank")
    return cols


def build_table(artifacts: RunArtifacts, run: int = 0):
    """Combined per-run table (header, rows); None marks empty cells."""
    n = artifacts.scenario.chain.n
    header = trace_columns(n)
    z = artifacts.measurements[run]
    trace = artifacts.filter_traces[run] if artifacts.filter_traces else None
    sig3 = trace.sigma3 if trace is not None else None
    rows = []
    for k, t in enumerate(artifacts.times):
        state = artifacts.truth_states[k]
        row: list = [float(t)]
        row += [float(v) for v in state[:n]]                 # theta
        row += [float(v) for v in state[n + 2:2 * n + 2]]    # theta_dot
        row += [float(v) for v in state[n:n + 2]]            # p
        row += [float(v) for v in state[2 * n + 2:]]         # p_dot
        if k == 0:
            row += [None] * (3 * n)
        else:
            row += [float(v) for v in z[k - 1]]
        if trace is None:
            row += [None] * (8 * n)
        else:
            row += [float(v) for v in trace.means[k]]
            row += [float(v) for v in sig3[k]]
        row += [float(v) for v in artifacts.cond1[k]]
        row += [float(v) for v in artifacts.cond2[k]]
        row.append(int(artifacts.rank[k]))
        rows.append(row)
    return header, rows


def nees_table(artifacts: RunArtifacts):
    """Aggregate NEES trace with single-draw and run-averaged chi-square bands."""
    if artifacts.nees_avg is None:
        raise ValueError("no filter traces; run with with_filter=True")
    dim = 4 * artifacts.scenario.chain.n
    lo_dim, hi_dim = nees_chi2_band(dim)
    lo_avg, hi_avg = nees_chi2_band(dim, runs=artifacts.runs)
    header = ["time", "nees_avg", "band_lo_dim", "band_hi_dim",
              "band_lo_runs", "band_hi_runs"]
    rows = [[float(t), float(v), lo_dim, hi_dim, lo_avg, hi_avg]
            for t, v in zip(artifacts.times, artifacts.nees_avg)]
    return header, rows


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return format(value, ".17g")


def _write_csv(path: Path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n", newline="\n")


def _write_json(path: Path, header, rows):
    doc = {"schemaVersion": 1, "columns": header, "rows": rows}
    path.write_text(json.dumps(doc, indent=1) + "\n", newline="\n")


def _write_table(base: Path, header, rows, fmt: str) -> list[Path]:
    written = []
    if fmt in ("csv", "both"):
        target = base.with_suffix(".csv")
        _write_csv(target, header, rows)
        written.append(target)
    if fmt in ("json", "both"):
        target = base.with_suffix(".json")
        _write_json(target, header, rows)
        written.append(target)
    return written


def emit(artifacts: RunArtifacts, fmt: str = "both", out_dir="out") -> list[Path]:
    """Write trace tables (and the NEES aggregate when the filter ran).

    Floats are written with 17 significant digits in CSV; JSON uses the
    shortest round-trip representation. Returns the written paths.
    """
    if fmt not in ("csv", "json", "both"):
        raise ValueError(f"unknown format {fmt!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []
        if artifacts.filter_traces:
            for run in range(artifacts.runs):
                header, rows = build_table(artifacts, run)
                written += _write_table(out / f"run_{run:03d}", header, rows, fmt)
            header, rows = nees_table(artifacts)
            written += _write_table(out / "nees", header, rows, fmt)
        else:
            header, rows = build_table(artifacts, 0)
            written += _write_table(out / "trace", header, rows, fmt)
        return written
    except OSError as exc:
        raise RuntimeError(f"cannot write artifacts under {out}: {exc}") from exc


def load_table_json(path):
    """Parse an emitted JSON table back into (columns, rows)."""
    doc = json.loads(Path(path).read_text())
    return doc["columns"], doc["rows"]


def load_table_csv(path):
    """Parse an emitted CSV table; empty cells map to None."""
    text = Path(path).read_text().rstrip("\n")
    lines = text.split("\n")
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        row = []
        for name, cell in zip(header, line.split(",")):
            if cell == "":
                row.append(None)
            elif name == "rank":
                row.append(int(cell))
            else:
                row.append(float(cell))
        rows.append(row)
    return header, rows


def snapshot_polylines(artifacts: RunArtifacts, snapshot_times):
    """Link-endpoint polylines at the grid samples nearest the requested times."""
    params = artifacts.scenario.chain
    coupling = build_coupling(params)
    out = []
    for t in snapshot_times:
        idx = int(np.argmin(np.abs(artifacts.times - t)))
        state = ChainState.from_flat(artifacts.truth_states[idx], params.n)
        out.append((float(artifacts.times[idx]),
                    link_polyline(params, coupling, state)))
    return out
