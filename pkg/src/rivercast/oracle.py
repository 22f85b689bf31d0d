"""Physics routing simulator used to generate training targets.

Continuity is integrated per reach with a local-inertial momentum update for
the outflow (inertia and bed-slope friction, no advection) on a rectangular
channel. The daily interface is sub-stepped internally.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .network import adjacency_normalized

log = logging.getLogger(__name__)

GRAVITY = 9.81
DEPTH_FLOOR = 1.0e-6
SUBSTEPS = 24
VARIABLES = ("discharge", "depth", "storage")


@dataclass(frozen=True)
class OraclePhysics:
    gravity: float = GRAVITY
    manning_scale: float = 1.0
    runoff_bias: float = 1.0

    def __post_init__(self):
        if not self.manning_scale > 0:
            raise ValueError(f"manning_scale must be > 0, got {self.manning_scale}")
        if not self.runoff_bias > 0:
            raise ValueError(f"runoff_bias must be > 0, got {self.runoff_bias}")


@dataclass(frozen=True)
class ForcingSeries:
    """Lateral runoff in m^3/s, shape (n_reaches, n_steps)."""

    runoff: np.ndarray
    dt: float = 86400.0

    def __post_init__(self):
        r = np.array(self.runoff, dtype=np.float64)
        if r.ndim != 2:
            raise ValueError(f"runoff must be 2-D (reaches, steps), got shape {r.shape}")
        if np.any(r < 0):
            raise ValueError("runoff must be non-negative")
        r.setflags(write=False)
        object.__setattr__(self, "runoff", r)

    @property
    def n_reaches(self):
        return self.runoff.shape[0]

    @property
    def n_steps(self):
        return self.runoff.shape[1]

    def slice(self, start, stop):
        return ForcingSeries(self.runoff[:, start:stop], self.dt)


@dataclass(frozen=True)
class HydroState:
    storage: np.ndarray
    discharge: np.ndarray


@dataclass(frozen=True)
class HydroSeries:
    """Discharge (m^3/s), depth (m) and storage (m^3), each (n_reaches, n_steps)."""

    discharge: np.ndarray
    depth: np.ndarray
    storage: np.ndarray
    warnings: tuple = field(default=(), compare=False, repr=False)

    @property
    def n_reaches(self):
        return self.discharge.shape[0]

    @property
    def n_steps(self):
        return self.discharge.shape[1]

    def stacked(self):
        """Array of shape (n_reaches, n_steps, 3) in ``VARIABLES`` order."""
        return np.stack([self.discharge, self.depth, self.storage], axis=-1)

    @classmethod
    def from_stacked(cls, arr):
        return cls(arr[..., 0].copy(), arr[..., 1].copy(), arr[..., 2].copy())

    def slice(self, start, stop):
        return HydroSeries(self.discharge[:, start:stop], self.depth[:, start:stop],
                           self.storage[:, start:stop])

    def final_state(self, outflow=None):
        q = self.discharge[:, -1] if outflow is None else outflow
        return HydroState(self.storage[:, -1].copy(), np.array(q, dtype=np.float64))


@dataclass(frozen=True)
class RunoffRegime:
    """Knobs of the synthetic runoff generator (depths in metres per day)."""

    base_depth: float
    seasonal_amp: float
    storm_depth: float
    storm_threshold: float
    persistence: float
    spatial_smoothing: int
    local_share: float
    base_offset: float = 0.0


REGIMES = {
    "humid": RunoffRegime(base_depth=1.5e-3, seasonal_amp=0.5, storm_depth=6.0e-3,
                          storm_threshold=0.3, persistence=0.8, spatial_smoothing=3,
                          local_share=0.6),
    "seasonal": RunoffRegime(base_depth=1.2e-3, seasonal_amp=0.95, storm_depth=6.0e-3,
                             storm_threshold=0.6, persistence=0.75, spatial_smoothing=3,
                             local_share=0.6),
    "arid": RunoffRegime(base_depth=4.0e-4, seasonal_amp=1.0, storm_depth=4.0e-3,
                         storm_threshold=1.2, persistence=0.6, spatial_smoothing=2,
                         local_share=0.6, base_offset=-0.7),
}


def synthesize_runoff(graph, feats, n_steps, seed=0, regime="humid", dt=86400.0):
    """Synthetic lateral runoff for every reach.

    A sinusoidal seasonal base (period 365 steps) is combined with storm
    pulses drawn from a lag-1 autoregressive latent field. The latent
    innovations mix a basin-wide shock, a shock smoothed along the river
    network and an independent local shock, so neighbouring reaches are
    correlated without being identical. Depth rates are converted to m^3/s
    through each reach's ``ctarea``.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {sorted(REGIMES)}")
    p = REGIMES[regime]
    rng = np.random.default_rng(seed)
    n = graph.n_reaches

    smooth = adjacency_normalized(graph, sparse_format=True)
    smooth = 0.5 * (smooth + smooth.T)
    phase = rng.uniform(0.0, 365.0)
    t = np.arange(n_steps)
    season = np.sin(2.0 * math.pi * (t + phase) / 365.0)

    latent = np.empty((n, n_steps))
    x = rng.standard_normal(n)
    rho = p.persistence
    scale = math.sqrt(1.0 - rho * rho)
    for k in range(n_steps):
        field_ = rng.standard_normal(n)
        for _ in range(p.spatial_smoothing):
            field_ = smooth @ field_
        field_ /= max(math.sqrt(float(np.mean(field_ * field_))), 1e-12)
        shock = (math.sqrt(1.0 - p.local_share) * (0.5 * rng.standard_normal() + 0.866 * field_)
                 + math.sqrt(p.local_share) * rng.standard_normal(n))
        x = rho * x + scale * shock
        latent[:, k] = x

    storms = np.maximum(latent - p.storm_threshold, 0.0) ** 2
    base = np.maximum(1.0 + p.seasonal_amp * season + p.base_offset, 0.0)
    depth_rate = p.base_depth * base[None, :] + p.storm_depth * storms * (0.5 + 0.5 * (season[None, :] + 1.0))
    runoff = depth_rate * feats.ctarea[:, None] / 86400.0
    return ForcingSeries(runoff, dt)


@numba.njit(cache=True)
def _route_kernel(order, down, rivlen, width, slope, nman, runoff, dt, substeps, gravity,
                  storage0, discharge0, linear):
    n, n_steps = runoff.shape
    q_out = np.zeros((n, n_steps))
    h_out = np.zeros((n, n_steps))
    s_out = np.zeros((n, n_steps))
    S = storage0.copy()
    Q = discharge0.copy()
    inflow = np.zeros(n)
    dts = dt / substeps
    n_cfl = 0
    cfl_first_step = -1
    cfl_first_reach = -1
    for t in range(n_steps):
        q_acc = np.zeros(n)
        for _ in range(substeps):
            inflow[:] = 0.0
            for k in range(n):
                r = order[k]
                avail = S[r] + dts * (inflow[r] + runoff[r, t])
                q = Q[r]
                if q < 0.0:
                    q = 0.0
                if q * dts >= avail:
                    q = avail / dts
                    S[r] = 0.0
                else:
                    S[r] = avail - dts * q
                Q[r] = q
                q_acc[r] += q
                d = down[r]
                if d >= 0:
                    inflow[d] += q
            for r in range(n):
                area_plan = rivlen[r] * width[r]
                h = S[r] / area_plan
                if linear:
                    # Linear reservoir: residence time of the reach at 1 m/s.
                    Q[r] = S[r] / (rivlen[r] / 1.0)
                    continue
                hf = h if h > DEPTH_FLOOR else DEPTH_FLOOR
                A = width[r] * hf
                # Friction uses the new flux: qn * (1 + c*qn) = q + g*A*dt*S, solved
                # in closed form. The old-flux form oscillates once dt >> friction time.
                num = Q[r] + gravity * A * dts * slope[r]
                c = gravity * dts * nman[r] * nman[r] / (hf ** (4.0 / 3.0) * A)
                qn = 2.0 * num / (1.0 + math.sqrt(1.0 + 4.0 * c * num))
                vmax = rivlen[r] / dts
                if qn > vmax * A:
                    qn = vmax * A
                    n_cfl += 1
                    if cfl_first_step < 0:
                        cfl_first_step = t
                        cfl_first_reach = r
                Q[r] = qn
        for r in range(n):
            q_out[r, t] = q_acc[r] / substeps
            s_out[r, t] = S[r]
            h_out[r, t] = S[r] / (rivlen[r] * width[r])
    return q_out, h_out, s_out, Q, n_cfl, cfl_first_step, cfl_first_reach




def _check_finite(name, arr):
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        idx = tuple(int(v) for v in bad[0])
        where = f"reach {idx[0]}" + (f", step {idx[1]}" if len(idx) > 1 else "")
        raise ValueError(f"non-finite {name} at {where}")


def route(graph, feats, forcing, physics=None, init=None, scheme="local_inertial",
          substeps=SUBSTEPS, return_state=False):
    """Route lateral runoff through the network.

    Parameters
    ----------
    graph, feats : RiverGraph, StaticFeatureTable
    forcing : ForcingSeries
    physics : OraclePhysics, optional
    init : HydroState, optional
        Storage and outflow at t = 0; zeros when omitted.
    scheme : {"local_inertial", "linear_reservoir"}
        The linear reservoir has a closed-form steady state and is meant for
        debugging.
    return_state : bool
        Also return the final :class:`HydroState` (instantaneous outflow), for
        chaining runs.

    Returns
    -------
    HydroSeries
        Daily values: end-of-step storage and depth, and step-mean outflow so
        that storage changes balance the reported discharges exactly.
    """
    physics = physics or OraclePhysics()
    if forcing.n_reaches != graph.n_reaches:
        raise ValueError(f"forcing has {forcing.n_reaches} reaches, graph has {graph.n_reaches}")
    if not forcing.dt > 0:
        raise ValueError(f"dt must be > 0, got {forcing.dt}")
    if scheme not in ("local_inertial", "linear_reservoir"):
        raise ValueError(f"unknown scheme {scheme!r}")
    _check_finite("runoff", forcing.runoff)
    n = graph.n_reaches
    if init is None:
        s0 = np.zeros(n)
        q0 = np.zeros(n)
    else:
        s0 = np.asarray(init.storage, dtype=np.float64)
        q0 = np.asarray(init.discharge, dtype=np.float64)
        _check_finite("initial storage", s0[:, None])
        _check_finite("initial discharge", q0[:, None])
        if np.any(s0 < 0):
            raise ValueError("initial storage must be non-negative")
    runoff = np.ascontiguousarray(forcing.runoff * physics.runoff_bias)
    nman = feats.manning_n * physics.manning_scale
    q, h, s, q_last, n_cfl, t_cfl, r_cfl = _route_kernel(
        graph.topo_order.astype(np.int64), graph.downstream.astype(np.int64),
        feats.rivlen.copy(), feats.width.copy(), feats.slope.copy(), nman.astype(np.float64),
        runoff, float(forcing.dt), int(substeps), float(physics.gravity), s0.copy(), q0.copy(),
        scheme == "linear_reservoir",
    )
    notes = ()
    if n_cfl:
        msg = (f"{n_cfl} sub-steps exceeded one reach length per sub-step; flux clamped "
               f"(first at step {t_cfl}, reach {r_cfl})")
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes = ({"kind": "cfl", "count": int(n_cfl), "step": int(t_cfl), "reach": int(r_cfl)},)
    for name, arr in (("discharge", q), ("depth", h), ("storage", s)):
        _check_finite(name, arr)
    series = HydroSeries(q, h, s, notes)
    if return_state:
        return series, HydroState(s[:, -1].copy(), q_last)
    return series


def make_observations(truth_physics, obs_physics, graph, feats, forcing, init=None, **kwargs):
    """Route with perturbed physics to emulate in-situ discharge observations."""
    if truth_physics == obs_physics:
        log.warning("observation physics equals truth physics; observations are unperturbed")
    return route(graph, feats, forcing, obs_physics, init=init, **kwargs)


def spin_up_state(graph, feats, forcing, physics=None, cycles=1, **kwargs):
    """Run the forcing ``cycles`` times and return the final state, for warm starts."""
    state = None
    for _ in range(cycles):
        _, state = route(graph, feats, forcing, physics, init=state, return_state=True, **kwargs)
    return state


def mass_balance_residual(graph, forcing, series, physics=None, init_storage=None):
    """Per-step ``sum(dS) - dt * (sum(runoff_in) - sum(outlet discharge))``.

    Returns
    -------
    (residual, lateral) : numpy.ndarray, numpy.ndarray
        Both of length ``n_steps``; ``lateral`` is ``dt * sum(runoff_in)``.
    """
    physics = physics or OraclePhysics()
    s = series.storage
    s_prev = np.concatenate([
        np.zeros((s.shape[0], 1)) if init_storage is None else np.asarray(init_storage)[:, None],
        s[:, :-1]], axis=1)
    d_total = (s - s_prev).sum(axis=0)
    lateral = forcing.dt * (physics.runoff_bias * forcing.runoff).sum(axis=0)
    outlet = forcing.dt * series.discharge[graph.outlets].sum(axis=0)
    return d_total - (lateral - outlet), lateral


# -- binary series files -----------------------------------------------------

def write_series(path, array, dtype="float32"):
    """Write a C-ordered array as little-endian floats."""
    dt = np.dtype(dtype).newbyteorder("<")
    Path(path).write_bytes(np.ascontiguousarray(array, dtype=dt).tobytes())


def read_series(path, shape, dtype="float32"):
    dt = np.dtype(dtype).newbyteorder("<")
    raw = Path(path).read_bytes()
    expected = int(np.prod(shape)) * dt.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for shape {tuple(shape)} "
                         f"({dt.name}), found {len(raw)}")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.float64)


def write_manifest(path, variables, n_reaches, n_steps, dtype, dt_seconds, **extra):
    manifest = {
        "variables": list(variables),
        "n_reaches": int(n_reaches),
        "n_steps": int(n_steps),
        "dtype": str(dtype),
        "layout": "variable,reach,step",
        "dt_seconds": float(dt_seconds),
    }
    manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
