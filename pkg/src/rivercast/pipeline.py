"""Normalisation, temporal splits, sliding windows and dataset files."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import StaticFeatureTable, load_graph, save_graph
from .oracle import VARIABLES, ForcingSeries, HydroSeries, read_series, write_manifest, write_series

log = logging.getLogger(__name__)

DYNAMIC = VARIABLES + ("runoff",)
SIGMA_FLOOR_REL = 1e-6


def _floor(sigma, mu):
    return np.maximum(sigma, SIGMA_FLOOR_REL * (np.abs(mu) + 1.0))


@dataclass(frozen=True)
class NormStats:
    """Reach-wise statistics for dynamic variables, global ones for statics.

    ``mu_dyn`` and ``sd_dyn`` have shape (N, 4) in ``DYNAMIC`` order;
    ``mu_static`` and ``sd_static`` have one entry per static column.
    """

    mu_dyn: np.ndarray
    sd_dyn: np.ndarray
    mu_static: np.ndarray
    sd_static: np.ndarray
    static_names: tuple = ()

    @property
    def n_reaches(self):
        return self.mu_dyn.shape[0]

    def normalize_states(self, y):
        """(..., N, T, 3) physical -> normalised."""
        mu, sd = self._state_stats(y)
        return (y - mu) / sd

    def denormalize_states(self, y):
        mu, sd = self._state_stats(y)
        return y * sd + mu

    def _state_stats(self, y):
        if y.ndim < 3 or y.shape[-3] != self.n_reaches or y.shape[-1] != 3:
            raise ValueError(f"state array must be (..., {self.n_reaches}, T, 3), got {y.shape}")
        return self.mu_dyn[:, None, :3], self.sd_dyn[:, None, :3]

    def normalize_runoff(self, r):
        """(..., N, T) physical -> normalised."""
        return (r - self.mu_dyn[:, 3:4]) / self.sd_dyn[:, 3:4]

    def denormalize_runoff(self, r):
        return r * self.sd_dyn[:, 3:4] + self.mu_dyn[:, 3:4]

    def normalize_static(self, s):
        return (s - self.mu_static) / self.sd_static

    def denormalize_static(self, s):
        return s * self.sd_static + self.mu_static

    def to_dict(self):
        return {
            "dynamic_variables": list(DYNAMIC),
            "mu_dyn": self.mu_dyn.tolist(),
            "sd_dyn": self.sd_dyn.tolist(),
            "static_names": list(self.static_names),
            "mu_static": self.mu_static.tolist(),
            "sd_static": self.sd_static.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mu_dyn"], dtype=np.float64), np.asarray(d["sd_dyn"], dtype=np.float64),
                   np.asarray(d["mu_static"], dtype=np.float64), np.asarray(d["sd_static"], dtype=np.float64),
                   tuple(d.get("static_names", ())))


def fit_norm(hydro, forcing, feats):
    """Fit statistics on a training slice.

    Dynamic series (including runoff) get per-reach mean and standard
    deviation; static columns get one global mean and deviation across all
    reaches. Every deviation is floored at ``1e-6 * (|mu| + 1)``.
    """
    if hydro.n_steps < 1 or forcing.n_steps < 1:
        raise ValueError("training slice is empty")
    dyn = np.stack([hydro.discharge, hydro.depth, hydro.storage, forcing.runoff], axis=-1)
    mu = dyn.mean(axis=1)
    sd = _floor(dyn.std(axis=1), mu)
    s = feats.matrix()
    mu_s = s.mean(axis=0)
    sd_s = _floor(s.std(axis=0), mu_s)
    return NormStats(mu, sd, mu_s, sd_s, tuple(StaticFeatureTable.column_names()))


@dataclass(frozen=True)
class SplitSpec:
    """Half-open step ranges ``[start, stop)`` for train, val and test."""

    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        parts = [tuple(int(v) for v in p) for p in (self.train, self.val, self.test)]
        for (a, b) in parts:
            if not 0 <= a < b:
                raise ValueError(f"invalid range [{a}, {b})")
        if not (parts[0][1] == parts[1][0] and parts[1][1] == parts[2][0]):
            raise ValueError(f"partitions must be contiguous and ordered, got {parts}")
        for name, p in zip(("train", "val", "test"), parts):
            object.__setattr__(self, name, p)

    @classmethod
    def from_lengths(cls, n_train, n_val, n_test, start=0):
        a = start
        return cls((a, a + n_train), (a + n_train, a + n_train + n_val),
                   (a + n_train + n_val, a + n_train + n_val + n_test))

    def partition(self, name):
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown partition {name!r}")
        return getattr(self, name)

    @property
    def end(self):
        return self.test[1]

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]))


@dataclass(frozen=True)
class WindowSample:
    t0: int
    h_lag: int
    f_horizon: int
    partition: str = "train"

    @property
    def lag(self):
        return (self.t0 - self.h_lag, self.t0)

    @property
    def future(self):
        return (self.t0, self.t0 + self.f_horizon)


def make_windows(split, cfg, stride=1, partition="train", min_lag=None):
    """Sliding windows lying entirely inside one partition.

    Anchors ``t0`` advance by ``stride``; the lag slice is ``[t0 - h, t0)``
    and the forecast slice ``[t0, t0 + f)``. ``min_lag`` reserves extra lag
    room (used to align anchors across different lag lengths).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    a, b = split.partition(partition)
    h, f = cfg.h_lag, cfg.f_horizon
    room = max(h, min_lag or 0)
    if b - a < room + f:
        warnings.warn(f"{partition} partition [{a}, {b}) is shorter than h_lag + f_horizon = {room + f}; "
                      "no windows", RuntimeWarning, stacklevel=2)
        return []
    return [WindowSample(t0, h, f, partition) for t0 in range(a + room, b - f + 1, stride)]


@dataclass
class Dataset:
    """Graph, static table, forcing, routed truth, split and fitted statistics."""

    graph: object
    feats: StaticFeatureTable
    forcing: ForcingSeries
    hydro: HydroSeries
    split: SplitSpec
    norm: NormStats = None
    meta: dict = None

    def __post_init__(self):
        if self.forcing.n_reaches != self.graph.n_reaches or self.hydro.n_reaches != self.graph.n_reaches:
            raise ValueError("forcing/hydro reach counts do not match the graph")
        if self.forcing.n_steps != self.hydro.n_steps:
            raise ValueError(f"forcing has {self.forcing.n_steps} steps, hydro has {self.hydro.n_steps}")
        if self.split.end > self.forcing.n_steps:
            raise ValueError(f"split ends at {self.split.end} but series has {self.forcing.n_steps} steps")
        if self.norm is None:
            a, b = self.split.train
            self.norm = fit_norm(self.hydro.slice(a, b), self.forcing.slice(a, b), self.feats)
        self._cache = None

    @property
    def n_reaches(self):
        return self.graph.n_reaches

    def arrays(self):
        """Normalised (runoff (N, T), states (N, T, 3), static (N, d))."""
        if self._cache is None:
            self._cache = (
                self.norm.normalize_runoff(self.forcing.runoff),
                self.norm.normalize_states(self.hydro.stacked()),
                self.norm.normalize_static(self.feats.matrix()),
            )
        return self._cache

    def with_norm(self, norm):
        return Dataset(self.graph, self.feats, self.forcing, self.hydro, self.split, norm, self.meta)

    def batch(self, windows, cfg):
        """Stack windows into model inputs and targets.

        Returns
        -------
        runoff (B, N, h + f), states (B, N, h, 3) or None, target (B, N, f, 3)
        """
        r_n, y_n, _ = self.arrays()
        h, f = cfg.h_lag, cfg.f_horizon
        t0 = np.array([w.t0 for w in windows])
        idx = t0[:, None] + np.arange(-h, f)[None, :]
        runoff = np.transpose(r_n[:, idx], (1, 0, 2))
        target = np.transpose(y_n[:, idx[:, h:], :], (1, 0, 2, 3))
        states = np.transpose(y_n[:, idx[:, :h], :], (1, 0, 2, 3)) if cfg.hotstart else None
        return runoff, states, target


def write_dataset(directory, ds, dtype="float32"):
    """Write graph.json, forcing.bin, hydro.bin, manifest.json and norm.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_graph(d / "graph.json", ds.graph, ds.feats)
    write_series(d / "forcing.bin", ds.forcing.runoff[None], dtype)
    write_series(d / "hydro.bin", np.stack([ds.hydro.discharge, ds.hydro.depth, ds.hydro.storage]), dtype)
    write_manifest(d / "manifest.json", VARIABLES, ds.n_reaches, ds.forcing.n_steps, dtype,
                   ds.forcing.dt, forcing_variables=["runoff"], split=ds.split.to_dict(),
                   meta=ds.meta or {})
    (d / "norm.json").write_text(json.dumps(ds.norm.to_dict(), indent=2))
    return d


def read_dataset(directory):
    d = Path(directory)
    for name in ("graph.json", "forcing.bin", "hydro.bin", "manifest.json", "norm.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"dataset file missing: {d / name}")
    manifest = json.loads((d / "manifest.json").read_text())
    graph, feats = load_graph(d / "graph.json")
    n, t = manifest["n_reaches"], manifest["n_steps"]
    if n != graph.n_reaches:
        raise ValueError(f"manifest n_reaches={n} but graph.json has {graph.n_reaches}")
    dtype = manifest["dtype"]
    nvar = len(manifest["variables"])
    forcing = ForcingSeries(read_series(d / "forcing.bin", (1, n, t), dtype)[0], manifest["dt_seconds"])
    hy = read_series(d / "hydro.bin", (nvar, n, t), dtype)
    hydro = HydroSeries(hy[0], hy[1], hy[2])
    norm = NormStats.from_dict(json.loads((d / "norm.json").read_text()))
    if norm.n_reaches != n:
        raise ValueError(f"norm.json covers {norm.n_reaches} reaches, expected {n}")
    return Dataset(graph, feats, forcing, hydro, SplitSpec.from_dict(manifest["split"]), norm,
                   manifest.get("meta", {}))
