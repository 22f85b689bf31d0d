"""Directed river networks and their static channel attributes.

A network is a forest of reaches draining toward outlets: every reach has at
most one downstream neighbour. Edges are stored as ``(upstream, downstream)``
pairs of 0-based reach ids.
"""
from __future__ import annotations

import graphlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

N_FLDHGT = 10

# Column order used whenever the table is flattened into a feature matrix.
SCALAR_COLUMNS = (
    "ctarea", "elevtn", "grdarea", "nxtdst", "rivlen", "rivwth_gwdlr",
    "uparea", "width", "slope", "manning_n",
)


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RiverGraph:
    """Reach connectivity with cached topological structure.

    Build instances with :meth:`from_edges`; it validates the forest
    property and computes ``topo_order`` (upstream first), ``degree``
    (1 + number of upstream neighbours) and ``downstream`` (-1 at outlets).
    """

    n_reaches: int
    edges: tuple
    topo_order: np.ndarray
    degree: np.ndarray
    downstream: np.ndarray
    level: np.ndarray = field(repr=False)

    @classmethod
    def from_edges(cls, n_reaches, edges):
        n_reaches = int(n_reaches)
        if n_reaches < 1:
            raise ValueError("n_reaches must be >= 1")
        edges = tuple((int(j), int(i)) for j, i in edges)
        downstream = np.full(n_reaches, -1, dtype=np.int64)
        degree = np.ones(n_reaches, dtype=np.int64)
        for j, i in edges:
            if not (0 <= j < n_reaches and 0 <= i < n_reaches):
                raise ValueError(f"edge ({j}, {i}) references a reach outside [0, {n_reaches})")
            if j == i:
                raise ValueError(f"self-loop at reach {j}")
            if downstream[j] != -1:
                raise ValueError(f"reach {j} has more than one downstream neighbour")
            downstream[j] = i
            degree[i] += 1
        sorter = graphlib.TopologicalSorter({r: () for r in range(n_reaches)})
        for j, i in edges:
            sorter.add(i, j)
        try:
            order = list(sorter.static_order())
        except graphlib.CycleError as exc:
            raise ValueError(f"river network contains a cycle: {exc.args[1]}") from None
        level = np.zeros(n_reaches, dtype=np.int64)
        for r in order:
            d = downstream[r]
            if d >= 0:
                level[d] = max(level[d], level[r] + 1)
        return cls(
            n_reaches=n_reaches,
            edges=edges,
            topo_order=_frozen(order, np.int64),
            degree=_frozen(degree, np.int64),
            downstream=_frozen(downstream, np.int64),
            level=_frozen(level, np.int64),
        )

    @property
    def outlets(self):
        return np.flatnonzero(self.downstream < 0)

    def upstream_of(self, reach):
        return [j for j, i in self.edges if i == reach]

    def is_topological(self, order=None):
        order = self.topo_order if order is None else order
        pos = np.empty(self.n_reaches, dtype=np.int64)
        pos[np.asarray(order)] = np.arange(self.n_reaches)
        return all(pos[j] < pos[i] for j, i in self.edges)


@dataclass(frozen=True)
class StaticFeatureTable:
    """Per-reach geomorphic attributes.

    Areas in m^2, lengths, widths and heights in m; ``fldhgt`` has shape
    (n_reaches, 10); ``slope`` and ``manning_n`` are dimensionless.
    """

    ctarea: np.ndarray
    elevtn: np.ndarray
    grdarea: np.ndarray
    nxtdst: np.ndarray
    rivlen: np.ndarray
    rivwth_gwdlr: np.ndarray
    uparea: np.ndarray
    width: np.ndarray
    fldhgt: np.ndarray
    slope: np.ndarray
    manning_n: np.ndarray

    def __post_init__(self):
        for name in SCALAR_COLUMNS + ("fldhgt",):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.float64))
        n = self.ctarea.shape[0]
        for name in SCALAR_COLUMNS:
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {getattr(self, name).shape}")
        if self.fldhgt.shape != (n, N_FLDHGT):
            raise ValueError(f"fldhgt must have shape ({n}, {N_FLDHGT}), got {self.fldhgt.shape}")

    @property
    def n_reaches(self):
        return self.ctarea.shape[0]

    @staticmethod
    def column_names():
        names = list(SCALAR_COLUMNS[:8])
        names += [f"fldhgt_{k}" for k in range(N_FLDHGT)]
        names += ["slope", "manning_n"]
        return names

    def matrix(self):
        """Stack all attributes into an (n_reaches, 20) array, ``column_names()`` order."""
        cols = [getattr(self, c)[:, None] for c in SCALAR_COLUMNS[:8]]
        cols.append(self.fldhgt)
        cols += [self.slope[:, None], self.manning_n[:, None]]
        return np.hstack(cols)

    def validate(self, graph=None):
        """Raise ``ValueError`` if any physical invariant is violated."""
        for name in ("ctarea", "grdarea", "nxtdst", "rivlen", "rivwth_gwdlr", "uparea", "width"):
            if not np.all(getattr(self, name) > 0):
                raise ValueError(f"{name} must be strictly positive")
        if np.any(np.diff(self.fldhgt, axis=1) < 0):
            raise ValueError("fldhgt must be non-decreasing along its 10 levels")
        if not np.all(self.slope > 0):
            raise ValueError("slope must be positive")
        if np.any((self.manning_n < 0.01) | (self.manning_n > 0.2)):
            raise ValueError("manning_n must lie in [0.01, 0.2]")
        if graph is not None:
            for j, i in graph.edges:
                if self.uparea[i] < self.uparea[j]:
                    raise ValueError(f"uparea decreases downstream on edge ({j}, {i})")


@dataclass(frozen=True)
class GaugeSet:
    supervised: frozenset
    unsupervised: frozenset

    def __post_init__(self):
        object.__setattr__(self, "supervised", frozenset(int(r) for r in self.supervised))
        object.__setattr__(self, "unsupervised", frozenset(int(r) for r in self.unsupervised))
        if self.supervised & self.unsupervised:
            raise ValueError("supervised and unsupervised gauges overlap")

    @property
    def all(self):
        return self.supervised | self.unsupervised


def accumulate_uparea(graph, ctarea):
    """Upstream area: own catchment plus the upstream area of every upstream neighbour."""
    up = np.array(ctarea, dtype=np.float64)
    for r in graph.topo_order:
        d = graph.downstream[r]
        if d >= 0:
            up[d] += up[r]
    return up


def generate_network(n_reaches, branching_prob=0.3, seed=0, width_exponent=0.5,
                     depth_exponent=0.3):
    """Grow a random river tree upstream from a single outlet (reach 0).

    Each new reach attaches upstream of an existing one. With probability
    ``branching_prob`` the attachment point is any existing reach (which may
    create a confluence); otherwise a headwater tip is extended.

    Width and bankfull depth follow power laws of upstream area with
    multiplicative lognormal scatter; the bankfull depth only scales the
    synthetic floodplain heights.

    Returns
    -------
    (RiverGraph, StaticFeatureTable)
    """
    if n_reaches < 1:
        raise ValueError(f"n_reaches must be >= 1, got {n_reaches}")
    if not 0.0 <= branching_prob <= 1.0:
        raise ValueError(f"branching_prob must be in [0, 1], got {branching_prob}")
    rng = np.random.default_rng(seed)
    n_up = [0]
    edges = []
    for k in range(1, n_reaches):
        if rng.random() < branching_prob:
            parent = int(rng.integers(k))
        else:
            tips = [r for r in range(k) if n_up[r] == 0]
            parent = tips[int(rng.integers(len(tips)))]
        edges.append((k, parent))
        n_up[parent] += 1
        n_up.append(0)
    graph = RiverGraph.from_edges(n_reaches, edges)

    n = n_reaches
    ctarea = 6.0e8 * rng.lognormal(0.0, 0.4, n)
    grdarea = ctarea * rng.uniform(0.9, 1.3, n)
    rivlen = 2.2e4 * rng.lognormal(0.0, 0.25, n)
    uparea = accumulate_uparea(graph, ctarea)
    ua = uparea / 1.0e9
    width = 20.0 * ua ** width_exponent * rng.lognormal(0.0, 0.1, n)
    rivwth = width * rng.lognormal(0.0, 0.15, n)
    bankfull = 1.0 * ua ** depth_exponent * rng.lognormal(0.0, 0.1, n)
    slope = np.clip(8.0e-4 * ua ** -0.3 * rng.lognormal(0.0, 0.3, n), 2.0e-5, 2.0e-2)
    manning = np.clip(0.035 * rng.lognormal(0.0, 0.2, n), 0.02, 0.08)
    fldhgt = np.cumsum(bankfull[:, None] * rng.uniform(0.05, 0.4, (n, N_FLDHGT)), axis=1)

    # Outlet elevation is drawn; every upstream outlet sits higher by the drop
    # along the downstream reach.
    elevtn = np.zeros(n)
    nxtdst = np.zeros(n)
    order = graph.topo_order[::-1]
    for r in order:
        d = graph.downstream[r]
        if d < 0:
            elevtn[r] = rng.uniform(2.0, 20.0)
            nxtdst[r] = rivlen[r]
        else:
            stretch = rng.uniform(1.0, 1.1)
            nxtdst[r] = rivlen[d] * stretch
            elevtn[r] = elevtn[d] + slope[d] * rivlen[d] * stretch
    feats = StaticFeatureTable(
        ctarea=ctarea, elevtn=elevtn, grdarea=grdarea, nxtdst=nxtdst, rivlen=rivlen,
        rivwth_gwdlr=rivwth, uparea=uparea, width=width, fldhgt=fldhgt, slope=slope,
        manning_n=manning,
    )
    return graph, feats


def chain_graph(n):
    """Simple chain 0 -> 1 -> ... -> n-1."""
    return RiverGraph.from_edges(n, [(k, k + 1) for k in range(n - 1)])


def adjacency_normalized(graph, sparse_format=False):
    """Row-normalised adjacency ``D^-1 (A + I)``.

    ``A[i, j] = 1`` when reach ``j`` drains into reach ``i``; ``D`` is the
    diagonal of ``graph.degree``. Returns a dense array, or a CSR matrix when
    ``sparse_format`` is true.
    """
    n = graph.n_reaches
    rows = list(range(n)) + [i for _, i in graph.edges]
    cols = list(range(n)) + [j for j, _ in graph.edges]
    vals = 1.0 / graph.degree[np.asarray(rows, dtype=np.int64)].astype(np.float64)
    m = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return m if sparse_format else m.toarray()


def identity_operator(n, sparse_format=True):
    """Self-loop-only aggregation (each reach sees only itself)."""
    m = sparse.identity(n, format="csr", dtype=np.float64)
    return m if sparse_format else m.toarray()


def refine_network(graph, feats, k):
    """Split every reach into ``k`` serial sub-reaches.

    Sub-reach ``m`` of coarse reach ``c`` gets fine id ``c * k + m``; ``m = 0``
    is the most upstream piece and ``m = k - 1`` drains to the downstream
    coarse reach. Lengths and local areas are divided by ``k``; outlet
    elevations are interpolated linearly along the coarse channel.

    Returns
    -------
    (RiverGraph, StaticFeatureTable, dict)
        The last element maps each coarse id to its list of fine ids.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    n = graph.n_reaches
    edges = []
    mapping = {}
    for c in range(n):
        ids = [c * k + m for m in range(k)]
        mapping[c] = ids
        edges.extend((ids[m], ids[m + 1]) for m in range(k - 1))
    for j, i in graph.edges:
        edges.append((j * k + k - 1, i * k))
    fine = RiverGraph.from_edges(n * k, edges)

    rep = np.repeat
    pos = np.tile(np.arange(k), n)
    drop = rep(feats.slope * feats.rivlen, k)
    elevtn = rep(feats.elevtn, k) + (k - 1 - pos) / k * drop
    ctarea = rep(feats.ctarea / k, k)
    fine_feats = StaticFeatureTable(
        ctarea=ctarea,
        elevtn=elevtn,
        grdarea=rep(feats.grdarea / k, k),
        nxtdst=rep(feats.nxtdst / k, k),
        rivlen=rep(feats.rivlen / k, k),
        rivwth_gwdlr=rep(feats.rivwth_gwdlr, k),
        uparea=accumulate_uparea(fine, ctarea),
        width=rep(feats.width, k),
        fldhgt=rep(feats.fldhgt, k, axis=0),
        slope=rep(feats.slope, k),
        manning_n=rep(feats.manning_n, k),
    )
    return fine, fine_feats, mapping


def split_gauges(graph, candidate_reaches, ratios, seed=0):
    """Nested supervised/unsupervised partitions of ``candidate_reaches``.

    One seeded shuffle is drawn; the gauge set for ratio ``r`` supervises the
    first ``ceil(r * n)`` shuffled candidates, so smaller ratios are always
    subsets of larger ones.
    """
    cands = sorted(int(c) for c in candidate_reaches)
    if not cands:
        raise ValueError("candidate_reaches is empty")
    bad = [c for c in cands if not 0 <= c < graph.n_reaches]
    if bad:
        raise ValueError(f"candidate reaches not in graph: {bad}")
    ratios = [float(r) for r in ratios]
    if any(not 0.0 < r <= 1.0 for r in ratios):
        raise ValueError(f"ratios must lie in (0, 1], got {ratios}")
    if ratios != sorted(ratios):
        raise ValueError(f"ratios must be sorted ascending, got {ratios}")
    perm = np.random.default_rng(seed).permutation(cands)
    out = []
    for r in ratios:
        m = min(len(cands), math.ceil(r * len(cands) - 1e-9))
        sup = frozenset(int(x) for x in perm[:m])
        out.append(GaugeSet(sup, frozenset(cands) - sup))
    return out


def select_gauge_reaches(graph, feats, n_gauges, seed=0):
    """Pick ``n_gauges`` distinct reaches, favouring larger upstream areas."""
    if n_gauges > graph.n_reaches:
        raise ValueError(f"cannot place {n_gauges} gauges on {graph.n_reaches} reaches")
    rng = np.random.default_rng(seed)
    w = np.sqrt(feats.uparea)
    idx = rng.choice(graph.n_reaches, size=n_gauges, replace=False, p=w / w.sum())
    return sorted(int(i) for i in idx)


def graph_to_dict(graph, feats):
    static = {name: getattr(feats, name).tolist() for name in SCALAR_COLUMNS}
    static["fldhgt"] = feats.fldhgt.tolist()
    return {
        "n_reaches": graph.n_reaches,
        "edges": [[j, i] for j, i in graph.edges],
        "static": static,
    }


def graph_from_dict(d):
    graph = RiverGraph.from_edges(d["n_reaches"], d["edges"])
    st = d["static"]
    feats = StaticFeatureTable(**{name: np.asarray(st[name]) for name in SCALAR_COLUMNS + ("fldhgt",)})
    if feats.n_reaches != graph.n_reaches:
        raise ValueError(f"static table has {feats.n_reaches} rows, graph has {graph.n_reaches} reaches")
    return graph, feats


def save_graph(path, graph, feats):
    Path(path).write_text(json.dumps(graph_to_dict(graph, feats)))


def load_graph(path):
    return graph_from_dict(json.loads(Path(path).read_text()))


def save_mapping(path, mapping):
    Path(path).write_text(json.dumps({str(c): ids for c, ids in sorted(mapping.items())}))


def load_mapping(path):
    return {int(c): list(ids) for c, ids in json.loads(Path(path).read_text()).items()}
