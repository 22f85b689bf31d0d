"""Topology-informed recurrent graph operator for river hydrodynamics.

Per time step the model concatenates static reach attributes, runoff and (in
hotstart mode) the previous river state, fuses them with a residual MLP,
projects to the hidden width, mixes upstream information with residual graph
convolutions and updates a per-reach hidden state with a gated temporal
residual. A linear readout maps the hidden state to normalised discharge,
depth and storage.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .network import adjacency_normalized, identity_operator

COLDSTART = "coldstart"
HOTSTART = "hotstart"
N_TARGETS = 3
DEFAULT_LAG = {COLDSTART: 20, HOTSTART: 7}


@dataclass(frozen=True)
class GrcConfig:
    mode: str = COLDSTART
    h_lag: int = None
    f_horizon: int = 7
    d_fusion: int = 128
    d_hidden: int = 64
    n_gcn_layers: int = 2
    ablate_stat: bool = False
    ablate_temp: bool = False
    ablate_topo: bool = False
    d_static: int = 20
    d_forcing: int = 1

    def __post_init__(self):
        mode = str(self.mode).lower()
        if mode not in DEFAULT_LAG:
            raise ValueError(f"mode must be 'coldstart' or 'hotstart', got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if self.h_lag is None:
            object.__setattr__(self, "h_lag", DEFAULT_LAG[mode])
        if self.h_lag < 1 or self.f_horizon < 1:
            raise ValueError("h_lag and f_horizon must be >= 1")
        if self.n_gcn_layers < 1:
            raise ValueError("n_gcn_layers must be >= 1")

    @property
    def hotstart(self):
        return self.mode == HOTSTART

    @property
    def d_input(self):
        return self.d_static + self.d_forcing + (N_TARGETS if self.hotstart else 0)

    @property
    def variant(self):
        """Ablation tag such as ``"Stat+Temp+Topo"`` or ``"none"``."""
        on = [name for name, off in (("Stat", self.ablate_stat), ("Temp", self.ablate_temp),
                                     ("Topo", self.ablate_topo)) if not off]
        return "+".join(on) if on else "none"

    def to_dict(self):
        return asdict(self)


def gcn_layer_name(layer):
    return f"gcn{layer + 1}"


def layer_names(cfg):
    return ["fusion", "input_proj"] + [gcn_layer_name(k) for k in range(cfg.n_gcn_layers)] + ["gru", "readout"]


def param_shapes(cfg):
    """Ordered ``name -> shape``; weights are stored as (out, in)."""
    d_in, d_f, d_h = cfg.d_input, cfg.d_fusion, cfg.d_hidden
    shapes = {
        "fusion.w1": (d_f, d_in), "fusion.b1": (d_f,),
        "fusion.w2": (d_in, d_f), "fusion.b2": (d_in,),
        "input_proj.w": (d_h, d_in), "input_proj.b": (d_h,),
    }
    for k in range(cfg.n_gcn_layers):
        shapes[f"{gcn_layer_name(k)}.w"] = (d_h, d_h)
        shapes[f"{gcn_layer_name(k)}.b"] = (d_h,)
    for gate in ("u", "r", "z"):
        shapes[f"gru.w_{gate}"] = (d_h, 2 * d_h)
        shapes[f"gru.b_{gate}"] = (d_h,)
    shapes["readout.w"] = (N_TARGETS, d_h)
    shapes["readout.b"] = (N_TARGETS,)
    return shapes


def is_weight(name):
    return ".w" in name


@dataclass
class GrcParams:
    """Learnable tensors keyed by ``"<layer>.<name>"``."""

    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return list(self.tensors.values())

    @staticmethod
    def layer_of(name):
        return name.split(".", 1)[0]

    def layers(self):
        seen = []
        for name in self.tensors:
            layer = self.layer_of(name)
            if layer not in seen:
                seen.append(layer)
        return seen

    def names_in(self, layer):
        return [n for n in self.tensors if self.layer_of(n) == layer]

    def copy(self):
        return GrcParams({n: ad.Tensor(t.value.copy(), requires_grad=True, name=n)
                          for n, t in self.tensors.items()})

    def arrays(self):
        return {n: t.value for n, t in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def n_values(self):
        return sum(t.value.size for t in self.tensors.values())


def init_params(cfg, seed=0, zero=False, dtype=np.float64):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, update-gate bias -1.

    ``zero=True`` sets every weight to zero (a test hook for hand-traced
    outputs); the update-gate bias keeps its -1.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if is_weight(name) and not zero:
            bound = 1.0 / np.sqrt(shape[1])
            value = rng.uniform(-bound, bound, shape)
        else:
            value = np.zeros(shape)
        if name == "gru.b_u":
            value = np.full(shape, -1.0)
        tensors[name] = ad.Tensor(value.astype(dtype), requires_grad=True, name=name)
    return GrcParams(tensors)


def graph_operator(graph, ablate_topo=False):
    """Sparse aggregation operator: ``D^-1 (A + I)``, or identity when topology is ablated."""
    if ablate_topo:
        return identity_operator(graph.n_reaches)
    return adjacency_normalized(graph, sparse_format=True)


def broadcast_static(s, n_steps):
    """Repeat static features over time: (N, d) -> (n_steps, N, d)."""
    s = np.asarray(s)
    return np.broadcast_to(s, (n_steps,) + s.shape)


def step_input(cfg, s_t, r_t, y_prev=None):
    """Concatenate per-step inputs into ``x_t``.

    ``s_t`` is (..., N, d_static), ``r_t`` (..., N, d_forcing) and ``y_prev``
    (..., N, 3). Hotstart requires ``y_prev``; coldstart rejects it.
    """
    if cfg.hotstart and y_prev is None:
        raise ValueError("hotstart step input requires the previous river state")
    if not cfg.hotstart and y_prev is not None:
        raise ValueError("coldstart takes no river-state input")
    s_t = s_t if isinstance(s_t, ad.Tensor) else ad.Tensor(s_t)
    if cfg.ablate_stat:
        s_t = ad.Tensor(np.zeros_like(s_t.value))
    parts = [s_t] + ([y_prev] if cfg.hotstart else []) + [r_t]
    return ad.concat(parts, axis=-1)


def fuse(params, x):
    """Residual MLP fusion: ``x + W2 gelu(W1 x + b1) + b2``."""
    hid = ad.gelu(ad.linear(x, params["fusion.w1"], params["fusion.b1"]))
    return ad.add(x, ad.linear(hid, params["fusion.w2"], params["fusion.b2"]))


def gcn_stack(params, h, adj, n_layers):
    """Residual graph convolutions ``H + gelu(adj H W^T + b)``."""
    for k in range(n_layers):
        name = gcn_layer_name(k)
        agg = ad.row_normalize_apply(adj, h)
        h = ad.add(h, ad.gelu(ad.linear(agg, params[f"{name}.w"], params[f"{name}.b"])))
    return h


def gru_step(params, h, z_prev, ablate_temp=False):
    """Gated temporal residual update of the hidden state."""
    if ablate_temp:
        zeros = ad.Tensor(np.zeros(h.shape, dtype=h.value.dtype))
        return ad.tanh(ad.linear(ad.concat([h, zeros]), params["gru.w_z"], params["gru.b_z"]))
    hz = ad.concat([h, z_prev])
    gate_u = ad.sigmoid(ad.linear(hz, params["gru.w_u"], params["gru.b_u"]))
    gate_r = ad.sigmoid(ad.linear(hz, params["gru.w_r"], params["gru.b_r"]))
    cand = ad.tanh(ad.linear(ad.concat([h, ad.mul(gate_r, z_prev)]), params["gru.w_z"], params["gru.b_z"]))
    return ad.add(z_prev, ad.mul(gate_u, ad.sub(cand, z_prev)))


def readout(params, z):
    return ad.linear(z, params["readout.w"], params["readout.b"])


def forward_normalized(cfg, params, adj, static, runoff, states=None, check_finite=True):
    """Unroll the model over one batch of windows in normalised space.

    Parameters
    ----------
    cfg : GrcConfig
    params : GrcParams
    adj : scipy.sparse matrix
        Aggregation operator from :func:`graph_operator`.
    static : array (N, d_static)
        Globally normalised static features.
    runoff : array (B, N, h_lag + f_horizon)
        Reach-normalised runoff over the lag and forecast window.
    states : array (B, N, h_lag, 3), optional
        Reach-normalised river states over the lag window (hotstart only).

    Returns
    -------
    Tensor (B, N, f_horizon, 3)
    """
    runoff = np.asarray(runoff)
    if runoff.ndim == 2:
        runoff = runoff[None]
    b, n, t_total = runoff.shape
    h_lag, f = cfg.h_lag, cfg.f_horizon
    if t_total != h_lag + f:
        raise ValueError(f"runoff window has {t_total} steps, expected h_lag + f_horizon = {h_lag + f}")
    if cfg.hotstart:
        if states is None:
            raise ValueError("hotstart forward requires a states window")
        states = np.asarray(states)
        if states.ndim == 3:
            states = states[None]
        if states.shape != (b, n, h_lag, N_TARGETS):
            raise ValueError(f"states window shape {states.shape} != {(b, n, h_lag, N_TARGETS)}")
    elif states is not None:
        raise ValueError("coldstart forward takes no states window")
    dtype = params["readout.w"].value.dtype
    s_b = ad.Tensor(np.broadcast_to(np.asarray(static, dtype=dtype), (b,) + np.shape(static)))
    z = ad.Tensor(np.zeros((b, n, cfg.d_hidden), dtype=dtype))
    y_prev = ad.Tensor(np.zeros((b, n, N_TARGETS), dtype=dtype)) if cfg.hotstart else None
    outputs = []
    for t in range(h_lag + f):
        r_t = ad.Tensor(runoff[:, :, t:t + 1].astype(dtype))
        x = step_input(cfg, s_b, r_t, y_prev)
        h = ad.linear(fuse(params, x), params["input_proj.w"], params["input_proj.b"])
        h = gcn_stack(params, h, adj, cfg.n_gcn_layers)
        z = gru_step(params, h, z, cfg.ablate_temp)
        if check_finite and not np.all(np.isfinite(z.value)):
            raise FloatingPointError(f"non-finite hidden state at unroll step {t}")
        if t >= h_lag:
            out = readout(params, z)
            outputs.append(out)
            if cfg.hotstart:
                y_prev = out
        elif cfg.hotstart:
            y_prev = ad.Tensor(states[:, :, t, :].astype(dtype))
    return ad.stack(outputs, axis=2)


def forward(cfg, params, graph, feats, runoff, states=None, norm=None):
    """Predict ``f_horizon`` steps from physical-unit inputs.

    Parameters
    ----------
    runoff : array (N, h_lag + f_horizon) or (B, N, h_lag + f_horizon), m^3/s
    states : array (N, h_lag, 3) or (B, N, h_lag, 3), physical units; hotstart only
    norm : NormStats

    Returns
    -------
    (normalized, physical) : numpy.ndarray, numpy.ndarray
        Each of shape (B, N, f_horizon, 3) (leading B dropped for 2-D input).
    """
    squeeze = np.ndim(runoff) == 2
    r_n = norm.normalize_runoff(np.asarray(runoff))
    y_n = None if states is None else norm.normalize_states(np.asarray(states))
    adj = graph_operator(graph, cfg.ablate_topo)
    static = norm.normalize_static(feats.matrix())
    pred = forward_normalized(cfg, params, adj, static, r_n, y_n).value
    phys = norm.denormalize_states(pred)
    if squeeze:
        return pred[0], phys[0]
    return pred, phys


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(directory, cfg, params, seed=None, norm_ref=None, extra=None):
    """Write ``params.bin`` (little-endian float64, layer order) and ``params.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = list(params.tensors)
    blob = b"".join(np.ascontiguousarray(params[n].value, dtype="<f8").tobytes() for n in names)
    (d / "params.bin").write_bytes(blob)
    manifest = {
        "layers": layer_names(cfg),
        "tensors": [{"name": n, "layer": GrcParams.layer_of(n), "shape": list(params[n].shape)}
                    for n in names],
        "cfg": cfg.to_dict(),
        "norm": norm_ref,
        "seed": seed,
        "dtype": "float64",
    }
    if extra:
        manifest.update(extra)
    (d / "params.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_checkpoint(directory):
    """Return ``(cfg, params, manifest)`` from a checkpoint directory."""
    d = Path(directory)
    manifest = json.loads((d / "params.json").read_text())
    cfg = GrcConfig(**manifest["cfg"])
    raw = (d / "params.bin").read_bytes()
    total = sum(int(np.prod(t["shape"])) for t in manifest["tensors"]) * 8
    if len(raw) != total:
        raise ValueError(f"{d / 'params.bin'}: expected {total} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f8")
    tensors, off = {}, 0
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"]))
        value = flat[off:off + size].reshape(t["shape"]).astype(np.float64)
        tensors[t["name"]] = ad.Tensor(value, requires_grad=True, name=t["name"])
        off += size
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != shape:
            raise ValueError(f"checkpoint tensor {name!r} missing or not of shape {shape}")
    return cfg, GrcParams(tensors), manifest


def with_lag(cfg, h_lag):
    return replace(cfg, h_lag=h_lag)
