"""Network assemblies: the static node classifier, the temporal forecaster,
and a minimal graph-convolution baseline for depth/energy comparisons.

The static model embeds input features, applies L operator-split layers
with per-layer (unshared) weights, and classifies with a linear head. The
temporal model keeps two feature tracks: a state track that the ADR terms
evolve, and a history track that drives the edge velocities and is advanced
by per-layer update maps over the concatenated state, history and time
embedding.
"""

from __future__ import annotations

import json
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Linear, Variable
from .graph import Graph, dirichlet_energy
from .operators import AdrLayerParams, adr_layer
from .runtime import SeedStream, default_dtype


def _dropout_rng(rng, train: bool, needed: bool):
    if not train or not needed:
        return None
    if rng is None:
        raise ValueError("training-mode forward with dropout needs an rng (SeedStream)")
    return rng


class SparseFeatures:
    """Input features in CSR form, for very sparse feature matrices
    (citation bags of words). Dropout acts on the stored values only, which
    matches dense dropout exactly because zeros are fixed points of the
    inverted-scaling rule."""

    def __init__(self, features):
        self.csr = sp.csr_matrix(features).astype(default_dtype())
        self.shape = self.csr.shape

    def dropout(self, p: float, rng: np.random.Generator) -> sp.csr_matrix:
        keep = (rng.random(self.csr.data.shape) >= p) / (1.0 - p)
        out = self.csr.copy()
        out.data *= keep
        return out


def _input_linear(x, lin: Linear, p_io: float, train: bool, rng) -> Variable:
    """Dropout followed by the embedding layer, with a CSR fast path."""
    if isinstance(x, SparseFeatures):
        mat = x.dropout(p_io, rng.child()) if (train and p_io > 0) else x.csr
        mat_t = mat.T.tocsr()
        w = lin.w

        def bwd(g):
            return (mat_t @ g,)

        y = ad._emit(mat @ w.value, (w,), bwd)
        return ad.add(y, lin.b) if lin.b is not None else y
    x = ad._as_variable(x)
    if train and p_io > 0:
        x = ad.dropout(x, p_io, train, rng.child())
    return lin(x)


# ---------------------------------------------------------------------------
# static classifier

class AdrGnnStatic:
    """Embedding, L operator-split layers with unshared weights, classifier."""

    def __init__(self, config: dict, g_in: Linear, layers: list[AdrLayerParams],
                 g_out: Linear):
        self.config = config
        self.g_in = g_in
        self.layers = layers
        self.g_out = g_out

    @classmethod
    def init(cls, c_in: int, c_out: int, hidden: int, layers: int, h: float,
             dropout_io: float = 0.0, dropout_hidden: float = 0.0,
             use_batchnorm: bool = False, cg_iterations: int = 5,
             seed: int = 0) -> "AdrGnnStatic":
        if layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0 < h <= 1:
            raise ValueError(f"h={h} outside (0, 1]")
        stream = SeedStream(seed)
        g_in = Linear.init(c_in, hidden, stream.child(), name="g_in")
        layer_params = [
            AdrLayerParams.init(hidden, stream.child(), use_batchnorm, name=f"layers.{l}")
            for l in range(layers)
        ]
        g_out = Linear.init(hidden, c_out, stream.child(), name="g_out")
        config = {
            "kind": "static", "c_in": c_in, "c_out": c_out, "hidden": hidden,
            "layers": layers, "h": h, "dropout_io": dropout_io,
            "dropout_hidden": dropout_hidden, "use_batchnorm": use_batchnorm,
            "cg_iterations": cg_iterations,
        }
        return cls(config, g_in, layer_params, g_out)

    def forward(self, g: Graph, x, train: bool = False, rng: Optional[SeedStream] = None,
                terms: str = "ADR", diagnostics: bool = False):
        cfg = self.config
        p_io, p_h = cfg["dropout_io"], cfg["dropout_hidden"]
        rng = _dropout_rng(rng, train, p_io > 0 or p_h > 0)
        if not isinstance(x, (SparseFeatures, Variable)):
            x = ad._as_variable(x)
        if tuple(x.shape) != (g.n_nodes, cfg["c_in"]):
            raise ValueError(
                f"forward: features {tuple(x.shape)} != ({g.n_nodes}, {cfg['c_in']})")
        u0 = _input_linear(x, self.g_in, p_io, train, rng)
        u = u0
        stages = [u0]
        for layer in self.layers:
            if train and p_h > 0:
                u = ad.dropout(u, p_h, train, rng.child())
            u = adr_layer(g, u, u0, layer, cfg["h"], cfg["cg_iterations"],
                          train=train, terms=terms)
            stages.append(u)
        if train and p_io > 0:
            u = ad.dropout(u, p_io, train, rng.child())
        logits = self.g_out(u)
        if diagnostics:
            return logits, stages
        return logits

    def named_parameters(self) -> dict[str, Variable]:
        params: list[Variable] = self.g_in.parameters() + self.g_out.parameters()
        for layer in self.layers:
            params += layer.advection.parameters()
            params += layer.diffusion.parameters()
            params += layer.reaction.parameters()
        return {p.name: p for p in params}

    def param_groups(self) -> dict[str, list[Variable]]:
        groups = {
            "embedding": self.g_in.parameters() + self.g_out.parameters(),
            "advection": [], "diffusion": [], "reaction": [],
        }
        for layer in self.layers:
            groups["advection"] += layer.advection.parameters()
            groups["diffusion"] += layer.diffusion.parameters()
            groups["reaction"] += layer.reaction.parameters()
        return groups

    def extra_state(self) -> dict[str, np.ndarray]:
        state = {}
        for l, layer in enumerate(self.layers):
            bn = layer.reaction.bn_state
            if bn is not None:
                state[f"layers.{l}.react.bn.running_mean"] = bn.running_mean
                state[f"layers.{l}.react.bn.running_var"] = bn.running_var
        return state


def forward_static(model: AdrGnnStatic, g: Graph, x, train: bool = False,
                   rng: Optional[SeedStream] = None, **kwargs):
    return model.forward(g, x, train=train, rng=rng, **kwargs)


def static_parameter_count(c_in: int, c_out: int, hidden: int, layers: int,
                           use_batchnorm: bool = False) -> int:
    """Closed-form trainable-parameter count of the static model.

    Embeddings: (c_in+1)h + (h+1)c_out. Per layer: advection
    2(h^2+h) + 2h^2, diffusion h, reaction 3(h^2+h) (+2h with batch norm).
    """
    c = hidden
    per_layer = 2 * (c * c + c) + 2 * c * c + c + 3 * (c * c + c)
    if use_batchnorm:
        per_layer += 2 * c
    return (c_in * c + c) + layers * per_layer + (c * c_out + c_out)


# ---------------------------------------------------------------------------
# time embedding

def time_embedding(frame_times, n_frequencies: int = 10) -> np.ndarray:
    """Sin/cos features at geometrically spaced frequencies for each frame
    time: per frame, n_frequencies sines then n_frequencies cosines, with
    omega_k = 10000^(-k/n_frequencies). Returns a flat vector of
    len(frame_times) * 2 * n_frequencies values (identical for all nodes)."""
    if n_frequencies < 1:
        raise ValueError("n_frequencies must be >= 1")
    t = np.asarray(frame_times, dtype=np.float64)
    k = np.arange(n_frequencies)
    omega = 10000.0 ** (-k / n_frequencies)
    angles = t[:, None] * omega[None, :]
    per_frame = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return per_frame.reshape(-1)


def broadcast_time_embedding(emb: np.ndarray, n_nodes: int) -> np.ndarray:
    return np.tile(emb[None, :], (n_nodes, 1)).astype(default_dtype())


# ---------------------------------------------------------------------------
# temporal forecaster

class AdrGnnTemporal:
    """Two-track temporal model: ADR dynamics on the state track, velocities
    and reaction skip from the history track, plus a projected time embedding."""

    def __init__(self, config: dict, g_time_embed: Linear, g_in_state: Linear,
                 g_in_hist: Linear, layers: list[AdrLayerParams],
                 g_hist: list[Linear], g_out_state: Linear):
        self.config = config
        self.g_time_embed = g_time_embed
        self.g_in_state = g_in_state
        self.g_in_hist = g_in_hist
        self.layers = layers
        self.g_hist = g_hist
        self.g_out_state = g_out_state

    @classmethod
    def init(cls, c_in: int, c_out: int, hidden: int, layers: int, h: float,
             tau_in: int, tau_out: int, n_frequencies: int = 10,
             dropout_io: float = 0.0, dropout_hidden: float = 0.0,
             use_batchnorm: bool = False, cg_iterations: int = 5,
             seed: int = 0) -> "AdrGnnTemporal":
        if tau_in < 1 or tau_out < 1:
            raise ValueError("tau_in and tau_out must be >= 1")
        c_t = 2 * n_frequencies
        stream = SeedStream(seed)
        g_time_embed = Linear.init(tau_in * c_t, hidden, stream.child(), name="g_time_embed")
        g_in_state = Linear.init(c_in + hidden, hidden, stream.child(), name="g_in_state")
        g_in_hist = Linear.init(tau_in * c_in + hidden, hidden, stream.child(),
                                name="g_in_hist")
        layer_params = [
            AdrLayerParams.init(hidden, stream.child(), use_batchnorm, name=f"layers.{l}")
            for l in range(layers)
        ]
        g_hist = [
            Linear.init(3 * hidden, hidden, stream.child(), name=f"g_hist.{l}")
            for l in range(layers)
        ]
        g_out_state = Linear.init(hidden, tau_out * c_out, stream.child(), name="g_out_state")
        config = {
            "kind": "temporal", "c_in": c_in, "c_out": c_out, "hidden": hidden,
            "layers": layers, "h": h, "tau_in": tau_in, "tau_out": tau_out,
            "n_frequencies": n_frequencies, "dropout_io": dropout_io,
            "dropout_hidden": dropout_hidden, "use_batchnorm": use_batchnorm,
            "cg_iterations": cg_iterations,
        }
        return cls(config, g_time_embed, g_in_state, g_in_hist, layer_params,
                   g_hist, g_out_state)

    def forward(self, g: Graph, x_temporal, t_emb, train: bool = False,
                rng: Optional[SeedStream] = None, diagnostics: bool = False):
        cfg = self.config
        tau_in, c_in = cfg["tau_in"], cfg["c_in"]
        p_io, p_h = cfg["dropout_io"], cfg["dropout_hidden"]
        rng = _dropout_rng(rng, train, p_io > 0 or p_h > 0)
        x = ad._as_variable(x_temporal)
        if x.value.shape != (g.n_nodes, tau_in * c_in):
            raise ValueError(
                f"forward: temporal features {x.value.shape} != ({g.n_nodes}, {tau_in * c_in})")
        t_emb = ad._as_variable(t_emb)
        if train and p_io > 0:
            x = ad.dropout(x, p_io, train, rng.child())
        temb = self.g_time_embed(t_emb)
        last_frame = ad.slice_columns(x, (tau_in - 1) * c_in, tau_in * c_in)
        u_state = self.g_in_state(ad.concat_columns([last_frame, temb]))
        u_hist = self.g_in_hist(ad.concat_columns([x, temb]))
        u_hist0 = u_hist
        stages = [u_state]
        for layer, g_hist_l in zip(self.layers, self.g_hist):
            if train and p_h > 0:
                u_state = ad.dropout(u_state, p_h, train, rng.child())
            u_state = adr_layer(g, u_state, u_hist0, layer, cfg["h"],
                                cfg["cg_iterations"], train=train,
                                velocity_features=u_hist)
            u_hist = g_hist_l(ad.concat_columns([u_hist, u_state, temb]))
            stages.append(u_state)
        if train and p_io > 0:
            u_state = ad.dropout(u_state, p_io, train, rng.child())
        predictions = self.g_out_state(u_state)
        if diagnostics:
            return predictions, stages
        return predictions

    def named_parameters(self) -> dict[str, Variable]:
        params: list[Variable] = (self.g_time_embed.parameters()
                                  + self.g_in_state.parameters()
                                  + self.g_in_hist.parameters()
                                  + self.g_out_state.parameters())
        for layer in self.layers:
            params += layer.advection.parameters()
            params += layer.diffusion.parameters()
            params += layer.reaction.parameters()
        for lin in self.g_hist:
            params += lin.parameters()
        return {p.name: p for p in params}

    def param_groups(self) -> dict[str, list[Variable]]:
        embedding = (self.g_time_embed.parameters() + self.g_in_state.parameters()
                     + self.g_in_hist.parameters() + self.g_out_state.parameters())
        for lin in self.g_hist:
            embedding += lin.parameters()
        groups = {"embedding": embedding, "advection": [], "diffusion": [], "reaction": []}
        for layer in self.layers:
            groups["advection"] += layer.advection.parameters()
            groups["diffusion"] += layer.diffusion.parameters()
            groups["reaction"] += layer.reaction.parameters()
        return groups

    def extra_state(self) -> dict[str, np.ndarray]:
        state = {}
        for l, layer in enumerate(self.layers):
            bn = layer.reaction.bn_state
            if bn is not None:
                state[f"layers.{l}.react.bn.running_mean"] = bn.running_mean
                state[f"layers.{l}.react.bn.running_var"] = bn.running_var
        return state


def forward_temporal(model: AdrGnnTemporal, g: Graph, x_temporal, t_emb,
                     train: bool = False, rng: Optional[SeedStream] = None, **kwargs):
    return model.forward(g, x_temporal, t_emb, train=train, rng=rng, **kwargs)


# ---------------------------------------------------------------------------
# graph-convolution baseline

def gcn_norm_adjacency(g: Graph) -> sp.csr_matrix:
    """Self-loop renormalized adjacency D^{-1/2}(A + I)D^{-1/2}."""
    n = g.n_nodes
    a = g.adjacency() + sp.eye(n, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    return sp.diags(d_inv_sqrt) @ a @ sp.diags(d_inv_sqrt)


class _SymmetricMatvec:
    def __init__(self, matrix: sp.csr_matrix):
        self.matrix = matrix

    def __call__(self, u) -> Variable:
        u = ad._as_variable(u)
        mat = self.matrix

        def bwd(grad):
            return (mat @ grad,)

        return ad._emit(mat @ u.value, (u,), bwd)


class GcnBaseline:
    """Plain convolution stack: ReLU(A_hat (U W)) per layer, linear head."""

    def __init__(self, config: dict, convs: list[Linear], head: Optional[Linear]):
        self.config = config
        self.convs = convs
        self.head = head

    @classmethod
    def init(cls, c_in: int, c_out: int, hidden: int, layers: int,
             dropout: float = 0.0, seed: int = 0) -> "GcnBaseline":
        stream = SeedStream(seed)
        widths = [c_in] + [hidden] * layers
        convs = [Linear.init(widths[l], widths[l + 1], stream.child(), name=f"convs.{l}")
                 for l in range(layers)]
        head = Linear.init(hidden, c_out, stream.child(), name="head")
        config = {"kind": "gcn", "c_in": c_in, "c_out": c_out, "hidden": hidden,
                  "layers": layers, "dropout": dropout}
        return cls(config, convs, head)

    def forward(self, g: Graph, x, train: bool = False,
                rng: Optional[SeedStream] = None, diagnostics: bool = False):
        p = self.config.get("dropout", 0.0)
        rng = _dropout_rng(rng, train, p > 0)
        a_hat = _SymmetricMatvec(gcn_norm_adjacency(g))
        u = ad._as_variable(x)
        stages = [u]
        for conv in self.convs:
            if train and p > 0:
                u = ad.dropout(u, p, train, rng.child())
            u = ad.relu(a_hat(conv(u)))
            stages.append(u)
        logits = self.head(u) if self.head is not None else u
        if diagnostics:
            return logits, stages
        return logits

    def named_parameters(self) -> dict[str, Variable]:
        params: list[Variable] = []
        for conv in self.convs:
            params += conv.parameters()
        if self.head is not None:
            params += self.head.parameters()
        return {p.name: p for p in params}

    def param_groups(self) -> dict[str, list[Variable]]:
        return {"embedding": list(self.named_parameters().values())}

    def extra_state(self) -> dict[str, np.ndarray]:
        return {}


def forward_gcn_baseline(g: Graph, x, weights: GcnBaseline, **kwargs):
    return weights.forward(g, x, **kwargs)


# ---------------------------------------------------------------------------
# checkpoint container

def save_checkpoint(path, model) -> None:
    """Single self-describing container: JSON config plus named arrays."""
    arrays = {"__config__": np.frombuffer(
        json.dumps(model.config, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for name, var in model.named_parameters().items():
        arrays[f"param:{name}"] = var.value
    for name, arr in model.extra_state().items():
        arrays[f"state:{name}"] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; validates every array shape."""
    with np.load(path) as data:
        config = json.loads(bytes(data["__config__"]).decode("utf-8"))
        params = {k[len("param:"):]: data[k] for k in data.files if k.startswith("param:")}
        state = {k[len("state:"):]: data[k] for k in data.files if k.startswith("state:")}
    model = build_model(config)
    model_params = model.named_parameters()
    if set(model_params) != set(params):
        missing = set(model_params) ^ set(params)
        raise ValueError(f"checkpoint parameter names do not match config: {sorted(missing)}")
    for name, var in model_params.items():
        if params[name].shape != var.value.shape:
            raise ValueError(
                f"checkpoint {name}: shape {params[name].shape} != expected {var.value.shape}")
        var.value = params[name].astype(default_dtype())
        var.grad = np.zeros_like(var.value)
    for l, layer in enumerate(getattr(model, "layers", [])):
        if isinstance(layer, AdrLayerParams) and layer.reaction.bn_state is not None:
            layer.reaction.bn_state.running_mean = state[f"layers.{l}.react.bn.running_mean"]
            layer.reaction.bn_state.running_var = state[f"layers.{l}.react.bn.running_var"]
    return model


def build_model(config: dict):
    kind = config.get("kind")
    common = dict(c_in=config["c_in"], c_out=config["c_out"], hidden=config["hidden"],
                  layers=config["layers"])
    if kind == "static":
        return AdrGnnStatic.init(
            **common, h=config["h"], dropout_io=config["dropout_io"],
            dropout_hidden=config["dropout_hidden"], use_batchnorm=config["use_batchnorm"],
            cg_iterations=config["cg_iterations"])
    if kind == "temporal":
        return AdrGnnTemporal.init(
            **common, h=config["h"], tau_in=config["tau_in"], tau_out=config["tau_out"],
            n_frequencies=config["n_frequencies"], dropout_io=config["dropout_io"],
            dropout_hidden=config["dropout_hidden"], use_batchnorm=config["use_batchnorm"],
            cg_iterations=config["cg_iterations"])
    if kind == "gcn":
        return GcnBaseline.init(**common, dropout=config.get("dropout", 0.0))
    raise ValueError(f"unknown model kind {kind!r}")


def count_parameters(model) -> int:
    return sum(v.value.size for v in model.named_parameters().values())


def layer_energy_profile(g: Graph, stages) -> list[float]:
    """Dirichlet energy of each recorded layer stage."""
    return [dirichlet_energy(g, s.value) for s in stages]
