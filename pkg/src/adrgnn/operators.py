"""Discretized advection, diffusion and reaction terms and their
operator-split composition into a single layer.

Advection transports node features along directed edges using learned
velocities whose outbound weights sum to 1 per node and channel, which
makes the update mass conserving and column stochastic. Diffusion takes an
implicit Euler step of the normalized-Laplacian heat flow via a per-channel
conjugate-gradient solve. Reaction is a pointwise MLP update with a skip
connection to the initial embedding. One layer applies the three solution
operators in sequence (advection, diffusion, reaction).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Linear, Variable
from .graph import Graph, laplacian_apply
from .runtime import philox

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# parameter containers

@dataclass
class AdvectionParams:
    """Edge-velocity network weights: two biased maps feeding the shared
    pre-activation, and two bias-free maps.

    a3 and a4 deliberately carry no bias: a bias after the ReLU difference
    would break the guarantee that at most one direction of every edge pair
    has a nonzero pre-normalization weight.
    """

    a1: Linear
    a2: Linear
    a3: Linear
    a4: Linear

    @classmethod
    def init(cls, c: int, rng: np.random.Generator, name: str = "adv") -> "AdvectionParams":
        return cls(
            a1=Linear.init(c, c, rng, bias=True, name=f"{name}.a1"),
            a2=Linear.init(c, c, rng, bias=True, name=f"{name}.a2"),
            a3=Linear.init(c, c, rng, bias=False, name=f"{name}.a3"),
            a4=Linear.init(c, c, rng, bias=False, name=f"{name}.a4"),
        )

    def parameters(self) -> list[Variable]:
        return (self.a1.parameters() + self.a2.parameters()
                + self.a3.parameters() + self.a4.parameters())


@dataclass
class DiffusionParams:
    """Raw per-channel coefficients; the effective diffusivities are
    hardtanh(theta, 0, 1), one per channel."""

    theta: Variable

    @classmethod
    def init(cls, c: int, name: str = "diff", initial: float = 0.5) -> "DiffusionParams":
        # Init in the clamp interior so the coefficients keep a gradient.
        return cls(Variable(np.full(c, initial), requires_grad=True, name=f"{name}.theta"))

    def effective(self) -> Variable:
        return ad.hardtanh(self.theta, 0.0, 1.0)

    def parameters(self) -> list[Variable]:
        return [self.theta]


@dataclass
class ReactionParams:
    """Pointwise MLP weights plus optional batch-norm state."""

    r1: Linear
    r2: Linear
    r3: Linear
    bn_gamma: Optional[Variable] = None
    bn_beta: Optional[Variable] = None
    bn_state: Optional[BatchNormState] = None

    @classmethod
    def init(cls, c: int, rng: np.random.Generator, use_batchnorm: bool = False,
             name: str = "react") -> "ReactionParams":
        params = cls(
            r1=Linear.init(c, c, rng, bias=True, name=f"{name}.r1"),
            r2=Linear.init(c, c, rng, bias=True, name=f"{name}.r2"),
            r3=Linear.init(c, c, rng, bias=True, name=f"{name}.r3"),
        )
        if use_batchnorm:
            params.bn_gamma = Variable(np.ones(c), requires_grad=True, name=f"{name}.bn_gamma")
            params.bn_beta = Variable(np.zeros(c), requires_grad=True, name=f"{name}.bn_beta")
            params.bn_state = BatchNormState.zeros(c)
        return params

    @property
    def use_batchnorm(self) -> bool:
        return self.bn_gamma is not None

    def parameters(self) -> list[Variable]:
        out = self.r1.parameters() + self.r2.parameters() + self.r3.parameters()
        if self.use_batchnorm:
            out += [self.bn_gamma, self.bn_beta]
        return out


@dataclass
class AdrLayerParams:
    advection: AdvectionParams
    diffusion: DiffusionParams
    reaction: ReactionParams

    @classmethod
    def init(cls, c: int, rng: np.random.Generator, use_batchnorm: bool = False,
             name: str = "layer") -> "AdrLayerParams":
        return cls(
            advection=AdvectionParams.init(c, rng, name=f"{name}.adv"),
            diffusion=DiffusionParams.init(c, name=f"{name}.diff"),
            reaction=ReactionParams.init(c, rng, use_batchnorm, name=f"{name}.react"),
        )


@dataclass
class EdgeVelocities:
    """Per-directed-edge, per-channel transport weights in the graph's edge
    order; outbound weights of every non-isolated node sum to 1 per channel."""

    values: Variable


# ---------------------------------------------------------------------------
# advection

def edge_velocities(g: Graph, u, params: AdvectionParams,
                    return_prenorm: bool = False):
    """Learn directional edge weights from node features.

    For each directed edge (i, j): z_ij = ReLU(u_i a1 + u_j a2) a3, and the
    pre-normalization weight is ReLU(z_ij - z_ji) a4 (so at most one of the
    two orientations is nonzero per channel before a4). A channel-wise
    softmax over each node's outbound edges produces the final weights.

    a1 and a2 are applied on node rows and gathered onto edges (the maps
    commute with row selection), which keeps the dense work node-sized.
    """
    u = ad._as_variable(u)
    a1_u = params.a1(u)
    a2_u = params.a2(u)
    edge_pre = ad.add(ad.fixed_sparse_matmul(*g.edge_selector("src"), a1_u),
                      ad.fixed_sparse_matmul(*g.edge_selector("dst"), a2_u))
    z = params.a3(ad.relu(edge_pre))
    z_rev = ad.fixed_sparse_matmul(*g.edge_selector("rev"), z)
    asym = ad.relu(ad.subtract(z, z_rev))
    pre = params.a4(asym)
    v = ad.segment_softmax(pre, g.edge_src, g.n_nodes, indptr=g.out_indptr,
                           selector=g.edge_selector("src"))
    if return_prenorm:
        asym_rev = ad.relu(ad.subtract(z_rev, z))
        return EdgeVelocities(v), asym, asym_rev
    return EdgeVelocities(v)


def divergence(g: Graph, v: EdgeVelocities, u) -> Variable:
    """Net transport into each node: the inbound velocity-weighted neighbor
    sum minus the node's own features. Isolated nodes get zero rows."""
    u = ad._as_variable(u)
    if v.values.value.shape[0] != g.n_edges:
        raise ValueError(
            f"divergence: {v.values.value.shape[0]} edge rows for graph with {g.n_edges} edges")
    u_src = ad.fixed_sparse_matmul(*g.edge_selector("src"), u)
    gather_dst, scatter_dst = g.edge_selector("dst")
    inbound = ad.fixed_sparse_matmul(scatter_dst, gather_dst,
                                     ad.hadamard(v.values, u_src))
    outflow = ad.hadamard(u, (~g.isolated).astype(float)[:, None])
    return ad.subtract(inbound, outflow)


def advect(g: Graph, u, v: EdgeVelocities, h: float,
           allow_unstable: bool = False) -> Variable:
    """Forward Euler transport step u + h * DIV(v, u); mass conserving and
    stable for h in (0, 1]."""
    if (h <= 0 or h > 1) and not allow_unstable:
        raise ValueError(f"advect: h={h} outside (0, 1]; pass allow_unstable to override")
    if (h <= 0 or h > 1) and allow_unstable:
        logger.warning("advect: h=%s outside the stable range (0, 1]", h)
    u = ad._as_variable(u)
    return ad.add(u, ad.scale_by_scalar(divergence(g, v, u), h))


def advection_matrix(g: Graph, v: EdgeVelocities, h: float, channel: int,
                     dense_limit: int = 200) -> np.ndarray:
    """Dense one-channel transport matrix A with A @ u = advect(u).

    A = (1-h) I + h M with M[dst, src] = v[src->dst]; isolated nodes get
    A_ii = 1. Column stochastic and nonnegative for h in (0, 1].
    """
    if g.n_nodes > dense_limit:
        raise ValueError(f"advection_matrix: n={g.n_nodes} exceeds dense limit {dense_limit}")
    vals = v.values.value[:, channel]
    m = np.zeros((g.n_nodes, g.n_nodes))
    np.add.at(m, (g.edge_dst, g.edge_src), vals)
    diag = np.where(g.isolated, 1.0, 1.0 - h)
    return np.diag(diag) + h * m


def spectral_radius_estimate(a: np.ndarray, tol: float = 1e-13,
                             max_iter: int = 200_000, seed: int = 0) -> float:
    """Power-iteration estimate of the spectral radius of a dense matrix.

    Iterates v <- Av/||Av|| from a positive start until the norm-growth
    estimate stabilizes; slow-mixing transport chains need many iterations
    before the estimate settles at the Perron value.
    """
    v = philox(seed).uniform(0.5, 1.0, a.shape[0])
    v /= np.linalg.norm(v)
    estimate = np.inf
    for _ in range(max_iter):
        av = a @ v
        norm = np.linalg.norm(av)
        if norm == 0.0:
            return 0.0
        if abs(norm - estimate) <= tol:
            return float(norm)
        estimate = norm
        v = av / norm
    return float(estimate)


# ---------------------------------------------------------------------------
# diffusion

def diffuse(g: Graph, u, params: DiffusionParams, h: float,
            cg_iterations: int = 5, cg_tol: float = 1e-10,
            explicit: bool = False) -> Variable:
    """Diffusion step with per-channel coefficients kappa = hardtanh(theta, 0, 1).

    Default is the unconditionally stable implicit Euler step, a CG solve of
    (I + h*kappa_c*L)u_c = u_c per channel. ``explicit=True`` switches to the
    forward Euler step u - h*L u K (small h only; kept for the splitting and
    ablation studies).
    """
    u = ad._as_variable(u)
    if u.value.shape[0] != g.n_nodes:
        raise ValueError(f"diffuse: feature rows {u.value.shape[0]} != n_nodes {g.n_nodes}")
    kappa = params.effective()
    if explicit:
        lap_u = LaplacianOp(g)(u)
        return ad.subtract(u, ad.scale_by_scalar(ad.hadamard(lap_u, kappa), h))
    return ad.cg_solve(lambda x: laplacian_apply(g, x), u, kappa, h,
                       iterations=cg_iterations, tol=cg_tol)


class LaplacianOp:
    """Tape-aware normalized-Laplacian application (self-adjoint, constant)."""

    def __init__(self, g: Graph):
        self.g = g

    def __call__(self, u) -> Variable:
        u = ad._as_variable(u)
        g_ref = self.g

        def bwd(grad):
            return (laplacian_apply(g_ref, grad),)  # L is symmetric

        return ad._emit(laplacian_apply(g_ref, u.value), (u,), bwd)


# ---------------------------------------------------------------------------
# reaction

def react(u, u0, params: ReactionParams, h: float, train: bool = False) -> Variable:
    """Pointwise update u + h * sigma(u r1 + tanh(u r2) (.) u + u0 r3).

    sigma is ReLU, optionally preceded by batch normalization. No cross-node
    mixing: output row i depends only on rows i of u and u0.
    """
    u, u0 = ad._as_variable(u), ad._as_variable(u0)
    if u.value.shape != u0.value.shape:
        raise ValueError(f"react: u shape {u.value.shape} != u0 shape {u0.value.shape}")
    pre = ad.add(ad.add(params.r1(u), ad.hadamard(ad.tanh(params.r2(u)), u)),
                 params.r3(u0))
    if params.use_batchnorm:
        pre = ad.batch_norm(pre, params.bn_gamma, params.bn_beta, params.bn_state, train)
    return ad.add(u, ad.scale_by_scalar(ad.relu(pre), h))


# ---------------------------------------------------------------------------
# operator-split layer

@dataclass
class AdrLayerStages:
    velocities: Optional[EdgeVelocities]
    after_advection: Variable
    after_diffusion: Variable
    output: Variable


def adr_layer(g: Graph, u, u0, params: AdrLayerParams, h: float,
              cg_iterations: int = 5, cg_tol: float = 1e-10,
              train: bool = False, terms: str = "ADR",
              velocity_features=None, diagnostics: bool = False):
    """One operator-split step: advection, then implicit diffusion, then
    reaction. ``terms`` selects the active subset (inactive terms are the
    identity); ``velocity_features`` optionally computes edge velocities
    from features other than ``u`` (the temporal model's history pathway).
    """
    terms = terms.upper()
    if not terms or any(t not in "ADR" for t in terms):
        raise ValueError(f"adr_layer: terms must be a non-empty subset of 'ADR', got {terms!r}")
    u = ad._as_variable(u)
    velocities = None
    if "A" in terms:
        vel_in = u if velocity_features is None else ad._as_variable(velocity_features)
        velocities = edge_velocities(g, vel_in, params.advection)
        u_adv = advect(g, u, velocities, h)
    else:
        u_adv = u
    if "D" in terms:
        u_diff = diffuse(g, u_adv, params.diffusion, h, cg_iterations, cg_tol)
    else:
        u_diff = u_adv
    if "R" in terms:
        out = react(u_diff, u0, params.reaction, h, train=train)
    else:
        out = u_diff
    if diagnostics:
        return out, AdrLayerStages(velocities, u_adv, u_diff, out)
    return out


# ---------------------------------------------------------------------------
# operator-splitting discrepancy study

def matrix_exponential(a: np.ndarray) -> np.ndarray:
    """Scaling-and-squaring matrix exponential with a truncated Taylor
    series (dense, small matrices)."""
    a = np.asarray(a, dtype=np.float64)
    norm = np.linalg.norm(a, ord=np.inf)
    squarings = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0.5 else 0
    b = a / (2.0 ** squarings)
    result = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, 40):
        term = term @ b / k
        result = result + term
        if np.linalg.norm(term, ord=np.inf) < 1e-18 * max(1.0, np.linalg.norm(result, ord=np.inf)):
            break
    for _ in range(squarings):
        result = result @ result
    return result


def splitting_error_study(a: np.ndarray, d: np.ndarray, r: np.ndarray,
                          dt: float, u: np.ndarray) -> float:
    """Norm of the gap between the exact propagator exp(dt(A+D+R)) applied
    to u and the sequential split exp(dt R) exp(dt D) exp(dt A) u.

    Zero for commuting operators; O(dt^2) otherwise.
    """
    a, d, r = (np.asarray(m, dtype=np.float64) for m in (a, d, r))
    u = np.asarray(u, dtype=np.float64)
    if not (a.shape == d.shape == r.shape) or a.shape[0] != a.shape[1]:
        raise ValueError("splitting_error_study: A, D, R must be equal square matrices")
    if a.shape[0] > 50:
        raise ValueError("splitting_error_study: dense study limited to n <= 50")
    exact = matrix_exponential(dt * (a + d + r)) @ u
    split = matrix_exponential(dt * r) @ (matrix_exponential(dt * d)
                                          @ (matrix_exponential(dt * a) @ u))
    return float(np.linalg.norm(exact - split))
