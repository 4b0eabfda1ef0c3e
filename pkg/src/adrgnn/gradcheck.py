"""Finite-difference verification of every backward rule, runnable as a
suite (the `gradcheck` CLI subcommand exits nonzero on any failure)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tape, Variable, backward
from .graph import erdos_renyi, laplacian_apply
from .models import (AdrGnnStatic, AdrGnnTemporal, broadcast_time_embedding,
                     time_embedding)
from .operators import AdrLayerParams, adr_layer
from .runtime import philox

PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4
FD_STEP = 1e-6


def relative_gradient_error(build_loss: Callable[[], Variable],
                            wrt: list[Variable], step: float = FD_STEP) -> float:
    """Max over parameters of ||grad_ad - grad_fd||_inf / max(||grad_fd||_inf, 1e-6),
    with central differences of the re-evaluated loss."""
    for p in wrt:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    backward(tape, loss)
    worst = 0.0
    for p in wrt:
        fd = np.zeros_like(p.value)
        flat = p.value.ravel()
        fd_flat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(build_loss().value)
            flat[i] = orig - step
            down = float(build_loss().value)
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * step)
        denom = max(np.abs(fd).max(), 1e-6)
        worst = max(worst, float(np.abs(p.grad - fd).max() / denom))
    return worst


def _weighted_sum(out: Variable, rng: np.random.Generator) -> Variable:
    w = Variable(rng.standard_normal(out.value.shape))
    return ad.total_sum(ad.hadamard(out, w))


def primitive_checks(seed: int = 0) -> list[dict]:
    rng = philox(seed)
    g = erdos_renyi(6, 0.6, seed=seed + 1)
    n, c = 6, 3
    x = Variable(rng.standard_normal((n, c)) + 0.1, requires_grad=True)
    y = Variable(rng.standard_normal((n, c)) + 0.05, requires_grad=True)
    w = Variable(rng.standard_normal((c, c)), requires_grad=True)
    bias = Variable(rng.standard_normal(c), requires_grad=True)
    edge_vals = Variable(rng.standard_normal((g.n_edges, c)), requires_grad=True)
    labels = rng.integers(0, c, size=n)
    mask = np.ones(n, dtype=bool)
    mask[0] = False
    target = rng.standard_normal((n, c))
    gamma = Variable(rng.uniform(0.5, 1.5, c), requires_grad=True)
    beta = Variable(rng.standard_normal(c), requires_grad=True)
    bn_state = BatchNormState.zeros(c)

    cases = {
        "matmul": (lambda: _weighted_sum(ad.matmul(x, w), philox(seed + 3)), [x, w]),
        "add": (lambda: _weighted_sum(ad.add(x, bias), philox(seed + 4)), [x, bias]),
        "subtract": (lambda: _weighted_sum(ad.subtract(x, y), philox(seed + 5)), [x, y]),
        "hadamard": (lambda: _weighted_sum(ad.hadamard(x, y), philox(seed + 6)), [x, y]),
        "scale_by_scalar": (lambda: _weighted_sum(ad.scale_by_scalar(x, 0.37), philox(seed + 7)), [x]),
        "relu": (lambda: _weighted_sum(ad.relu(x), philox(seed + 8)), [x]),
        "tanh": (lambda: _weighted_sum(ad.tanh(x), philox(seed + 9)), [x]),
        "hardtanh": (lambda: _weighted_sum(ad.hardtanh(x, 0.0, 1.0), philox(seed + 10)), [x]),
        "dropout": (lambda: _weighted_sum(ad.dropout(x, 0.4, True, 123), philox(seed + 11)), [x]),
        "row_gather": (lambda: _weighted_sum(ad.row_gather(x, g.edge_src), philox(seed + 12)), [x]),
        "slice_columns": (lambda: _weighted_sum(ad.slice_columns(x, 1, 3), philox(seed + 13)), [x]),
        "concat_columns": (lambda: _weighted_sum(ad.concat_columns([x, y]), philox(seed + 14)), [x, y]),
        "segment_sum": (lambda: _weighted_sum(
            ad.segment_sum(edge_vals, g.edge_dst, n), philox(seed + 15)), [edge_vals]),
        "segment_softmax": (lambda: _weighted_sum(
            ad.segment_softmax(edge_vals, g.edge_src, n), philox(seed + 16)), [edge_vals]),
        "total_sum": (lambda: ad.total_sum(x), [x]),
        "batch_norm_train": (lambda: _weighted_sum(
            ad.batch_norm(x, gamma, beta, bn_state, train=True), philox(seed + 17)),
            [x, gamma, beta]),
        "batch_norm_eval": (lambda: _weighted_sum(
            ad.batch_norm(x, gamma, beta, bn_state, train=False), philox(seed + 18)),
            [x, gamma, beta]),
        "cross_entropy": (lambda: ad.cross_entropy(x, labels, mask), [x]),
        "mse": (lambda: ad.mse(x, target, mask), [x]),
        "mae": (lambda: ad.mae(x, target, mask), [x]),
    }
    results = []
    for name, (build, wrt) in cases.items():
        err = relative_gradient_error(build, wrt)
        results.append({"check": name, "max_rel_err": err, "tol": PRIMITIVE_TOL,
                        "passed": err <= PRIMITIVE_TOL})
    return results


def cg_check(seed: int = 0) -> list[dict]:
    g = erdos_renyi(7, 0.6, seed=seed + 20)
    rng = philox(seed + 21)
    rhs = Variable(rng.standard_normal((7, 2)), requires_grad=True)
    kappa = Variable(rng.uniform(0.2, 0.9, 2), requires_grad=True)

    def build():
        out = ad.cg_solve(lambda v: laplacian_apply(g, v), rhs, kappa, h=0.8,
                          iterations=200, tol=1e-13)
        return _weighted_sum(out, philox(seed + 22))

    err = relative_gradient_error(build, [rhs, kappa])
    return [{"check": "cg_solve", "max_rel_err": err, "tol": PRIMITIVE_TOL,
             "passed": err <= PRIMITIVE_TOL}]


def layer_check(seed: int = 0) -> list[dict]:
    g = erdos_renyi(5, 0.7, seed=seed + 30)
    rng = philox(seed + 31)
    c = 2
    params = AdrLayerParams.init(c, rng)
    u = Variable(rng.standard_normal((5, c)), requires_grad=True)
    u0 = Variable(rng.standard_normal((5, c)), requires_grad=True)

    def build():
        out = adr_layer(g, u, u0, params, h=0.6, cg_iterations=100, cg_tol=1e-13)
        return _weighted_sum(out, philox(seed + 32))

    wrt = ([u, u0] + params.advection.parameters() + params.diffusion.parameters()
           + params.reaction.parameters())
    err = relative_gradient_error(build, wrt)
    return [{"check": "adr_layer", "max_rel_err": err, "tol": MODEL_TOL,
             "passed": err <= MODEL_TOL}]


def model_checks(seed: int = 0) -> list[dict]:
    results = []
    g = erdos_renyi(5, 0.7, seed=seed + 40)
    rng = philox(seed + 41)
    x = rng.standard_normal((5, 3))
    static = AdrGnnStatic.init(c_in=3, c_out=2, hidden=2, layers=2, h=0.5,
                               cg_iterations=100, seed=seed + 42)
    labels = rng.integers(0, 2, size=5)

    def build_static():
        return ad.cross_entropy(static.forward(g, x, train=False), labels)

    params = list(static.named_parameters().values())
    err = relative_gradient_error(build_static, params)
    results.append({"check": "forward_static", "max_rel_err": err, "tol": MODEL_TOL,
                    "passed": err <= MODEL_TOL})

    g4 = erdos_renyi(4, 0.8, seed=seed + 43)
    tau_in = 2
    temporal = AdrGnnTemporal.init(c_in=1, c_out=1, hidden=2, layers=2, h=0.5,
                                   tau_in=tau_in, tau_out=1, n_frequencies=2,
                                   cg_iterations=100, seed=seed + 44)
    xt = philox(seed + 45).standard_normal((4, tau_in))
    emb = broadcast_time_embedding(time_embedding([0.0, 1.0], 2), 4)
    target = philox(seed + 46).standard_normal((4, 1))

    def build_temporal():
        return ad.mse(temporal.forward(g4, xt, emb, train=False), target)

    params = list(temporal.named_parameters().values())
    err = relative_gradient_error(build_temporal, params)
    results.append({"check": "forward_temporal", "max_rel_err": err, "tol": MODEL_TOL,
                    "passed": err <= MODEL_TOL})
    return results


def run_all_checks(seed: int = 0) -> list[dict]:
    return (primitive_checks(seed) + cg_check(seed) + layer_check(seed)
            + model_checks(seed))
