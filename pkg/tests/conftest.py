from __future__ import annotations

import numpy as np
import pytest

from adrgnn.autodiff import Tape, Variable, backward
from adrgnn.graph import build_graph, erdos_renyi
from adrgnn.runtime import philox


@pytest.fixture
def path2():
    """Two nodes joined by one undirected edge."""
    return build_graph([(0, 1)], 2)


@pytest.fixture
def rng():
    return philox(1234)


def fd_gradient(loss_fn, variables, eps: float = 1e-6):
    """Independent central-difference oracle: loss_fn() -> Variable (scalar),
    re-evaluated around each coordinate of each listed Variable."""
    grads = []
    for var in variables:
        flat = var.value.ravel()
        out = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().value)
            flat[i] = orig - eps
            down = float(loss_fn().value)
            flat[i] = orig
            out[i] = (up - down) / (2 * eps)
        grads.append(out.reshape(var.value.shape))
    return grads


def ad_gradient(loss_fn, variables):
    """Gradients from one taped forward/backward pass."""
    for var in variables:
        var.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    return [var.grad.copy() for var in variables]


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-6))


def check_grads(loss_fn, variables, tol):
    ad_grads = ad_gradient(loss_fn, variables)
    fd_grads = fd_gradient(loss_fn, variables)
    for got, want in zip(ad_grads, fd_grads):
        assert max_rel_err(got, want) <= tol


def random_velocities(graph, c: int, seed: int) -> np.ndarray:
    """Valid random edge velocities: positive with unit outbound sums."""
    gen = philox(seed)
    raw = gen.uniform(0.05, 1.0, size=(graph.n_edges, c))
    sums = np.zeros((graph.n_nodes, c))
    np.add.at(sums, graph.edge_src, raw)
    return raw / sums[graph.edge_src]
