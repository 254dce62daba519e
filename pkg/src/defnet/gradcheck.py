"""Finite-difference checks of the analytic backward passes.

Each suite returns ``{group: max relative error}``; the relative error of a
group is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` with
Euclidean norms over the whole group, so tiny individual entries cannot
blow the ratio up through rounding noise alone.
"""

from __future__ import annotations

import itertools

import numpy as np

from .defpool import DefPoolConfig, PenaltyBasis, defpool_backward, defpool_forward
from .net import Architecture, Network

DEFPOOL_TOL = 1e-6
NETWORK_TOL = 1e-4


def relative_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradient(f, x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def _random_config(rng, C, R, s, N) -> DefPoolConfig:
    tables = rng.uniform(0, 2, size=(N, 2 * R + 1, 2 * R + 1))
    return DefPoolConfig(s, s, PenaltyBasis(R, tables), rng.uniform(-1, 1, size=(C, N)))


def defpool_suite(eps: float = 1e-5, seed: int = 0, grid=None) -> dict:
    """Input and coefficient gradients over ``R in {0,1,2}``, ``s in {1,2,3}``, ``N in {1,4}``."""
    grid = grid or list(itertools.product([0, 1, 2], [1, 2, 3], [1, 4]))
    worst = {"defpool.input": 0.0, "defpool.coeffs": 0.0}
    for R, s, N in grid:
        rng = np.random.default_rng([seed, R, s, N])
        m = rng.normal(size=(2, 7, 8))
        cfg = _random_config(rng, 2, R, s, N)
        out, rec = defpool_forward(m, cfg)
        w = rng.normal(size=out.shape)
        gm, ga = defpool_backward(w, rec, cfg)

        def loss():
            return float(np.sum(w * defpool_forward(m, cfg)[0]))

        worst["defpool.input"] = max(worst["defpool.input"],
                                     relative_error(gm, numeric_gradient(loss, m, eps)))
        worst["defpool.coeffs"] = max(worst["defpool.coeffs"],
                                      relative_error(ga, numeric_gradient(loss, cfg.coeffs, eps)))
    return worst


def gradcheck_network(eps: float = 1e-5, seed: int = 0) -> dict:
    """Every parameter group of a conv / relu / conv / defpool / linear stack on 1x12x12."""
    arch = Architecture(in_shape=(1, 12, 12), trunk=[["conv", 4, 3], ["relu"]],
                        branches=[[3, 4]], pooling="defpool", radius=1, stride=2, classes=3)
    net = Network(arch, seed)
    rng = np.random.default_rng([seed, 99])
    for path, p in net.parameters():
        if path.endswith(("bias", "coeffs")):
            p[...] = rng.uniform(-0.5, 0.5, size=p.shape)
    x = rng.normal(size=(2, 1, 12, 12))
    w = rng.normal(size=(2, 3))

    def loss():
        return float(np.sum(w * net.forward(x)))

    net.zero_grad()
    net.forward(x)
    net.backward(w)
    analytic = {k: v.copy() for k, v in net.gradients()}
    return {f"network.{path}": relative_error(analytic[path], numeric_gradient(loss, p, eps))
            for path, p in net.parameters()}


def run_all(eps: float = 1e-5, seed: int = 0) -> tuple[dict, bool]:
    """All groups with their error and whether every group is under its tolerance."""
    d = defpool_suite(eps, seed)
    n = gradcheck_network(eps, seed)
    ok = all(v < DEFPOOL_TOL for v in d.values()) and all(v < NETWORK_TOL for v in n.values())
    return {**d, **n}, ok
