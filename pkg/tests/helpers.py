"""Shared test utilities: independent brute-force oracles and instance
generators.  The oracles deliberately avoid the library's backward passes:
they enumerate descendant leaves directly, so the two routes stay
independent."""

from __future__ import annotations

import numpy as np

from impact_bsde import MarketConfig, TableDemand, TableDividend


def leaf_block(leaves: np.ndarray, step: int, path: int, num_steps: int) -> np.ndarray:
    """All leaf rows below node (step, path)."""
    width = 1 << (num_steps - step)
    return leaves[path * width:(path + 1) * width]


def oracle_conditional_mean(leaves: np.ndarray, step: int, path: int,
                            num_steps: int):
    """Conditional expectation at a node by direct leaf enumeration."""
    return leaf_block(np.asarray(leaves), step, path, num_steps).mean(axis=0)


def oracle_conditional_moment(leaves: np.ndarray, node_value, step: int, path: int,
                              num_steps: int, power: float = 2.0) -> float:
    """E_node[|X - node_value|^p] by direct leaf enumeration."""
    rows = leaf_block(leaves if leaves.ndim == 2 else leaves[:, None],
                      step, path, num_steps)
    node_value = np.atleast_1d(np.asarray(node_value, dtype=float))
    dist = np.linalg.norm(rows - node_value, axis=1)
    return float(np.mean(dist ** power))


def _unit_ball_rows(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    """Uniform draws renormalized so every row's Euclidean norm is <= scale."""
    rows = rng.uniform(-scale, scale, size=shape)
    mags = np.linalg.norm(rows, axis=-1, keepdims=True)
    return rows / np.maximum(1.0, mags / scale)


def random_table_config(rng: np.random.Generator, num_steps: int, num_stocks: int = 1,
                        a_lo: float = 0.05, a_hi: float = 1.0,
                        gamma_scale: float = 1.0, psi_scale: float = 1.0,
                        horizon: float = 1.0, center: bool = False) -> MarketConfig:
    """Random instance with table demand and dividend, per-node Euclidean
    norms bounded by the given scales."""
    demand = TableDemand([
        _unit_ball_rows(rng, (1 << k, num_stocks), gamma_scale)
        for k in range(num_steps)
    ])
    psi = _unit_ball_rows(rng, (1 << num_steps, num_stocks), psi_scale)
    return MarketConfig(
        risk_aversion=float(rng.uniform(a_lo, a_hi)),
        num_stocks=num_stocks,
        demand=demand,
        dividend=TableDividend(psi),
        num_steps=num_steps,
        horizon=horizon,
        center_dividend=center,
    )


def max_gap(proc_a, proc_b, scale_b: float = 1.0) -> float:
    """Node max of |a - scale * b| across two slice lists or processes."""
    va = proc_a.values if hasattr(proc_a, "values") else proc_a
    vb = proc_b.values if hasattr(proc_b, "values") else proc_b
    return max(float(np.max(np.abs(x - scale_b * y))) for x, y in zip(va, vb))


def equilibrium_defects(sol):
    """Worst relative martingale defects of an equilibrium solution: the
    density under the reference weights, prices and gain under the pricing
    weights."""
    from impact_bsde import martingale_defect

    lat = sol.lattice
    z_def = martingale_defect(sol.density)[0]
    s_def = 0.0
    g_def = 0.0
    for k in range(lat.num_steps):
        q = sol.up_prob.values[k][:, None]
        s, sn = sol.prices.values[k], sol.prices.values[k + 1]
        gap = np.linalg.norm(q * sn[0::2] + (1 - q) * sn[1::2] - s, axis=1)
        s_def = max(s_def, float(np.max(gap / np.maximum(1.0, np.linalg.norm(s, axis=1)))))
        qf = sol.up_prob.values[k]
        g, gn = sol.gain.values[k], sol.gain.values[k + 1]
        ggap = np.abs(qf * gn[0::2] + (1 - qf) * gn[1::2] - g)
        g_def = max(g_def, float(np.max(ggap / np.maximum(1.0, np.abs(g)))))
    return z_def, s_def, g_def
