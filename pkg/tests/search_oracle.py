"""Brute-force allocation oracle shared by the search tests and the acceptance run."""

import itertools

import numpy as np

from mpqdm2 import quantizer as qz
from mpqdm2.mpq_search import apply_channel, fit_channel, partition_groups, rank_channels


def exhaustive_allocation(w, x, n, g, act_bits=4):
    """Every {n-1, n, n+1} group assignment meeting the budget, scored directly.

    Each group's mode is picked by comparing its own output error under both
    modes (ties to joint).  Returns (best objective, best bits, uniform objective).
    """
    sc = qz.compute_prescale(w, x)
    w_hat = sc.scale_weight(w)
    x_hat = sc.scale_activations(x)
    xq = qz.quantize_uniform(x_hat, qz.fit_uniform(x_hat, act_bits))
    y = x @ w.T
    c = w.shape[1]
    groups = [list(gr.channels) for gr in partition_groups(rank_channels(w_hat), g)]

    cols = {}

    def col(j, tiers, mode):
        key = (j, tiers, mode)
        if key not in cols:
            q = fit_channel(w_hat[:, j], n - 1, tiers, mode)
            cols[key] = apply_channel(w_hat[:, j], q, tiers)
        return cols[key]

    def group_cols(idx, tiers):
        if tiers == 0:
            return np.stack([col(j, 0, qz.JOINT) for j in idx], axis=1)
        target = x[:, idx] @ w[:, idx].T
        best = None
        for mode in (qz.JOINT, qz.SEPARATE):
            wq = np.stack([col(j, tiers, mode) for j in idx], axis=1)
            err = float(np.sum((target - xq[:, idx] @ wq.T) ** 2))
            if best is None or err < best[0] - 1e-12 * max(float(np.sum(target**2)), 1e-300):
                best = (err, wq)
        return best[1]

    best_obj, best_bits, uniform_obj = np.inf, None, None
    for offs in itertools.product((-1, 0, 1), repeat=len(groups)):
        if sum(len(idx) * o for idx, o in zip(groups, offs)) != 0:
            continue
        wq = np.zeros_like(w_hat)
        bits = np.zeros(c, dtype=int)
        for idx, o in zip(groups, offs):
            wq[:, idx] = group_cols(idx, o + 1)
            bits[idx] = n + o
        obj = float(np.sum((y - xq @ wq.T) ** 2))
        if all(o == 0 for o in offs):
            uniform_obj = obj
        if obj < best_obj:
            best_obj, best_bits = obj, bits
    return best_obj, best_bits, uniform_obj


def outlier_layer(rng, c_out, c_in, outlier_cols=(), scale=12.0):
    w = rng.normal(size=(c_out, c_in))
    for j in outlier_cols:
        w[rng.integers(0, c_out), j] = scale * (1 if rng.uniform() < 0.5 else -1)
    x = rng.normal(size=(64, c_in))
    return w, x
