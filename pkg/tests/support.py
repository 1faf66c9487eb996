"""Shared test helpers: brute-force oracles and synthetic data generators.

The oracles enumerate tensors exhaustively and stay independent of the
library's fast paths, so they can vouch for them.
"""

from __future__ import annotations

import itertools

import numpy as np

from itals import SparseTensor, init_model


def enumerate_cells(sizes):
    return itertools.product(*[range(s) for s in sizes])


def random_instance(
    rng,
    ndim=None,
    k=None,
    wt=100.0,
    w0=1.0,
    cover_all_entities=False,
    max_size=5,
):
    """Small random (model, tensor) pair for oracle comparisons.

    ``cover_all_entities`` guarantees every entity of every dimension has at
    least one observed cell, which keeps unregularized column systems
    nonsingular after earlier dimensions were updated.
    """
    ndim = int(rng.integers(2, 5)) if ndim is None else ndim
    k = int(rng.integers(1, 4)) if k is None else k
    sizes = tuple(int(rng.integers(2, max_size + 1)) for _ in range(ndim))
    all_cells = list(enumerate_cells(sizes))
    n_pos = int(rng.integers(1, max(2, len(all_cells) // 3)))
    chosen = rng.choice(len(all_cells), size=n_pos, replace=False)
    cells = {all_cells[int(c)]: wt for c in chosen}
    if cover_all_entities:
        for e in range(max(sizes)):
            cells[tuple(e % s for s in sizes)] = wt
    tensor = SparseTensor.from_cells(sizes, cells, w0)
    model = init_model(sizes, k, int(rng.integers(0, 2**31)))
    return model, tensor


def dense_column_solution(model, tensor, dim, entity, reg_eff):
    """Weighted ridge solution for one column, over every enumerated cell."""
    k = model.n_features
    a = np.zeros((k, k))
    b = np.zeros(k)
    for idx in enumerate_cells(tensor.sizes):
        if idx[dim] != entity:
            continue
        v = np.ones(k)
        for d in range(model.ndim):
            if d != dim:
                v = v * model.matrices[d][:, idx[d]]
        w = tensor.weight_at(idx)
        t = tensor.value_at(idx)
        a += w * np.outer(v, v)
        b += w * t * v
    return np.linalg.solve(a + reg_eff * np.eye(k), b)


def dense_shared_coeff(model, dim, w0):
    """Exhaustive sum of w0 * v v^T over all other-dimension combinations."""
    k = model.n_features
    other = [d for d in range(model.ndim) if d != dim]
    coeff = np.zeros((k, k))
    for combo in itertools.product(*[range(model.sizes[d]) for d in other]):
        v = np.ones(k)
        for d, j in zip(other, combo):
            v = v * model.matrices[d][:, j]
        coeff += w0 * np.outer(v, v)
    return coeff


def dense_loss(model, tensor, reg):
    """Fully enumerated weighted loss plus the L2 penalty."""
    total = 0.0
    for idx in enumerate_cells(tensor.sizes):
        w = tensor.weight_at(idx)
        t = tensor.value_at(idx)
        total += w * (t - model.predict(idx)) ** 2
    total += reg * sum(float((m * m).sum()) for m in model.matrices)
    return total


def dense_column_gradient(model, tensor, dim, entity, reg_eff):
    """Gradient of the regularized loss w.r.t. one column, by enumeration."""
    k = model.n_features
    grad = np.zeros(k)
    for idx in enumerate_cells(tensor.sizes):
        if idx[dim] != entity:
            continue
        v = np.ones(k)
        for d in range(model.ndim):
            if d != dim:
                v = v * model.matrices[d][:, idx[d]]
        w = tensor.weight_at(idx)
        t = tensor.value_at(idx)
        grad += 2.0 * w * (model.predict(idx) - t) * v
    return grad + 2.0 * reg_eff * model.matrices[dim][:, entity]


def max_column_condition(model, tensor, reg, reg_mode="constant"):
    """Largest condition number over all column systems of all dimensions."""
    from itals.solvers import build_column_system, precompute_shared

    worst = 0.0
    for dim in range(model.ndim):
        shared = precompute_shared(model, dim, tensor.w0)
        for j in range(tensor.sizes[dim]):
            system = build_column_system(model, tensor, dim, j, shared, reg, reg_mode)
            a = system.coeff + system.reg * np.eye(model.n_features)
            worst = max(worst, float(np.linalg.cond(a)))
    return worst


def seasonal_events(
    rng,
    n_users=240,
    n_items=144,
    n_bands=6,
    n_groups=3,
    events_per_user=15,
    noise=0.05,
    total_days=16,
    season=86400,
):
    """Synthetic events whose item preference depends on the time band.

    Items are partitioned into one slice per band, each slice into one block
    per user group; a user draws items from the block of their group in the
    event's band (or uniformly at random with probability ``noise``).
    Returns (tsv_text, split_time) where the last fifth of the span is the
    natural test period.
    """
    band_len = season // n_bands
    slice_len = n_items // n_bands
    block_len = slice_len // n_groups
    assert block_len >= 1, "too many bands/groups for the item count"
    lines = []
    horizon = total_days * season
    for user in range(n_users):
        group = user % n_groups
        stamps = rng.integers(0, horizon, size=events_per_user)
        for ts in np.sort(stamps):
            band = (int(ts) % season) // band_len
            if rng.random() < noise:
                item = int(rng.integers(0, n_items))
            else:
                base = band * slice_len + group * block_len
                item = base + int(rng.integers(0, block_len))
            lines.append(f"u{user}\ti{item}\t{int(ts)}")
    split_time = int(horizon * 0.8)
    return "\n".join(lines) + "\n", split_time
