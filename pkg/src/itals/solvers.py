"""Training: alternating least squares with exact, CD, and CG column solvers.

The model minimizes the confidence-weighted squared error between the binary
preference tensor and its reconstruction, plus an L2 penalty. Fixing all
matrices but one makes the problem convex and separable per column, and each
column solves a K x K ridge system. The trick that keeps an epoch linear in
the number of observed cells: the combined contribution of all unobserved
cells to every column system is the same matrix, the baseline weight times
the Hadamard product of the other dimensions' Gram matrices, so it is
computed once per dimension and only observed cells are visited per column.

Three per-column solvers are provided:

- ``als``: exact solve via Cholesky factorization.
- ``cd``: cyclic coordinate descent over a compressed example set. The
  unobserved cells are first compressed into K+1 synthetic examples by
  Cholesky-factorizing the shared system matrix.
- ``cg``: preconditioned conjugate gradient; the system matrix is applied
  implicitly and never materialized per column.

Column systems within one dimension update are independent (parallelism, if
any, comes from the underlying BLAS); Gram refresh is a barrier at the end of
each dimension. Training calls are not reentrant on the same model.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from .data import EventLog, SparseTensor, build_tensor
from .model import FactorModel, init_model

_JITTER = 1e-10
_JITTER_ATTEMPTS = 3


class SolverDivergence(RuntimeError):
    """Non-finite values appeared during training."""

    def __init__(self, message: str, dimension: int | None = None, column: int | None = None):
        super().__init__(message)
        self.dimension = dimension
        self.column = column


class SingularSystemError(RuntimeError):
    """A column system could not be factorized."""


@dataclass
class TrainConfig:
    """Training parameters shared by all solvers.

    ``reg`` is the base L2 coefficient; with ``reg_mode='support'`` each
    column's effective coefficient is ``reg * (1 + n_positives)``, i.e.
    proportional to the entity's support, while ``'constant'`` uses ``reg``
    as-is. ``inner_iters`` is the sweep/iteration count of the approximate
    solvers. ``p0`` is the preference value attributed to unobserved cells
    when compressing them for CD (0 by default). ``w0``, when set, must
    match the tensor's baseline weight; it also parameterizes tensors built
    internally (the per-context baseline).
    """

    solver: str = "cg"
    epochs: int = 10
    reg: float = 0.01
    reg_mode: str = "support"
    inner_iters: int = 2
    w0: float | None = None
    p0: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.solver not in ("als", "cd", "cg"):
            raise ValueError(f"unknown solver: {self.solver!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.reg < 0:
            raise ValueError("reg must be >= 0")
        if self.reg_mode not in ("constant", "support"):
            raise ValueError("reg_mode must be 'constant' or 'support'")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")


@dataclass
class ColumnSystem:
    """Normal equations for one column: ``(coeff + reg I) x = rhs``."""

    coeff: np.ndarray
    rhs: np.ndarray
    reg: float


@dataclass
class CompressedNegatives:
    """The unobserved cells of one dimension update, as K+1 examples.

    ``examples`` columns are synthetic inputs, ``outputs`` their targets;
    stacking ``outputs`` under ``examples`` reconstructs the Cholesky factor
    of the augmented shared matrix.
    """

    examples: np.ndarray
    outputs: np.ndarray
    base_weight: float


def gram(matrix: np.ndarray) -> np.ndarray:
    """``M @ M.T``: the K x K second-moment matrix of a factor matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    return matrix @ matrix.T


def _effective_reg(reg: float, reg_mode: str, n_positives: int) -> float:
    if reg_mode == "support":
        return reg * (1.0 + n_positives)
    return reg


def precompute_shared(model: FactorModel, dim: int, w0: float) -> tuple[np.ndarray, np.ndarray]:
    """Shared part of every column system of dimension ``dim``.

    Returns ``(coeff, rhs)`` where ``coeff`` is ``w0`` times the Hadamard
    product of all Gram matrices except dimension ``dim`` — the exact sum of
    ``w0 * v v^T`` over every combination of the other dimensions' columns —
    and ``rhs`` is zero because unobserved cells have target zero.
    """
    k = model.n_features
    coeff = np.full((k, k), float(w0))
    for d in range(model.ndim):
        if d != dim:
            coeff *= model.grams[d]
    return coeff, np.zeros(k)


def _cell_vectors(model: FactorModel, tensor: SparseTensor, dim: int, rows: np.ndarray) -> np.ndarray:
    """Hadamard products of the other dimensions' columns, one per cell."""
    v = np.ones((model.n_features, rows.size))
    idx = tensor.indices
    for d in range(model.ndim):
        if d != dim:
            v *= model.matrices[d][:, idx[rows, d]]
    return v


def build_column_system(
    model: FactorModel,
    tensor: SparseTensor,
    dim: int,
    entity: int,
    shared: tuple[np.ndarray, np.ndarray],
    reg: float,
    reg_mode: str = "support",
) -> ColumnSystem:
    """Full normal equations for one column of dimension ``dim``.

    Starting from the shared part, every observed cell of ``entity`` adds
    its excess weight ``w - w0`` to the coefficient matrix and its full
    weight ``w`` (target 1) to the right-hand side. Solving
    ``(coeff + reg I) x = rhs`` therefore reproduces the weighted ridge
    solution over the fully enumerated tensor.
    """
    shared_coeff, shared_rhs = shared
    rows = tensor.rows_for(dim, entity)
    reg_eff = _effective_reg(reg, reg_mode, rows.size)
    if rows.size == 0:
        return ColumnSystem(shared_coeff.copy(), shared_rhs.copy(), reg_eff)
    v = _cell_vectors(model, tensor, dim, rows)
    wts = tensor.weights[rows]
    coeff = shared_coeff + (v * (wts - tensor.w0)) @ v.T
    rhs = shared_rhs + v @ wts
    return ColumnSystem(coeff, rhs, reg_eff)


def _solve_spd(coeff: np.ndarray, rhs: np.ndarray, reg: float) -> np.ndarray:
    """Cholesky solve of ``(coeff + reg I) x = rhs`` with jitter retries.

    With ``reg > 0`` the matrix is positive definite by construction, so a
    factorization failure is rounding noise and a little diagonal jitter
    fixes it. With ``reg == 0`` a failure means the system is genuinely
    singular and jitter would only hide it.
    """
    a = coeff.copy()
    if reg:
        a[np.diag_indices_from(a)] += reg
    if not np.isfinite(a).all() or not np.isfinite(rhs).all():
        raise SolverDivergence("non-finite column system")
    attempts = _JITTER_ATTEMPTS if reg > 0 else 0
    for attempt in range(attempts + 1):
        try:
            return cho_solve(cho_factor(a, lower=True), rhs)
        except LinAlgError:
            a[np.diag_indices_from(a)] += _JITTER
    raise SingularSystemError(
        "column system is singular; set the regularization coefficient above zero"
    )


def als_update_dimension(
    model: FactorModel,
    tensor: SparseTensor,
    dim: int,
    config: TrainConfig,
    column_hook: Callable[[int, np.ndarray], None] | None = None,
) -> None:
    """Exact update: every column of dimension ``dim`` is solved in closed form.

    Columns are updated in ascending entity order; the Gram matrix of the
    dimension is recomputed once all columns are in place.
    """
    shared = precompute_shared(model, dim, tensor.w0)
    matrix = model.matrices[dim]
    for j in range(tensor.sizes[dim]):
        system = build_column_system(model, tensor, dim, j, shared, config.reg, config.reg_mode)
        if column_hook is not None:
            column_hook(j, matrix[:, j].copy())
        try:
            matrix[:, j] = _solve_spd(system.coeff, system.rhs, system.reg)
        except SolverDivergence as err:
            raise SolverDivergence(
                f"non-finite values while updating dimension {dim}, column {j}",
                dimension=dim,
                column=j,
            ) from err
    model.refresh_gram(dim)


def solve_weighted_cd(
    examples: np.ndarray,
    outputs: np.ndarray,
    x0: np.ndarray,
    weights: np.ndarray,
    reg: float,
    n_iters: int,
) -> np.ndarray:
    """Cyclic coordinate descent for ``min ||sqrt(w) o (b - A^T x)||^2 + reg ||x||^2``.

    ``examples`` is K x N with one example per column, ``outputs`` and
    ``weights`` have length N. A residual ``r = b - A^T x`` is maintained
    and each coordinate step is the exact one-dimensional minimizer

        dx_j = (A_j^T (w o r) - reg * x_j) / (A_j^T (w o A_j) + reg)

    (``A_j`` the j-th coordinate row across examples), so the objective is
    non-increasing after every sweep. Coordinates whose denominator is zero
    are skipped.

    Raises:
        SolverDivergence: if non-finite values appear.
    """
    a = np.asarray(examples, dtype=np.float64)
    b = np.asarray(outputs, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    x = np.array(x0, dtype=np.float64).copy()
    if a.ndim != 2 or b.shape != (a.shape[1],) or w.shape != b.shape or x.shape != (a.shape[0],):
        raise ValueError("inconsistent system dimensions")
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")

    # Divergence is detected by explicit finiteness checks, so numpy's
    # warnings about the offending intermediates are just noise here.
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        wa = a * w
        denom = np.einsum("ij,ij->i", wa, a) + reg
        r = b - a.T @ x
        if not (np.isfinite(denom).all() and np.isfinite(r).all()):
            raise SolverDivergence("non-finite values in coordinate-descent system")
        for _ in range(n_iters):
            for j in range(x.size):
                if denom[j] <= 0.0:
                    continue
                delta = (wa[j] @ r - reg * x[j]) / denom[j]
                x[j] += delta
                r -= delta * a[j]
            if not (np.isfinite(x).all() and np.isfinite(r).all()):
                raise SolverDivergence("coordinate descent diverged (non-finite values)")
    return x


def compress_negatives(
    coeff: np.ndarray,
    rhs: np.ndarray,
    p0: float,
    s_product: float,
) -> CompressedNegatives:
    """Compress all unobserved cells of a dimension update into K+1 examples.

    The shared coefficient matrix is augmented with the shared right-hand
    side (right and bottom) and the corner value ``p0 * s_product``, then
    Cholesky-factorized. The factor's columns are the compressed examples:
    first K coordinates are the input, the last is its target. With the
    default zero right-hand side and ``p0 = 0``, the targets are exactly
    zero and the factorization reduces to that of the coefficient block.

    Raises:
        SingularSystemError: if the augmented matrix is not positive
            semidefinite after jitter retries.
    """
    coeff = np.asarray(coeff, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    k = coeff.shape[0]
    corner = float(p0) * float(s_product)

    jitter = 0.0
    for attempt in range(_JITTER_ATTEMPTS + 1):
        block = coeff.copy()
        if jitter:
            block[np.diag_indices_from(block)] += jitter
        try:
            lower = np.linalg.cholesky(block)
        except np.linalg.LinAlgError:
            jitter += _JITTER
            continue
        # Last row of the augmented factor via the Schur complement of the
        # corner entry; this stays exact when the corner block is singular
        # (rhs = 0, p0 = 0), where a direct (K+1)-dim factorization fails.
        # The corner itself is never jittered, so zero targets stay zero.
        y = solve_triangular(lower, rhs, lower=True)
        resid = corner - y @ y
        tol = 1e-12 * max(1.0, abs(corner), float(y @ y))
        if resid < -tol:
            jitter += _JITTER
            continue
        examples = np.hstack([lower, np.zeros((k, 1))])
        outputs = np.concatenate([y, [math.sqrt(max(resid, 0.0))]])
        return CompressedNegatives(examples, outputs, base_weight=0.0)
    raise SingularSystemError(
        "augmented shared matrix is not positive semidefinite; "
        "cannot compress the unobserved cells"
    )


def cd_update_dimension(
    model: FactorModel,
    tensor: SparseTensor,
    dim: int,
    config: TrainConfig,
    column_hook: Callable[[int, np.ndarray], None] | None = None,
) -> None:
    """Coordinate-descent update of dimension ``dim``.

    Every column solves a weighted least-squares problem over the shared
    compressed examples (weight ``w0`` each) plus one example per observed
    cell. An observed cell with weight ``w`` enters with weight ``w - w0``
    and target ``w / (w - w0)``: the weight-compensated target makes the
    example set's normal equations equal the exact column system, so CD
    converges to the same solution the exact solver computes. The solve is
    warm-started from the column's previous value.

    The compressed examples are rescaled by ``1/sqrt(w0)`` because the
    shared matrix they reconstruct already carries one factor of ``w0``.

    Raises:
        SolverDivergence: naming the dimension and column, if CD produces
            non-finite values.
    """
    w0 = tensor.w0
    shared_coeff, shared_rhs = precompute_shared(model, dim, w0)
    s_product = 1.0
    for d, size in enumerate(tensor.sizes):
        if d != dim:
            s_product *= size
    compressed = compress_negatives(shared_coeff, shared_rhs, config.p0, s_product)
    scale = 1.0 / math.sqrt(w0)
    neg_examples = compressed.examples * scale
    neg_outputs = compressed.outputs * scale
    neg_weights = np.full(neg_outputs.size, w0)

    matrix = model.matrices[dim]
    for j in range(tensor.sizes[dim]):
        rows = tensor.rows_for(dim, j)
        v = _cell_vectors(model, tensor, dim, rows)
        wts = tensor.weights[rows]
        extra = wts - w0
        examples = np.hstack([neg_examples, v])
        with np.errstate(invalid="ignore"):
            outputs = np.concatenate([neg_outputs, wts / extra])
        weights = np.concatenate([neg_weights, extra])
        reg_eff = _effective_reg(config.reg, config.reg_mode, rows.size)
        if column_hook is not None:
            column_hook(j, matrix[:, j].copy())
        try:
            matrix[:, j] = solve_weighted_cd(
                examples, outputs, matrix[:, j], weights, reg_eff, config.inner_iters
            )
        except SolverDivergence as err:
            raise SolverDivergence(
                f"coordinate descent diverged at dimension {dim}, column {j}; "
                "consider the cg solver or lower regularization",
                dimension=dim,
                column=j,
            ) from err
    model.refresh_gram(dim)


def solve_cg(
    apply_a: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    x0: np.ndarray,
    precond_diag: np.ndarray,
    n_iters: int,
) -> np.ndarray:
    """Preconditioned conjugate gradient for an implicit SPD system.

    ``apply_a`` computes the matrix-vector product; ``precond_diag`` is the
    system diagonal (Jacobi preconditioner). Runs at most ``n_iters``
    iterations and returns early on an exactly zero residual or a
    non-positive curvature denominator. For a K x K SPD system, K
    iterations reproduce the exact solution (up to rounding).
    """
    x = np.array(x0, dtype=np.float64).copy()
    b = np.asarray(b, dtype=np.float64)
    r = b - apply_a(x)
    if not np.isfinite(r).all():
        raise SolverDivergence("non-finite residual in conjugate gradient")
    if r @ r == 0.0:
        return x
    d = np.asarray(precond_diag, dtype=np.float64)
    if (d <= 0).any():
        raise ValueError(
            "Jacobi preconditioner needs a positive diagonal; "
            "increase the regularization coefficient"
        )
    z = r / d
    p = z.copy()
    rz = r @ z
    for _ in range(n_iters):
        ap = apply_a(p)
        pap = p @ ap
        if not np.isfinite(pap) or pap <= 0.0:
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        z = r / d
        rz_next = r @ z
        if not np.isfinite(rz_next) or rz_next <= 0.0:
            break
        p = z + (rz_next / rz) * p
        rz = rz_next
    return x


def cg_update_dimension(
    model: FactorModel,
    tensor: SparseTensor,
    dim: int,
    config: TrainConfig,
    column_hook: Callable[[int, np.ndarray], None] | None = None,
) -> None:
    """Conjugate-gradient update of dimension ``dim``.

    The column system matrix is applied implicitly — shared part, observed
    cells, and the regularization term — so it is never materialized. Each
    solve is warm-started from the column's previous value, which lets a
    small fixed iteration count track the exact solution across epochs.
    """
    w0 = tensor.w0
    shared_coeff, _ = precompute_shared(model, dim, w0)
    shared_diag = np.diag(shared_coeff).copy()
    matrix = model.matrices[dim]
    for j in range(tensor.sizes[dim]):
        rows = tensor.rows_for(dim, j)
        v = _cell_vectors(model, tensor, dim, rows)
        wts = tensor.weights[rows]
        extra = wts - w0
        rhs = v @ wts
        reg_eff = _effective_reg(config.reg, config.reg_mode, rows.size)

        def apply_a(x, v=v, extra=extra, reg_eff=reg_eff):
            return shared_coeff @ x + v @ (extra * (v.T @ x)) + reg_eff * x

        precond = shared_diag + reg_eff + (v * v) @ extra
        if column_hook is not None:
            column_hook(j, matrix[:, j].copy())
        try:
            matrix[:, j] = solve_cg(apply_a, rhs, matrix[:, j], precond, config.inner_iters)
        except SolverDivergence as err:
            raise SolverDivergence(
                f"conjugate gradient diverged at dimension {dim}, column {j}",
                dimension=dim,
                column=j,
            ) from err
    model.refresh_gram(dim)


_UPDATERS = {
    "als": als_update_dimension,
    "cd": cd_update_dimension,
    "cg": cg_update_dimension,
}


def loss(model: FactorModel, tensor: SparseTensor, reg: float = 0.0) -> float:
    """Regularized weighted loss, computed without enumerating zeros.

    The baseline-weighted sum of squared predictions over *all* cells
    factorizes through the Gram matrices; observed cells then swap their
    baseline zero-target term for the true weighted residual.
    """
    k = model.n_features
    had = np.ones((k, k))
    for g in model.grams:
        had *= g
    total = tensor.w0 * had.sum()
    if tensor.n_positive:
        prod = np.ones((k, tensor.n_positive))
        for d in range(model.ndim):
            prod *= model.matrices[d][:, tensor.indices[:, d]]
        t_hat = prod.sum(axis=0)
        total += (tensor.weights * (1.0 - t_hat) ** 2 - tensor.w0 * t_hat**2).sum()
    if reg:
        total += reg * sum(float((m * m).sum()) for m in model.matrices)
    return float(total)


def train(
    model: FactorModel,
    tensor: SparseTensor,
    config: TrainConfig,
    callbacks: Callable[[dict], None] | None = None,
) -> list[float]:
    """Train ``model`` on ``tensor`` in place; returns per-epoch losses.

    Each epoch updates dimensions in ascending order with the configured
    solver. After every dimension update a record
    ``{"epoch", "dimension", "wall_ms", "loss"}`` is passed to
    ``callbacks`` (the loss is the regularized loss at ``config.reg``).
    Deterministic for a fixed model, tensor and config — the returned
    trace contains losses only, never timings.

    Raises:
        SolverDivergence, SingularSystemError: aborting the run; the
            partial per-epoch trace is attached as ``err.trace``.
    """
    if model.sizes != tensor.sizes:
        raise ValueError(
            f"model sizes {model.sizes} do not match tensor sizes {tensor.sizes}"
        )
    if config.w0 is not None and config.w0 != tensor.w0:
        raise ValueError("config w0 does not match the tensor baseline weight")
    update = _UPDATERS[config.solver]
    trace: list[float] = []
    epoch_loss = None
    for epoch in range(config.epochs):
        for dim in range(model.ndim):
            start = time.perf_counter()
            try:
                update(model, tensor, dim, config)
            except (SolverDivergence, SingularSystemError) as err:
                err.trace = trace
                raise
            wall_ms = (time.perf_counter() - start) * 1000.0
            epoch_loss = loss(model, tensor, config.reg)
            if callbacks is not None:
                callbacks(
                    {
                        "epoch": epoch,
                        "dimension": dim,
                        "wall_ms": wall_ms,
                        "loss": epoch_loss,
                    }
                )
        trace.append(epoch_loss)
    return trace


class PerContextComposite:
    """One independent user x item model per context state.

    Queries dispatch on the context state; states that had no training
    events carry no model (``None``) and score zero for every item.
    """

    def __init__(self, models: list[FactorModel | None], n_users: int, n_items: int):
        self.models = models
        self.n_users = n_users
        self.n_items = n_items

    @property
    def n_states(self) -> int:
        return len(self.models)

    def scores_for(self, user: int, state: int) -> np.ndarray:
        sub = self.models[state]
        if sub is None:
            return np.zeros(self.n_items)
        return sub.score_items(1, {0: user})


def train_per_context_baseline(
    log: EventLog,
    assigner,
    k: int,
    config: TrainConfig,
    wt: float = 100.0,
    count_scaling: bool = False,
    alpha: float = 99.0,
) -> PerContextComposite:
    """Composite baseline: a separate two-dimensional model per context state.

    Each state's model is trained only on the events assigned to that state,
    on the full shared user/item vocabulary, so queries in state ``s`` touch
    exactly the model of ``s``.
    """
    n_states = assigner.n_states(log)
    if not n_states:
        raise ValueError("the composite baseline needs a context with states")
    states = assigner.assign_train(log)
    n_users, n_items = max(len(log.users), 1), max(len(log.items), 1)
    w0 = config.w0 if config.w0 is not None else 1.0

    models: list[FactorModel | None] = []
    for state in range(n_states):
        events = [
            event
            for event, weighted in zip(log.events, states)
            if any(s == state for s, _ in weighted)
        ]
        if not events:
            models.append(None)
            continue
        sublog = EventLog(events, log.users, log.items, log.categories)
        tensor = build_tensor(
            sublog, None, w0=w0, wt=wt, count_scaling=count_scaling, alpha=alpha
        )
        sub = init_model((n_users, n_items), k, config.seed)
        train(sub, tensor, config)
        models.append(sub)
    return PerContextComposite(models, n_users, n_items)
