"""Per-group BPR losses, sharpness-aware perturbation and epoch gradient buffers.

Groups are addressed by a flat cell index ``p * Q + q``. A triple belongs to
the cell of its user and its *positive* item; the negative never matters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import EmbeddingTable, triple_terms

GRAD_FLOOR = 1e-12


@dataclass(eq=False)
class SparseGrad:
    """Gradient restricted to a set of unique user rows and item rows."""

    user_rows: np.ndarray
    user_grad: np.ndarray
    item_rows: np.ndarray
    item_grad: np.ndarray

    def sq_norm(self) -> float:
        return float(np.sum(self.user_grad ** 2) + np.sum(self.item_grad ** 2))

    def norm(self) -> float:
        return float(np.sqrt(self.sq_norm()))

    def dot_dense(self, dense_u, dense_i) -> float:
        return float(np.sum(self.user_grad * dense_u[self.user_rows])
                     + np.sum(self.item_grad * dense_i[self.item_rows]))

    def scatter_into(self, dense_u, dense_i, scale=1.0) -> None:
        dense_u[self.user_rows] += scale * self.user_grad
        dense_i[self.item_rows] += scale * self.item_grad

    def to_dense(self, n_users, n_items):
        d = self.user_grad.shape[1]
        du, di = np.zeros((n_users, d)), np.zeros((n_items, d))
        self.scatter_into(du, di)
        return du, di


def combine_sparse(grads, scales) -> SparseGrad:
    """``sum(scale * grad)`` over sparse gradients, rows merged."""
    grads = list(grads)
    ur = np.concatenate([g.user_rows for g in grads])
    ir = np.concatenate([g.item_rows for g in grads])
    ug = np.concatenate([s * g.user_grad for g, s in zip(grads, scales)])
    ig = np.concatenate([s * g.item_grad for g, s in zip(grads, scales)])
    urows, uinv = np.unique(ur, return_inverse=True)
    irows, iinv = np.unique(ir, return_inverse=True)
    out_u = np.zeros((len(urows), ug.shape[1]))
    out_i = np.zeros((len(irows), ig.shape[1]))
    np.add.at(out_u, uinv, ug)
    np.add.at(out_i, iinv, ig)
    return SparseGrad(urows, out_u, irows, out_i)


@dataclass(eq=False)
class GroupBatch:
    triples: np.ndarray
    group: np.ndarray
    n_groups: int

    def members(self, g: int) -> np.ndarray:
        return self.triples[self.group == g]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.group, minlength=self.n_groups)

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0


def partition_batch(batch, ds) -> GroupBatch:
    """Bucket ``(u, i, j)`` triples into intersectional cells."""
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    return GroupBatch(batch, ds.cell_of(batch[:, 0], batch[:, 1]), ds.n_cells)


def partition_by(batch, labels, n_groups) -> GroupBatch:
    """Bucket triples by an arbitrary precomputed label per triple."""
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    return GroupBatch(batch, np.asarray(labels, dtype=np.int64), n_groups)


class _LocalGroup:
    """Rows touched by one group's triples, gathered into private copies."""

    def __init__(self, table: EmbeddingTable, triples: np.ndarray):
        self.table = table
        self.user_rows, self.uinv = np.unique(triples[:, 0], return_inverse=True)
        self.item_rows, iinv = np.unique(triples[:, 1:], return_inverse=True)
        self.iinv = iinv.reshape(-1, 2)
        self.U = table.user_embeddings[self.user_rows]
        self.V = table.item_embeddings[self.item_rows]

    def evaluate(self, U, V):
        t = self.table
        loss, gu, gi, gj = triple_terms(U, V, self.uinv, self.iinv[:, 0], self.iinv[:, 1],
                                        t.scorer_mode, t.tau, t.l2)
        n = len(loss)
        GU = np.zeros_like(U)
        GV = np.zeros_like(V)
        np.add.at(GU, self.uinv, gu)
        np.add.at(GV, self.iinv[:, 0], gi)
        np.add.at(GV, self.iinv[:, 1], gj)
        return loss.sum() / n, GU / n, GV / n

    def sparse(self, GU, GV) -> SparseGrad:
        return SparseGrad(self.user_rows, GU, self.item_rows, GV)


def group_loss_and_grad(table: EmbeddingTable, triples) -> tuple[float, SparseGrad]:
    """Mean BPR loss of a set of triples and its sparse gradient."""
    local = _LocalGroup(table, np.asarray(triples, dtype=np.int64).reshape(-1, 3))
    loss, GU, GV = local.evaluate(local.U, local.V)
    return float(loss), local.sparse(GU, GV)


def group_plain_losses(gb: GroupBatch, table: EmbeddingTable) -> np.ndarray:
    """Mean loss per group; NaN marks groups absent from the batch."""
    out = np.full(gb.n_groups, np.nan)
    for g in np.flatnonzero(gb.present):
        out[g] = group_loss_and_grad(table, gb.members(g))[0]
    return out


@dataclass(eq=False)
class SharpnessResult:
    rho: float
    plain_loss: np.ndarray
    sharp_loss: np.ndarray
    grads: list = field(default_factory=list)
    plain_grads: list = field(default_factory=list)

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.sharp_loss)


def sharp_group(table: EmbeddingTable, triples, rho: float):
    """Single ascent step on one group: returns (L, L_hat, grad at theta*, grad at theta).

    The table is never written; the ascent acts on gathered row copies.
    """
    local = _LocalGroup(table, np.asarray(triples, dtype=np.int64).reshape(-1, 3))
    loss, GU, GV = local.evaluate(local.U, local.V)
    plain = local.sparse(GU, GV)
    norm = np.sqrt(np.sum(GU ** 2) + np.sum(GV ** 2))
    if rho == 0 or norm <= GRAD_FLOOR:
        return float(loss), float(loss), plain, plain
    step = rho / norm
    s_loss, SU, SV = local.evaluate(local.U + step * GU, local.V + step * GV)
    return float(loss), float(s_loss), local.sparse(SU, SV), plain


def sharpness_aware_loss_and_grad(gb: GroupBatch, table: EmbeddingTable, rho: float) -> SharpnessResult:
    if rho < 0:
        raise ValueError("rho must be non-negative")
    plain_loss = np.full(gb.n_groups, np.nan)
    sharp_loss = np.full(gb.n_groups, np.nan)
    grads = [None] * gb.n_groups
    plain_grads = [None] * gb.n_groups
    for g in np.flatnonzero(gb.present):
        plain_loss[g], sharp_loss[g], grads[g], plain_grads[g] = sharp_group(table, gb.members(g), rho)
    return SharpnessResult(rho, plain_loss, sharp_loss, grads, plain_grads)


class EpochGradientAccumulator:
    """Dense per-group gradient sums for the running epoch and the one before.

    ``last_*`` attributes describe the most recently closed epoch and are what
    the contribution estimate reads.
    """

    def __init__(self, n_groups: int, n_users: int, n_items: int, d: int):
        self.n_groups = n_groups
        self.user = np.zeros((n_groups, n_users, d))
        self.item = np.zeros((n_groups, n_items, d))
        self.sharp_sum = np.zeros(n_groups)
        self.plain_sum = np.zeros(n_groups)
        self.batches = np.zeros(n_groups, dtype=np.int64)
        self.epoch = -1
        self.is_open = False
        self.last_user = None
        self.last_item = None
        self.last_norm = None
        self.last_sharp_mean = None
        self.last_plain_mean = None

    @property
    def has_last(self) -> bool:
        return self.last_user is not None

    def open_epoch(self) -> None:
        if self.is_open:
            raise RuntimeError("epoch already open")
        self.epoch += 1
        self.is_open = True

    def add(self, g: int, grad: SparseGrad, sharp_loss: float, plain_loss: float = np.nan) -> None:
        if not self.is_open:
            raise RuntimeError("cannot accumulate into a closed epoch")
        grad.scatter_into(self.user[g], self.item[g])
        self.sharp_sum[g] += sharp_loss
        self.plain_sum[g] += plain_loss
        self.batches[g] += 1

    def close_epoch(self) -> None:
        if not self.is_open:
            raise RuntimeError("no open epoch")
        self.last_user, self.last_item = self.user, self.item
        self.last_norm = np.sqrt(np.einsum("gnd,gnd->g", self.user, self.user)
                                 + np.einsum("gnd,gnd->g", self.item, self.item))
        seen = self.batches > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            self.last_sharp_mean = np.where(seen, self.sharp_sum / self.batches, np.nan)
            self.last_plain_mean = np.where(seen, self.plain_sum / self.batches, np.nan)
        self.user = np.zeros_like(self.last_user)
        self.item = np.zeros_like(self.last_item)
        self.sharp_sum = np.zeros(self.n_groups)
        self.plain_sum = np.zeros(self.n_groups)
        self.batches = np.zeros(self.n_groups, dtype=np.int64)
        self.is_open = False


def accumulate(acc: EpochGradientAccumulator, group: int, result: SharpnessResult) -> EpochGradientAccumulator:
    acc.add(group, result.grads[group], result.sharp_loss[group], result.plain_loss[group])
    return acc
