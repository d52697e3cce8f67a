"""Training loop for BPR, GroupDRO (intersectional and two-sided) and ITFR.

Every method runs through the same per-batch pipeline: sample negatives,
bucket triples into groups, compute per-group (sharpness-aware) losses and
gradients, update group weights, and take one Adam step on the weighted sum of
group gradients. Methods differ only in which pieces are switched on.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import balance
from .data import InteractionDataset, NegativeSampler, SplitDataset, build_index
from .evaluate import validation_recall
from .losses import (EpochGradientAccumulator, SparseGrad, combine_sparse, partition_batch,
                     partition_by, sharpness_aware_loss_and_grad)
from .model import EmbeddingTable, init_embeddings

_logger = logging.getLogger(__name__)

METHODS = ("bpr", "groupdro", "groupdro-two-sided", "itfr")
L2_GRID = (0.0, 1e-7, 1e-6, 1e-5, 1e-4)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "itfr"
    no_sa: bool = False
    no_cb: bool = False
    no_pn: bool = False
    pn_only: bool = False
    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 200
    negatives: int = 1
    l2: float = 0.0
    d: int = 64
    eta: float = 1.0
    gamma: float = 1.0
    rho: float = 0.05
    tau: float = 3.0
    seed: int = 0
    eval_every: int = 1
    patience: int = 0
    k: int = 20
    init_scale: float = 0.1
    beta_source: str = "sharp"
    group_mixing: str = "count"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if (self.no_sa or self.no_cb or self.no_pn) and self.method != "itfr":
            raise ValueError("--no-sa/--no-cb/--no-pn apply only to --method itfr")
        if self.pn_only and self.method != "bpr":
            raise ValueError("--pn-only applies only to --method bpr")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.negatives < 1 or self.d < 1:
            raise ValueError("lr, batch_size, negatives and d must be positive")
        if self.group_mixing not in ("count", "mean"):
            raise ValueError("group_mixing must be 'count' or 'mean'")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.l2 < 0 or self.tau <= 0 or self.rho < 0 or self.eta < 0 or self.gamma < 0:
            raise ValueError("invalid hyperparameter")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def scorer_mode(self) -> str:
        if self.pn_only or (self.method == "itfr" and not self.no_pn):
            return "normalized"
        return "dot"

    @property
    def effective_rho(self) -> float:
        return self.rho if self.method == "itfr" and not self.no_sa else 0.0

    @property
    def weight_rule(self) -> str:
        if self.method == "bpr":
            return "uniform"
        if self.method == "itfr":
            return "dro-sharp" if self.no_cb else "collaborative"
        return "dro"


@dataclass(eq=False)
class AdamState:
    m_user: np.ndarray
    v_user: np.ndarray
    m_item: np.ndarray
    v_item: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, table: EmbeddingTable) -> "AdamState":
        U, V = table.user_embeddings, table.item_embeddings
        return cls(np.zeros_like(U), np.zeros_like(U), np.zeros_like(V), np.zeros_like(V))


def _adam_rows(param, m, v, rows, g, lr, state, c1, c2):
    live = np.any(g != 0, axis=1)
    rows, g = rows[live], g[live]
    m[rows] = state.beta1 * m[rows] + (1 - state.beta1) * g
    v[rows] = state.beta2 * v[rows] + (1 - state.beta2) * g * g
    param[rows] -= lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + state.eps)


def adam_step(state: AdamState, table: EmbeddingTable, grad: SparseGrad, lr: float) -> None:
    """Lazy Adam: moments and parameters move only on rows with a nonzero gradient."""
    state.step += 1
    c1 = 1 - state.beta1 ** state.step
    c2 = 1 - state.beta2 ** state.step
    _adam_rows(table.user_embeddings, state.m_user, state.v_user, grad.user_rows, grad.user_grad,
               lr, state, c1, c2)
    _adam_rows(table.item_embeddings, state.m_item, state.v_item, grad.item_rows, grad.item_grad,
               lr, state, c1, c2)


@dataclass(eq=False)
class TrainResult:
    table: EmbeddingTable
    best_epoch: int
    best_recall: float
    history: list = field(default_factory=list)
    log_rows: list = field(default_factory=list)
    log_header: list = field(default_factory=list)
    weights: np.ndarray | None = None
    diagnostics: list = field(default_factory=list)

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.log_header)
            writer.writerows(self.log_rows)


def _group_names(ds: InteractionDataset) -> list:
    return [f"{ds.user_group_labels[p]}|{ds.item_group_labels[q]}"
            for p in range(ds.n_user_groups) for q in range(ds.n_item_groups)]


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def train(cfg: TrainConfig, split: SplitDataset, ds: InteractionDataset, on_batch=None) -> TrainResult:
    """Train one model and return the checkpoint with the best validation Recall@k.

    ``on_batch(epoch, batch, weights, info)`` is called after every weight
    update, with ``info`` holding the per-group losses of that batch.
    """
    train_pairs = split.train
    if not len(train_pairs):
        raise ValueError("empty training split")
    sizes = build_index(ds, train_pairs).sizes()
    if (sizes == 0).any():
        _logger.warning("some intersectional cells have no training positives: %s", sizes.tolist())

    table = init_embeddings(ds.n_users, ds.n_items, cfg.d, cfg.seed, cfg.init_scale,
                            cfg.scorer_mode, cfg.tau, cfg.l2)
    adam = AdamState.zeros_like(table)
    rng = np.random.default_rng([cfg.seed, 1])
    sampler = NegativeSampler(train_pairs, ds.n_users, ds.n_items)
    rho = cfg.effective_rho
    rule = cfg.weight_rule
    two_sided = cfg.method == "groupdro-two-sided"

    G = ds.n_cells
    P, Q = ds.n_user_groups, ds.n_item_groups
    w = balance.uniform_weights(G)
    w_user, w_item = balance.uniform_weights(P), balance.uniform_weights(Q)
    bcfg = balance.BalanceConfig(eta=cfg.eta, gamma=cfg.gamma, rho=rho, beta_source=cfg.beta_source)
    acc = EpochGradientAccumulator(G, ds.n_users, ds.n_items, cfg.d) if rule == "collaborative" else None

    names = _group_names(ds)
    if two_sided:
        wnames = [f"user:{x}" for x in ds.user_group_labels] + [f"item:{x}" for x in ds.item_group_labels]
    else:
        wnames = names
    header = (["epoch", "batch", "method", "loss"] + [f"L[{n}]" for n in names]
              + [f"Lhat[{n}]" for n in names] + [f"w[{n}]" for n in wnames] + [f"val_recall@{cfg.k}"])
    log_rows, history, diagnostics = [], [], []

    best_table, best_epoch, best_recall = table.copy(), -1, -math.inf
    stale = 0
    for epoch in range(cfg.epochs):
        if acc is not None:
            acc.open_epoch()
        loss_sum, sharp_sum, seen = np.zeros(G), np.zeros(G), np.zeros(G)
        contrib = None
        perm = rng.permutation(len(train_pairs))
        n_batches = max(1, math.ceil(len(perm) / cfg.batch_size))
        for b in range(n_batches):
            pos = train_pairs[perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            pos = np.repeat(pos, cfg.negatives, axis=0)
            neg = sampler.sample(pos[:, 0], rng)
            triples = np.column_stack([pos, neg])

            if two_sided:
                loss, grad, res, shown_w = _two_sided_batch(triples, ds, table, cfg, w_user, w_item)
                w_user, w_item = shown_w[:P], shown_w[P:]
            else:
                gb = partition_batch(triples, ds)
                res = sharpness_aware_loss_and_grad(gb, table, rho)
                present = res.present
                if rule == "dro":
                    w = balance.groupdro_update(w, res.plain_loss, present, cfg.eta)
                elif rule == "dro-sharp":
                    w = balance.groupdro_update(w, res.sharp_loss, present, cfg.eta)
                elif rule == "collaborative" and acc.has_last:
                    contrib = balance.total_contributions(res, acc, bcfg)
                    w = balance.update_weights(w, contrib.total, present, cfg.eta)
                if acc is not None:
                    for g in np.flatnonzero(present):
                        acc.add(g, res.grads[g], res.sharp_loss[g], res.plain_loss[g])
                mw = balance.mixing_weights(w, present, gb.counts if cfg.group_mixing == "count" else None)
                idx = np.flatnonzero(present)
                grad = combine_sparse([res.grads[g] for g in idx], mw[idx])
                loss = float(np.sum(mw[idx] * res.sharp_loss[idx]))
                shown_w = w

            if not math.isfinite(loss) or not np.all(np.isfinite(grad.user_grad)) \
                    or not np.all(np.isfinite(grad.item_grad)):
                raise NumericalError(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
            here = ~np.isnan(res.plain_loss)
            loss_sum[here] += res.plain_loss[here]
            sharp_sum[here] += res.sharp_loss[here]
            seen += here
            if on_batch is not None:
                on_batch(epoch, b, shown_w, res)
            adam_step(adam, table, grad, cfg.lr)
            log_rows.append([epoch, b, cfg.method, _fmt(loss)]
                            + [_fmt(x) for x in res.plain_loss] + [_fmt(x) for x in res.sharp_loss]
                            + [_fmt(x) for x in shown_w] + [""])
        if acc is not None:
            acc.close_epoch()
        with np.errstate(invalid="ignore", divide="ignore"):
            diagnostics.append({
                "epoch": epoch,
                "w": [float(x) for x in shown_w],
                "L": [None if n == 0 else float(x) for x, n in zip(loss_sum / seen, seen)],
                "Lhat": [None if n == 0 else float(x) for x, n in zip(sharp_sum / seen, seen)],
                "C": None if contrib is None else contrib.total.tolist(),
                "beta": None if contrib is None else contrib.beta.tolist(),
            })

        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            recall = validation_recall(table, split, cfg.k)
            log_rows[-1][-1] = _fmt(recall)
            history.append({"epoch": epoch, "val_recall": recall})
            _logger.info("epoch %d val recall@%d %.4f", epoch, cfg.k, recall)
            if recall > best_recall:
                best_table, best_epoch, best_recall = table.copy(), epoch, recall
                stale = 0
            else:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    _logger.info("early stop at epoch %d", epoch)
                    break

    final_w = np.concatenate([w_user, w_item]) if two_sided else w
    return TrainResult(best_table, best_epoch, best_recall, history, log_rows, header, final_w,
                       diagnostics)


class _TwoSidedResult:
    """Log-shaped stand-in: two-sided runs have no per-cell losses."""

    def __init__(self, n_cells):
        self.plain_loss = np.full(n_cells, np.nan)
        self.sharp_loss = self.plain_loss


def _two_sided_batch(triples, ds, table, cfg, w_user, w_item):
    """Separate GroupDRO weights for user groups and for item groups; loss is their mean."""
    user_gb = partition_by(triples, ds.user_group[triples[:, 0]], ds.n_user_groups)
    item_gb = partition_by(triples, ds.item_group[triples[:, 1]], ds.n_item_groups)
    ures = sharpness_aware_loss_and_grad(user_gb, table, 0.0)
    ires = sharpness_aware_loss_and_grad(item_gb, table, 0.0)
    w_user = balance.groupdro_update(w_user, ures.plain_loss, ures.present, cfg.eta)
    w_item = balance.groupdro_update(w_item, ires.plain_loss, ires.present, cfg.eta)
    mu = balance.mixing_weights(w_user, ures.present)
    mi = balance.mixing_weights(w_item, ires.present)
    ui, ii = np.flatnonzero(ures.present), np.flatnonzero(ires.present)
    grad = combine_sparse([ures.grads[g] for g in ui] + [ires.grads[g] for g in ii],
                          np.concatenate([0.5 * mu[ui], 0.5 * mi[ii]]))
    loss = 0.5 * float(np.sum(mu[ui] * ures.plain_loss[ui]) + np.sum(mi[ii] * ires.plain_loss[ii]))
    return loss, grad, _TwoSidedResult(ds.n_cells), np.concatenate([w_user, w_item])
