"""Top-K lists, intersectional utilities, fairness and accuracy metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import InteractionDataset, SplitDataset
from .model import EmbeddingTable

_logger = logging.getLogger(__name__)

METRICS = ("precision", "recall", "ndcg", "min", "cv", "ucv", "icv")


@dataclass(eq=False)
class UtilityMatrix:
    values: np.ndarray
    eligible: np.ndarray
    k: int

    @property
    def defined(self) -> np.ndarray:
        return self.eligible > 0


@dataclass
class FairnessReport:
    cv: float
    min_frac: float
    ucv: float
    icv: float
    precision: float = math.nan
    recall: float = math.nan
    ndcg: float = math.nan
    k: int = 20

    def metrics(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "ndcg": self.ndcg,
                "min": self.min_frac, "cv": self.cv, "ucv": self.ucv, "icv": self.icv}


def topk_from_scores(scores: np.ndarray, k: int, mask=None) -> list:
    """Top-``k`` unmasked indices of one score row; ties go to the lower index."""
    if k < 1:
        raise ValueError("K must be at least 1")
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    if mask is not None and len(mask):
        keep = np.ones(len(scores), dtype=bool)
        keep[np.fromiter(mask, dtype=np.int64)] = False
        order = order[keep[order]]
    return order[:k].tolist()


def recommend_topk(table: EmbeddingTable, user: int, k: int, mask=()) -> list:
    return topk_from_scores(table.score_matrix([user])[0], k, mask)


def recommend_all(table: EmbeddingTable, k: int, mask_pairs: np.ndarray, users=None,
                  chunk: int = 1024) -> dict:
    """Top-``k`` list for every user in ``users``; ``mask_pairs`` rows are excluded."""
    if k < 1:
        raise ValueError("K must be at least 1")
    users = np.arange(table.n_users) if users is None else np.asarray(users)
    m = table.n_items
    ranks = np.arange(m)
    lists = {}
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        scores = table.score_matrix(block)
        masked = np.zeros(scores.shape, dtype=bool)
        if len(mask_pairs):
            row_of = np.full(table.n_users, -1)
            row_of[block] = np.arange(len(block))
            sel = mask_pairs[row_of[mask_pairs[:, 0]] >= 0]
            masked[row_of[sel[:, 0]], sel[:, 1]] = True
        # sort by (masked, -score, index): masked items fall to the end
        order = np.lexsort((np.broadcast_to(ranks, scores.shape), -scores, masked), axis=1)
        n_free = m - masked.sum(axis=1)
        for r, u in enumerate(block):
            lists[int(u)] = order[r, :min(k, n_free[r])]
    return lists


def _by_user(pairs: np.ndarray) -> dict:
    out = {}
    if len(pairs):
        pairs = pairs[np.argsort(pairs[:, 0], kind="stable")]
        users, starts = np.unique(pairs[:, 0], return_index=True)
        for u, chunk in zip(users, np.split(pairs[:, 1], starts[1:])):
            out[int(u)] = chunk
    return out


def _hits(lists: dict, targets: np.ndarray, n_items: int) -> np.ndarray:
    rec = [u * n_items + np.asarray(lst, dtype=np.int64) for u, lst in lists.items() if len(lst)]
    rec_keys = np.sort(np.concatenate(rec)) if rec else np.zeros(0, dtype=np.int64)
    return np.isin(targets[:, 0] * n_items + targets[:, 1], rec_keys)


def itg_utility(lists: dict, targets: np.ndarray, ds: InteractionDataset, k: int) -> UtilityMatrix:
    """Per-cell mean of group-restricted recall over eligible users.

    ``targets`` are the held-out positives; a user is eligible for cell
    ``(p, q)`` when in user group ``p`` with at least one target in item group ``q``.
    """
    P, Q = ds.n_user_groups, ds.n_item_groups
    values = np.full((P, Q), np.nan)
    eligible = np.zeros((P, Q), dtype=np.int64)
    if not len(targets):
        return UtilityMatrix(values, eligible, k)
    hit = _hits(lists, targets, ds.n_items)
    key = targets[:, 0] * Q + ds.item_group[targets[:, 1]]
    size = ds.n_users * Q
    denom = np.bincount(key, minlength=size).reshape(ds.n_users, Q)
    numer = np.bincount(key, weights=hit.astype(float), minlength=size).reshape(ds.n_users, Q)
    ok = denom > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        per_user = np.where(ok, numer / np.maximum(denom, 1), 0.0)
    for p in range(P):
        rows = ds.user_group == p
        eligible[p] = ok[rows].sum(axis=0)
        sums = per_user[rows].sum(axis=0)
        values[p] = np.where(eligible[p] > 0, sums / np.maximum(eligible[p], 1), np.nan)
    return UtilityMatrix(values, eligible, k)


def _cv(x) -> float:
    x = np.asarray(x, float)
    mean = x.mean()
    if mean == 0:
        return math.nan
    return float(x.std() / mean)


def _mean_slice_cv(util: UtilityMatrix, axis: int, name: str) -> float:
    vals = util.values if axis == 0 else util.values.T
    defined = util.defined if axis == 0 else util.defined.T
    cvs = []
    for r in range(vals.shape[0]):
        row = vals[r][defined[r]]
        if not row.size:
            continue
        c = _cv(row)
        if math.isnan(c):
            _logger.warning("%s slice %d has zero mean utility; excluded", name, r)
            continue
        cvs.append(c)
    return float(np.mean(cvs)) if cvs else math.nan


def fairness_report(util: UtilityMatrix) -> FairnessReport:
    cells = util.values[util.defined]
    if not cells.size:
        raise ValueError("utility matrix has no defined cells")
    cv = _cv(cells)
    if math.isnan(cv):
        _logger.warning("all defined utilities are zero; CV undefined")
    worst = max(1, math.ceil(0.25 * cells.size))
    min_frac = float(np.sort(cells)[:worst].mean())
    icv = _mean_slice_cv(util, 0, "user-group")   # rows: across item groups
    ucv = _mean_slice_cv(util, 1, "item-group")   # columns: across user groups
    return FairnessReport(cv=cv, min_frac=min_frac, ucv=ucv, icv=icv, k=util.k)


def accuracy_report(lists: dict, targets: np.ndarray, k: int, n_items: int | None = None) -> dict:
    """Mean P/R/NDCG@k over users with at least one target."""
    by_user = _by_user(targets)
    if not by_user:
        return {"precision": math.nan, "recall": math.nan, "ndcg": math.nan, "users": 0}
    discount = 1.0 / np.log2(np.arange(2, k + 2))
    prec, rec, ndcg = [], [], []
    for u, items in by_user.items():
        lst = np.asarray(lists.get(u, []))[:k]
        rel = np.isin(lst, items)
        hits = rel.sum()
        prec.append(hits / k)
        rec.append(hits / len(items))
        idcg = discount[:min(len(items), k)].sum()
        ndcg.append(discount[:len(rel)][rel].sum() / idcg)
    return {"precision": float(np.mean(prec)), "recall": float(np.mean(rec)),
            "ndcg": float(np.mean(ndcg)), "users": len(by_user)}


def evaluate(table: EmbeddingTable, ds: InteractionDataset, split: SplitDataset,
             k: int = 20, stage: str = "test"):
    """Full report. ``stage='validation'`` masks train only and scores validation."""
    if stage == "test":
        mask = np.concatenate([split.train, split.validation])
        targets = split.test
    elif stage == "validation":
        mask, targets = split.train, split.validation
    else:
        raise ValueError(f"unknown stage {stage!r}")
    users = np.unique(targets[:, 0]) if len(targets) else np.zeros(0, dtype=np.int64)
    lists = recommend_all(table, k, mask, users)
    util = itg_utility(lists, targets, ds, k)
    rep = fairness_report(util)
    acc = accuracy_report(lists, targets, k)
    rep.precision, rep.recall, rep.ndcg = acc["precision"], acc["recall"], acc["ndcg"]
    return rep, util


def validation_recall(table: EmbeddingTable, split: SplitDataset, k: int = 20) -> float:
    targets = split.validation
    if not len(targets):
        return math.nan
    lists = recommend_all(table, k, split.train, np.unique(targets[:, 0]))
    return accuracy_report(lists, targets, k)["recall"]


def write_report(out_dir, report: FairnessReport, util: UtilityMatrix, ds: InteractionDataset,
                 run_info: dict) -> None:
    """``report.json`` (nested), ``report.csv`` (one flat row), ``utility.csv`` (per cell)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [
        {"user_group": ds.user_group_labels[p], "item_group": ds.item_group_labels[q],
         "utility": None if not util.defined[p, q] else float(util.values[p, q]),
         "eligible_users": int(util.eligible[p, q])}
        for p in range(ds.n_user_groups) for q in range(ds.n_item_groups)
    ]
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump({"run": run_info, "k": report.k, "metrics": report.metrics(), "cells": cells},
                  fh, indent=1, sort_keys=True)
    row = dict(run_info)
    row.update({f"{name}@{report.k}": value for name, value in report.metrics().items()})
    with open(out / "report.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow({key: _fmt(v) for key, v in row.items()})
    with open(out / "utility.csv", "w", encoding="utf-8", newline="") as fh:
        header = ["user_group"] + list(ds.item_group_labels)
        writer = csv.writer(fh)
        writer.writerow(header)
        for p in range(ds.n_user_groups):
            writer.writerow([ds.user_group_labels[p]]
                            + [_fmt(util.values[p, q]) if util.defined[p, q] else ""
                               for q in range(ds.n_item_groups)])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def report_dict(report: FairnessReport) -> dict:
    return asdict(report)
