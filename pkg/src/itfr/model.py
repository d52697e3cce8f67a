"""Matrix-factorization embeddings, scorers and analytic BPR gradients."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

NORM_FLOOR = 1e-12
SCORERS = ("dot", "normalized")


class DegenerateEmbedding(ValueError):
    pass


@dataclass(eq=False)
class EmbeddingTable:
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    scorer_mode: str = "dot"
    tau: float = 1.0
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.scorer_mode not in SCORERS:
            raise ValueError(f"unknown scorer {self.scorer_mode!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")

    @property
    def n_users(self) -> int:
        return self.user_embeddings.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.user_embeddings.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user_embeddings.copy(), self.item_embeddings.copy(),
                              self.scorer_mode, self.tau, self.l2, self.seed)

    def score(self, u: int, i: int) -> float:
        return float(score_rows(self.user_embeddings[u], self.item_embeddings[i],
                                self.scorer_mode, self.tau))

    def score_matrix(self, users=None) -> np.ndarray:
        """Scores of ``users`` (default: all) against every item."""
        U = self.user_embeddings if users is None else self.user_embeddings[users]
        V = self.item_embeddings
        if self.scorer_mode == "dot":
            return U @ V.T
        return self.tau * (_unit(U) @ _unit(V).T)


def init_embeddings(n: int, m: int, d: int = 64, seed: int = 0, scale: float = 0.1,
                    scorer_mode: str = "dot", tau: float = 1.0, l2: float = 0.0) -> EmbeddingTable:
    if min(n, m, d) < 1:
        raise ValueError("n, m and d must be at least 1")
    rng = np.random.default_rng(seed)
    U = rng.normal(0.0, scale, size=(n, d)) if scale > 0 else np.zeros((n, d))
    V = rng.normal(0.0, scale, size=(m, d)) if scale > 0 else np.zeros((m, d))
    return EmbeddingTable(U, V, scorer_mode, tau, l2, seed)


def _norms(X):
    n = np.linalg.norm(X, axis=-1)
    if np.any(n <= NORM_FLOOR):
        raise DegenerateEmbedding("degenerate embedding")
    return n


def _unit(X):
    return X / _norms(X)[..., None]


def score_rows(u, v, scorer_mode="dot", tau=1.0):
    """Row-wise score of matching user/item embedding rows."""
    dot = np.sum(u * v, axis=-1)
    if scorer_mode == "dot":
        return dot
    return tau * dot / (_norms(u) * _norms(v))


def triple_terms(U, V, users, pos, neg, scorer_mode="dot", tau=1.0, l2=0.0):
    """Per-triple BPR losses and gradients w.r.t. the three touched rows.

    ``U``/``V`` may be any row-indexable user/item arrays (full tables or
    local gathers); ``users``/``pos``/``neg`` index into them. Returns
    ``(loss, g_user, g_pos, g_neg)`` with one row per triple.
    """
    u, vi, vj = U[users], V[pos], V[neg]
    if scorer_mode == "dot":
        x = np.sum(u * (vi - vj), axis=-1)
        ds_du = vi - vj
        ds_dvi = u
        ds_dvj = -u
    else:
        nu, ni, nj = _norms(u), _norms(vi), _norms(vj)
        uh, ih, jh = u / nu[:, None], vi / ni[:, None], vj / nj[:, None]
        ci = np.sum(uh * ih, axis=-1)
        cj = np.sum(uh * jh, axis=-1)
        x = tau * (ci - cj)
        ds_du = (tau / nu)[:, None] * ((ih - ci[:, None] * uh) - (jh - cj[:, None] * uh))
        ds_dvi = (tau / ni)[:, None] * (uh - ci[:, None] * ih)
        ds_dvj = -(tau / nj)[:, None] * (uh - cj[:, None] * jh)
    loss = np.logaddexp(0.0, -x)
    slope = -expit(-x)[:, None]
    gu, gi, gj = slope * ds_du, slope * ds_dvi, slope * ds_dvj
    if l2:
        loss = loss + l2 * (np.sum(u * u, -1) + np.sum(vi * vi, -1) + np.sum(vj * vj, -1))
        gu = gu + 2 * l2 * u
        gi = gi + 2 * l2 * vi
        gj = gj + 2 * l2 * vj
    return loss, gu, gi, gj


@dataclass
class TripleGradient:
    user: np.ndarray
    pos_item: np.ndarray
    neg_item: np.ndarray


def bpr_loss_and_grad(table: EmbeddingTable, u: int, i: int, j: int) -> tuple[float, TripleGradient]:
    if i == j:
        raise ValueError("positive equals negative")
    loss, gu, gi, gj = triple_terms(table.user_embeddings, table.item_embeddings,
                                    np.array([u]), np.array([i]), np.array([j]),
                                    table.scorer_mode, table.tau, table.l2)
    return float(loss[0]), TripleGradient(gu[0], gi[0], gj[0])


def save_checkpoint(table: EmbeddingTable, path) -> None:
    header = {"n": table.n_users, "m": table.n_items, "d": table.d,
              "scorer_mode": table.scorer_mode, "tau": table.tau, "l2": table.l2,
              "seed": table.seed}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(table.user_embeddings, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(table.item_embeddings, dtype="<f8").tobytes())


def load_checkpoint(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        n, m, d = header["n"], header["m"], header["d"]
        body = fh.read()
    expected = (n + m) * d * struct.calcsize("<d")
    if len(body) != expected:
        raise ValueError(f"checkpoint {path}: expected {expected} bytes of weights, got {len(body)}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return EmbeddingTable(flat[: n * d].reshape(n, d).copy(), flat[n * d:].reshape(m, d).copy(),
                          header["scorer_mode"], header["tau"], header["l2"], header["seed"])
