"""Fully-connected pairwise CRF over a grid of patch embeddings.

Energy of a labelling ``y`` given unary costs ``psi_u`` (N x 2) and the
pairwise cost matrix ``d`` (N x N, symmetric, zero diagonal)::

    E(y) = sum_i psi_u[i, y_i] + sum_{i<j} [y_i == y_j] * d[i, j]
    d[i, j] = w[i, j] * (1 - cos(x_i, x_j))

``mean_field`` runs the unrolled, differentiable coordinate-ascent updates;
``exact_marginals`` and ``kl_to_exact`` enumerate all 2**N labellings and
serve as the reference for small grids.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor

N_LABELS = 2
MAX_EXACT_SITES = 16
Q_FLOOR = 1e-12

# "equal": cost on equal labels (the energy above); "differ": Potts-style cost on disagreeing labels.
COMPATIBILITIES = ("equal", "differ")


@dataclass(frozen=True)
class GridSpec:
    g: int = 3

    def __post_init__(self):
        if self.g < 1:
            raise ContractError(f"grid side must be >= 1, got {self.g}")

    @property
    def n(self) -> int:
        return self.g * self.g

    @property
    def n_pairs(self) -> int:
        return self.n * (self.n - 1) // 2

    def pairs(self) -> list[tuple[int, int]]:
        """Unordered site pairs (i < j) in the order used by the coupling vector."""
        return list(itertools.combinations(range(self.n), 2))

    def position(self, i: int) -> tuple[int, int]:
        return divmod(i, self.g)


def pair_index_matrix(n: int) -> np.ndarray:
    """N x N matrix mapping (i, j) to 1 + pair index; the diagonal maps to 0."""
    idx = np.zeros((n, n), dtype=np.int64)
    for k, (i, j) in enumerate(itertools.combinations(range(n), 2)):
        idx[i, j] = idx[j, i] = k + 1
    return idx


def coupling_matrix(w, n: int) -> Tensor:
    """Expand the per-pair weight vector into a symmetric N x N matrix with zero diagonal."""
    w = nx.as_tensor(w)
    if w.shape != (n * (n - 1) // 2,):
        raise ContractError(f"expected {n * (n - 1) // 2} coupling weights for {n} sites, got {w.shape}")
    padded = nx.concat([Tensor(np.zeros(1, dtype=w.data.dtype)), w])
    return nx.take(padded, pair_index_matrix(n))


def cosine_distance_matrix(embeddings) -> Tensor:
    """``1 - cos(x_i, x_j)`` for all pairs of a [N, d] or [B, N, d] embedding grid.

    Computed as half the squared distance between unit-normalised vectors, so
    identical embeddings give exactly zero.  An all-zero embedding has cosine
    0 with everything (distance 1).
    """
    x = nx.as_tensor(embeddings)
    batched = x.ndim == 3
    if not batched:
        x = nx.reshape(x, (1,) + x.shape)
    B, N, D = x.shape
    norms = nx.l2norm(x, axis=-1)
    zero = (norms.data == 0).astype(x.data.dtype)  # [B, N, 1]
    u = nx.div(x, nx.clamp_min(norms, nx.COSINE_EPS))
    diff = nx.sub(nx.reshape(u, (B, N, 1, D)), nx.reshape(u, (B, 1, N, D)))
    dist = nx.mul(nx.sum(nx.square(diff), axis=-1), 0.5)
    if zero.any():
        dist = nx.add(dist, 0.5 * (zero + zero.transpose(0, 2, 1)))
    if not batched:
        dist = nx.reshape(dist, (N, N))
    return dist


def pairwise_distances(embeddings, w) -> Tensor:
    """``d[i, j] = w_ij * (1 - cos(x_i, x_j))`` with a zero diagonal."""
    x = nx.as_tensor(embeddings)
    if x.ndim not in (2, 3):
        raise ContractError(f"embeddings must be [N, d] or [B, N, d], got {x.shape}")
    n = x.shape[-2]
    return nx.mul(coupling_matrix(w, n), cosine_distance_matrix(x))


def energy(y, psi_u, d) -> float:
    y = np.asarray(y, dtype=np.int64)
    psi_u = np.asarray(psi_u, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    n = psi_u.shape[0]
    if y.shape != (n,) or d.shape != (n, n):
        raise ContractError(f"energy: labels {y.shape}, unaries {psi_u.shape}, distances {d.shape}")
    same = np.triu(y[:, None] == y[None, :], k=1)
    return float(psi_u[np.arange(n), y].sum() + (d * same).sum())


def _all_configurations(n: int) -> np.ndarray:
    if n > MAX_EXACT_SITES:
        raise ContractError(f"exact enumeration refused for N={n} > {MAX_EXACT_SITES}")
    codes = np.arange(2**n, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n - 1, -1, -1)) & 1).astype(np.int64)


def _all_energies(psi_u: np.ndarray, d: np.ndarray, ys: np.ndarray, compat: str = "equal") -> np.ndarray:
    n = psi_u.shape[0]
    unary = psi_u[np.arange(n)[None, :], ys].sum(axis=1)
    iu, ju = np.triu_indices(n, k=1)
    same = ys[:, iu] == ys[:, ju]
    gate = same if compat == "equal" else ~same
    return unary + (gate * d[iu, ju][None, :]).sum(axis=1)


def _logsumexp(v: np.ndarray) -> float:
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def exact_marginals(psi_u, d, compat: str = "equal") -> tuple[np.ndarray, float]:
    """Exact per-site marginals and log Z of the Gibbs distribution, by enumeration."""
    psi_u = np.asarray(psi_u, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    n = psi_u.shape[0]
    ys = _all_configurations(n)
    neg_e = -_all_energies(psi_u, d, ys, compat)
    log_z = _logsumexp(neg_e)
    p = np.exp(neg_e - log_z)
    q = np.empty((n, N_LABELS))
    q[:, 1] = p @ ys
    q[:, 0] = 1.0 - q[:, 1]
    return q, log_z


def kl_to_exact(q, psi_u, d, compat: str = "equal") -> float:
    """KL(prod_i Q_i || P) by enumeration; never negative beyond rounding."""
    q = np.asarray(q, dtype=np.float64)
    psi_u = np.asarray(psi_u, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    n = psi_u.shape[0]
    ys = _all_configurations(n)
    e = _all_energies(psi_u, d, ys, compat)
    log_z = _logsumexp(-e)
    logq = np.log(np.clip(q, 1e-300, None))
    log_prod = logq[np.arange(n)[None, :], ys].sum(axis=1)
    prod = np.exp(log_prod)
    return float((prod * (log_prod + e)).sum() + log_z)


def mean_field(psi_u, d, T: int = 10, compat: str = "equal",
               on_update: Optional[Callable[[int, int, np.ndarray], None]] = None) -> Tensor:
    """Unrolled sequential mean-field inference; returns marginals ``Q`` shaped like ``psi_u``.

    Q starts at softmax(-psi_u).  Each of the T sweeps visits the sites in
    raster order and replaces Q_i in place with::

        Q_i(l) ∝ exp(-psi_u[i, l] - sum_j Q_j(l) d[i, j])      (compat="equal")
        Q_i(l) ∝ exp(-psi_u[i, l] - sum_j (1 - Q_j(l)) d[i, j])  (compat="differ")

    ``psi_u`` is [N, 2] or [B, N, 2]; ``d`` matches with [N, N] or [B, N, N].
    ``on_update(sweep, site, Q)`` is called after every site update (numpy
    copy of the current marginals) for monitoring.
    """
    if T < 0:
        raise ContractError(f"T must be >= 0, got {T}")
    if compat not in COMPATIBILITIES:
        raise ContractError(f"compat must be one of {COMPATIBILITIES}, got {compat!r}")
    psi_u, d = nx.as_tensor(psi_u), nx.as_tensor(d)
    batched = psi_u.ndim == 3
    if not batched:
        psi_u = nx.reshape(psi_u, (1,) + psi_u.shape)
        d = nx.reshape(d, (1,) + d.shape)
    B, N, L = psi_u.shape
    if L != N_LABELS or d.shape != (B, N, N):
        raise ContractError(f"mean_field: unaries {psi_u.shape}, distances {d.shape}")

    neg_psi = nx.neg(psi_u)
    rows = [nx.softmax(nx.reshape(neg_psi[:, i, :], (B, L))) for i in range(N)]
    if T > 0 and N > 1:
        neg_rows = [nx.reshape(neg_psi[:, i, :], (B, L)) for i in range(N)]
        d_rows = [d[:, i : i + 1, :] for i in range(N)]
        if compat == "differ":
            d_totals = [nx.reshape(nx.sum(d_rows[i], axis=-1), (B, 1)) for i in range(N)]
        for sweep in range(T):
            for i in range(N):
                q = nx.stack(rows, axis=1)
                msg = nx.reshape(nx.matmul(d_rows[i], q), (B, L))
                if compat == "differ":
                    msg = nx.sub(d_totals[i], msg)
                rows[i] = nx.softmax(nx.sub(neg_rows[i], msg))
                if on_update is not None:
                    snapshot = np.stack([r.data for r in rows], axis=1)
                    on_update(sweep, i, snapshot if batched else snapshot[0])
    q = nx.stack(rows, axis=1)
    return q if batched else nx.reshape(q, (N, L))


def crf_loss(q, labels) -> Tensor:
    """Mean over patches of ``-log Q_i(label_i)`` with Q floored at 1e-12."""
    q = nx.as_tensor(q)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != q.shape[:-1]:
        raise ContractError(f"labels {labels.shape} do not match marginals {q.shape}")
    onehot = np.eye(q.shape[-1], dtype=q.data.dtype)[labels]
    logq = nx.log(nx.clamp_min(q, Q_FLOOR))
    return nx.neg(nx.mul(nx.sum(nx.mul(logq, onehot)), 1.0 / labels.size))
