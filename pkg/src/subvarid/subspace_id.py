"""Closed-form Markov-parameter estimation and Ho-Kalman realization.

The estimator reads G(t) off the last t*p columns of Y(k+h+t;s) L^{-1}[y,u];
the batched variant averages per-batch estimates with batch i starting at
k = s*i.  All generalized inverses are Moore-Penrose.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, EstimationError, OrderDeficiencyError
from .lti_core import (
    DEFAULT_COND_LIMIT,
    MarkovMatrix,
    _as_2d,
    build_L,
    lead_outputs,
    window_size,
)


@dataclass(frozen=True)
class EstimatorConfig:
    """Window geometry for the subspace estimator.

    h block rows of outputs (h >= model order for exactness), t Markov blocks
    to identify, N batches starting at k, k + s, k + 2s, ...  The derived
    window width is s = h*n + (h+t)*p and one batch consumes the data range
    [start, start + s + h + t - 1].
    """

    h: int
    t: int
    N: int = 1
    k: int = 0
    cond_limit: float = DEFAULT_COND_LIMIT

    def __post_init__(self):
        if self.h < 1 or self.t < 1:
            raise ConfigurationError("h and t must be >= 1")
        if self.N < 1:
            raise ConfigurationError("batch count N must be >= 1")
        if self.k < 0:
            raise ConfigurationError("start time k must be >= 0")

    def s(self, n: int, p: int) -> int:
        return window_size(self.h, self.t, n, p)

    def r(self, p: int) -> int:
        """Columns selected for G(t); dimensional consistency forces r = t*p."""
        return self.t * p

    def batch_start(self, i: int, n: int, p: int) -> int:
        return self.k + self.s(n, p) * i

    def samples_needed(self, n: int, p: int) -> int:
        """Data length covering all N batches (y up to the last lead window)."""
        s = self.s(n, p)
        return self.batch_start(self.N - 1, n, p) + s + self.h + self.t


@dataclass(frozen=True)
class Realization:
    """State-space realization recovered from Markov parameters.

    The matrices are one representative of the similarity class; only the
    Markov products C A^i B are identifiable.
    """

    A_hat: np.ndarray
    B_hat: np.ndarray
    C_hat: np.ndarray
    singular_values: np.ndarray
    similarity_free: bool = True

    def markov(self, t: int) -> MarkovMatrix:
        blocks = []
        CAk = self.C_hat
        for _ in range(t):
            blocks.append(CAk @ self.B_hat)
            CAk = CAk @ self.A_hat
        return MarkovMatrix(G=np.hstack(blocks[::-1]), t=t)


@dataclass
class BatchDiagnostics:
    """Bookkeeping from a batched estimation run."""

    used: int = 0
    skipped: list = field(default_factory=list)
    condition_numbers: list = field(default_factory=list)


def _single_window_estimate(ya, ua, k, h, t, cond_limit, pseudo=False):
    """G(t) from one window; returns (G, cond) or raises EstimationError."""
    n, p = ya.shape[1], ua.shape[1]
    s = window_size(h, t, n, p)
    r = t * p
    L = build_L(ya, ua, k, h, t)
    lead = lead_outputs(ya, k, h, t, s)
    cond = float(np.linalg.cond(L))
    if not np.isfinite(cond) or cond > cond_limit:
        raise EstimationError(
            f"data matrix at k={k} is numerically singular (cond={cond:.3e})",
            condition_number=cond,
        )
    if pseudo:
        G = lead @ np.linalg.pinv(L)[:, s - r :]
    else:
        # lead @ inv(L), last r columns
        G = np.linalg.solve(L.T, lead.T).T[:, s - r :]
    return G, cond


def estimate_markov_noise_free(y, u, cfg: EstimatorConfig) -> MarkovMatrix:
    """Single-window closed-form estimate; exact on noise-free data.

    Raises EstimationError (carrying the condition number) when the data
    matrix is numerically singular.
    """
    ya, ua = _as_2d(y), _as_2d(u)
    G, _ = _single_window_estimate(ya, ua, cfg.k, cfg.h, cfg.t, cfg.cond_limit)
    return MarkovMatrix(G=G, t=cfg.t)


def estimate_markov_batched(
    y, u, cfg: EstimatorConfig, diagnostics: Optional[BatchDiagnostics] = None
) -> MarkovMatrix:
    """Average of per-batch estimates over N batches (Moore-Penrose per batch).

    Numerically degenerate batches are skipped with a warning and the average
    renormalized; if every batch degenerates an EstimationError is raised.
    """
    ya, ua = _as_2d(y), _as_2d(u)
    n, p = ya.shape[1], ua.shape[1]
    if len(ya) < cfg.samples_needed(n, p):
        raise ConfigurationError(
            f"need {cfg.samples_needed(n, p)} samples for {cfg.N} batches, got {len(ya)}"
        )
    total = None
    used = 0
    worst_cond = 0.0
    for i in range(cfg.N):
        k_i = cfg.batch_start(i, n, p)
        try:
            G_i, cond = _single_window_estimate(ya, ua, k_i, cfg.h, cfg.t, cfg.cond_limit, pseudo=True)
        except EstimationError as exc:
            warnings.warn(f"skipping degenerate batch {i}: {exc}", stacklevel=2)
            if diagnostics is not None:
                diagnostics.skipped.append(i)
            worst_cond = max(worst_cond, exc.condition_number or np.inf)
            continue
        total = G_i if total is None else total + G_i
        used += 1
        if diagnostics is not None:
            diagnostics.condition_numbers.append(cond)
    if total is None:
        raise EstimationError(
            f"all {cfg.N} batches numerically degenerate", condition_number=worst_cond
        )
    if diagnostics is not None:
        diagnostics.used = used
    return MarkovMatrix(G=total / used, t=cfg.t)


def ho_kalman(G: MarkovMatrix, m: int, rank_tol: float = 1e-9) -> Realization:
    """Balanced realization of order m from the Markov blocks of G.

    Needs t >= 2m so the shifted Hankel is available.  The singular-value
    split uses the symmetric square root; rank deficiency below order m
    raises OrderDeficiencyError with the singular values attached.
    """
    if m < 1:
        raise ConfigurationError("order m must be >= 1")
    if G.t < 2 * m:
        raise ConfigurationError(f"need t >= 2m = {2 * m} Markov blocks, got t = {G.t}")
    n, p = G.n, G.p
    g = [G.markov_parameter(i + 1) for i in range(G.t)]  # g[i] = C A^i B
    q = m
    H = np.block([[g[a + b] for b in range(q)] for a in range(q)])
    H_shift = np.block([[g[a + b + 1] for b in range(q)] for a in range(q)])
    U, sv, Vt = np.linalg.svd(H)
    if sv[0] <= 0 or sv[m - 1] <= rank_tol * sv[0]:
        raise OrderDeficiencyError(
            f"Markov Hankel has numerical rank < {m}", singular_values=sv
        )
    sq = np.sqrt(sv[:m])
    obs = U[:, :m] * sq
    ctr = sq[:, None] * Vt[:m]
    A_hat = np.linalg.pinv(obs) @ H_shift @ np.linalg.pinv(ctr)
    B_hat = ctr[:, :p]
    C_hat = obs[:n, :]
    return Realization(A_hat=A_hat, B_hat=B_hat, C_hat=C_hat, singular_values=sv)


def identification_error(G_hat: MarkovMatrix, G_star: MarkovMatrix) -> float:
    """Squared Frobenius norm of the estimation error."""
    if G_hat.G.shape != G_star.G.shape:
        raise ConfigurationError(
            f"shape mismatch: {G_hat.G.shape} vs {G_star.G.shape}"
        )
    return float(np.sum((G_hat.G - G_star.G) ** 2))
