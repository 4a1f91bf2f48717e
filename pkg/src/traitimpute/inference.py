"""Coordinate-ascent variational inference for the bilinear trait model.

Every factor update is the exact conditional optimum of the ELBO given all other
factors.  Patient factors only interact with measurement factors (and vice
versa), so all patients of one kind are updated together in a single vectorized
step; this is identical to updating them one at a time in ascending order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import ObservationMatrix
from .model import Hyperparams, VariationalState, init_state, prior_state

logger = logging.getLogger(__name__)

PATIENT = "patient"
MEASUREMENT = "measurement"
_LOG_2PI = np.log(2.0 * np.pi)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    max_sweeps: int = 200
    elbo_rel_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if not self.elbo_rel_tol > 0:
            raise ValueError("elbo_rel_tol must be > 0")


@dataclass(eq=False)
class FitResult:
    state: VariationalState
    elbo_trace: list = field(default_factory=list)
    n_sweeps: int = 0
    converged: bool = False

    def to_dict(self) -> dict:
        return {"state": self.state.to_dict(), "elbo_trace": list(self.elbo_trace),
                "n_sweeps": self.n_sweeps, "converged": self.converged}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(VariationalState.from_dict(d["state"]), [float(x) for x in d["elbo_trace"]],
                   int(d["n_sweeps"]), bool(d["converged"]))


class _Design:
    """Observation index shared by all updates of one fit.

    ``agg[side]`` is a sparse ``(n_side, nnz)`` 0/1 matrix summing per-entry
    quantities into per-patient or per-measurement totals.
    """

    def __init__(self, data: ObservationMatrix):
        self.n_rows, self.n_cols = data.shape
        self.rows, self.cols, self.y = data.rows, data.cols, data.values
        nnz = self.y.size
        ones, pos = np.ones(nnz), np.arange(nnz)
        self.agg = {
            PATIENT: sp.csr_matrix((ones, (self.rows, pos)), shape=(self.n_rows, nnz)),
            MEASUREMENT: sp.csr_matrix((ones, (self.cols, pos)), shape=(self.n_cols, nnz)),
        }
        self.counts = {PATIENT: np.bincount(self.rows, minlength=self.n_rows),
                       MEASUREMENT: np.bincount(self.cols, minlength=self.n_cols)}

    def own_other(self, side):
        """Index arrays (this side, opposite side) for every entry."""
        return (self.rows, self.cols) if side == PATIENT else (self.cols, self.rows)


def _check_side(side):
    if side not in (PATIENT, MEASUREMENT):
        raise ValueError(f"side must be {PATIENT!r} or {MEASUREMENT!r}, got {side!r}")


def _views(state: VariationalState, side):
    """(own mean, own cov, own bias mean, own bias var, other ...) for a side."""
    if side == PATIENT:
        return (state.P_mean, state.P_cov, state.bP_mean, state.bP_var,
                state.R_mean, state.R_cov, state.bR_mean)
    return (state.R_mean, state.R_cov, state.bR_mean, state.bR_var,
            state.P_mean, state.P_cov, state.bP_mean)


def _check_hyper(hyper: Hyperparams):
    if not (hyper.var_prior > 0 and hyper.noise_var > 0):
        raise ValueError("inference needs var_prior > 0 and noise_var > 0")


def _update_traits(state: VariationalState, design: _Design, hyper: Hyperparams, side, index=None):
    m_own, S_own, b_own, _, m_oth, S_oth, b_oth = _views(state, side)
    T = state.T
    if T == 0:
        return
    own, oth = design.own_other(side)
    prior_mu = hyper.mu_P if side == PATIENT else hyper.mu_R
    vp, nv = hyper.var_prior, hyper.noise_var

    E_outer = S_oth + np.einsum("mt,ms->mts", m_oth, m_oth)
    resid = design.y - b_own[own] - b_oth[oth]
    agg = design.agg[side]
    prec_sum = (agg @ E_outer[oth].reshape(-1, T * T)).reshape(-1, T, T)
    lin_sum = agg @ (m_oth[oth] * resid[:, None])

    idx = np.arange(m_own.shape[0]) if index is None else np.atleast_1d(index)
    counts = design.counts[side][idx]
    seen = idx[counts > 0]
    unseen = idx[counts == 0]

    if seen.size:
        prec = np.eye(T) / vp + prec_sum[seen] / nv
        try:
            L = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            raise NumericalError(f"{side} trait precision is not positive definite") from None
        L_inv = np.linalg.inv(L)
        cov = np.swapaxes(L_inv, 1, 2) @ L_inv
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        h = prior_mu / vp + lin_sum[seen] / nv
        S_own[seen] = cov
        m_own[seen] = np.einsum("kts,ks->kt", cov, h)
    if unseen.size:
        S_own[unseen] = vp * np.eye(T)
        m_own[unseen] = prior_mu


def _update_biases(state: VariationalState, design: _Design, hyper: Hyperparams, side, index=None):
    m_own, _, b_own, v_own, m_oth, _, b_oth = _views(state, side)
    own, oth = design.own_other(side)
    prior_mu = hyper.mu_bP if side == PATIENT else hyper.mu_bR
    vp, nv = hyper.var_prior, hyper.noise_var

    resid = design.y - np.einsum("kt,kt->k", m_own[own], m_oth[oth]) - b_oth[oth]
    resid_sum = design.agg[side] @ resid
    idx = np.arange(b_own.shape[0]) if index is None else np.atleast_1d(index)
    counts = design.counts[side][idx]
    seen = idx[counts > 0]
    unseen = idx[counts == 0]
    var = 1.0 / (1.0 / vp + counts[counts > 0] / nv)
    v_own[seen] = var
    b_own[seen] = var * (prior_mu / vp + resid_sum[seen] / nv)
    v_own[unseen] = vp
    b_own[unseen] = prior_mu


def update_trait_vector(state: VariationalState, data: ObservationMatrix, hyper: Hyperparams,
                        side: str, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Set one trait vector's posterior to its conditional optimum.

    The state is updated in place; the new ``(mean, covariance)`` is returned.
    """
    _check_side(side)
    _check_hyper(hyper)
    if hyper.T < 1:
        raise ValueError("trait update needs T >= 1")
    _update_traits(state, _Design(data), hyper, side, index)
    if side == PATIENT:
        return state.P_mean[index].copy(), state.P_cov[index].copy()
    return state.R_mean[index].copy(), state.R_cov[index].copy()


def update_bias(state: VariationalState, data: ObservationMatrix, hyper: Hyperparams,
                side: str, index: int) -> tuple[float, float]:
    """Set one bias posterior to its conditional optimum; returns ``(mean, variance)``."""
    _check_side(side)
    _check_hyper(hyper)
    _update_biases(state, _Design(data), hyper, side, index)
    if side == PATIENT:
        return float(state.bP_mean[index]), float(state.bP_var[index])
    return float(state.bR_mean[index]), float(state.bR_var[index])


def _sweep(state, design, hyper, order=(("bias", PATIENT), ("bias", MEASUREMENT),
                                        ("trait", PATIENT), ("trait", MEASUREMENT))):
    for what, side in order:
        if what == "bias":
            _update_biases(state, design, hyper, side)
        else:
            _update_traits(state, design, hyper, side)
    return state


def sweep(state: VariationalState, data: ObservationMatrix, hyper: Hyperparams, order=None) -> VariationalState:
    """One pass over every factor: patient biases, measurement biases, patient
    traits, measurement traits.  ``order`` overrides the schedule with a sequence
    of ``(kind, side)`` pairs, ``kind`` being ``"bias"`` or ``"trait"``."""
    _check_hyper(hyper)
    design = _Design(data)
    if order is None:
        return _sweep(state, design, hyper)
    return _sweep(state, design, hyper, order)


def _gauss_kl(mean, cov, prior_mu, vp):
    T = mean.shape[1]
    if T == 0 or mean.shape[0] == 0:
        return 0.0
    _, logdet = np.linalg.slogdet(cov)
    tr = np.trace(cov, axis1=1, axis2=2)
    sq = np.sum((mean - prior_mu) ** 2, axis=1)
    return 0.5 * float(np.sum(tr / vp + sq / vp - T + T * np.log(vp) - logdet))


def _scalar_kl(mean, var, prior_mu, vp):
    return 0.5 * float(np.sum(var / vp + (mean - prior_mu) ** 2 / vp - 1.0 + np.log(vp) - np.log(var)))


def _elbo(state: VariationalState, design: _Design, hyper: Hyperparams) -> float:
    r, c, y = design.rows, design.cols, design.y
    mu, mi = state.P_mean[r], state.R_mean[c]
    Su, Si = state.P_cov[r], state.R_cov[c]
    mean = np.einsum("kt,kt->k", mu, mi) + state.bP_mean[r] + state.bR_mean[c]
    expected_sq = ((y - mean) ** 2
                   + np.einsum("kts,kst->k", Su, Si)
                   + np.einsum("kt,kts,ks->k", mu, Si, mu)
                   + np.einsum("kt,kts,ks->k", mi, Su, mi)
                   + state.bP_var[r] + state.bR_var[c])
    nv, vp = hyper.noise_var, hyper.var_prior
    loglik = -0.5 * y.size * (_LOG_2PI + np.log(nv)) - 0.5 * float(np.sum(expected_sq)) / nv
    kl = (_gauss_kl(state.P_mean, state.P_cov, hyper.mu_P, vp)
          + _gauss_kl(state.R_mean, state.R_cov, hyper.mu_R, vp)
          + _scalar_kl(state.bP_mean, state.bP_var, hyper.mu_bP, vp)
          + _scalar_kl(state.bR_mean, state.bR_var, hyper.mu_bR, vp))
    return float(loglik - kl)


def elbo(state: VariationalState, data: ObservationMatrix, hyper: Hyperparams) -> float:
    """Expected Gaussian log-likelihood of the observed cells minus KL(q || prior)."""
    _check_hyper(hyper)
    return _elbo(state, _Design(data), hyper)


def fit(data: ObservationMatrix, hyper: Hyperparams, config: FitConfig | None = None,
        state: VariationalState | None = None) -> FitResult:
    """Run sweeps from a jittered prior state until the relative ELBO change
    drops to ``config.elbo_rel_tol`` or ``config.max_sweeps`` is reached."""
    config = config or FitConfig()
    _check_hyper(hyper)
    if data.n_observed == 0:
        raise ValueError("cannot fit a matrix with no observed entries")
    design = _Design(data)
    if state is None:
        state = init_state(hyper, data.n_rows, data.n_cols, config.seed)
    prev = _elbo(state, design, hyper)
    trace = []
    converged = False
    for t in range(1, config.max_sweeps + 1):
        _sweep(state, design, hyper)
        current = _elbo(state, design, hyper)
        if not np.isfinite(current):
            raise NumericalError(f"non-finite ELBO at sweep {t}")
        trace.append(current)
        if abs(current - prev) <= config.elbo_rel_tol * abs(current):
            converged = True
            break
        prev = current
    logger.debug("fit: %d sweeps, elbo %.6g, converged=%s", len(trace), trace[-1], converged)
    return FitResult(state, trace, len(trace), converged)


__all__ = ["FitConfig", "FitResult", "NumericalError", "PATIENT", "MEASUREMENT", "update_trait_vector",
           "update_bias", "sweep", "elbo", "fit", "prior_state"]
