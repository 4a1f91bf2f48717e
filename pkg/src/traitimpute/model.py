"""Bilinear trait model with patient and measurement biases.

A cell is modelled as ``y[u, i] = P[u] . R[i] + bP[u] + bR[i] + noise`` where every
latent element has an independent Gaussian prior.  The variational posterior keeps
a full-covariance Gaussian per trait vector and a scalar Gaussian per bias.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import ObservationMatrix

DEFAULT_TRAITS = 4
DEFAULT_PRIOR_VAR = 0.5
DEFAULT_NOISE_VAR = 0.01
INIT_JITTER = 0.01


@dataclass(frozen=True)
class Hyperparams:
    """Prior and likelihood settings.

    ``mu_P``/``mu_R`` are the prior means of every trait element, ``mu_bP``/``mu_bR``
    the prior means of the biases; all latents share ``var_prior``.
    """

    T: int = DEFAULT_TRAITS
    mu_P: float = 0.0
    mu_R: float = 0.0
    mu_bP: float = 0.25
    mu_bR: float = 0.25
    var_prior: float = DEFAULT_PRIOR_VAR
    noise_var: float = DEFAULT_NOISE_VAR

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 0:
            raise ValueError(f"T must be a non-negative integer, got {self.T}")
        # zero variances are allowed so the generator can produce deterministic data;
        # inference refuses them.
        if not self.var_prior >= 0 or not self.noise_var >= 0:
            raise ValueError("variances must be non-negative")

    def means(self) -> tuple[float, float, float, float]:
        return self.mu_P, self.mu_R, self.mu_bP, self.mu_bR

    def with_means(self, mu_P, mu_R, mu_bP, mu_bR) -> "Hyperparams":
        return replace(self, mu_P=mu_P, mu_R=mu_R, mu_bP=mu_bP, mu_bR=mu_bR)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class VariationalState:
    """Mean-field Gaussian posterior over all latents.

    Trait arrays have shapes ``(N, T)``/``(N, T, T)`` for patients and
    ``(M, T)``/``(M, T, T)`` for measurements.  Updates mutate the arrays in place.
    """

    P_mean: np.ndarray
    P_cov: np.ndarray
    bP_mean: np.ndarray
    bP_var: np.ndarray
    R_mean: np.ndarray
    R_cov: np.ndarray
    bR_mean: np.ndarray
    bR_var: np.ndarray

    @property
    def T(self) -> int:
        return self.P_mean.shape[1]

    @property
    def n_rows(self) -> int:
        return self.P_mean.shape[0]

    @property
    def n_cols(self) -> int:
        return self.R_mean.shape[0]

    def copy(self) -> "VariationalState":
        return VariationalState(**{k: v.copy() for k, v in self.__dict__.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self.__dict__)

    def to_dict(self) -> dict:
        out = {"T": self.T, "n_rows": self.n_rows, "n_cols": self.n_cols}
        out.update({k: v.tolist() for k, v in self.__dict__.items()})
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "VariationalState":
        T, n, m = int(d["T"]), int(d["n_rows"]), int(d["n_cols"])
        shapes = {"P_mean": (n, T), "P_cov": (n, T, T), "bP_mean": (n,), "bP_var": (n,),
                  "R_mean": (m, T), "R_cov": (m, T, T), "bR_mean": (m,), "bR_var": (m,)}
        return cls(**{k: np.asarray(d[k], dtype=np.float64).reshape(s) for k, s in shapes.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "VariationalState":
        return cls.from_dict(json.loads(text))


def prior_state(hyper: Hyperparams, n_rows: int, n_cols: int) -> VariationalState:
    T, vp = hyper.T, hyper.var_prior
    eye = np.eye(T)
    return VariationalState(
        P_mean=np.full((n_rows, T), float(hyper.mu_P)),
        P_cov=np.broadcast_to(vp * eye, (n_rows, T, T)).copy(),
        bP_mean=np.full(n_rows, float(hyper.mu_bP)),
        bP_var=np.full(n_rows, float(vp)),
        R_mean=np.full((n_cols, T), float(hyper.mu_R)),
        R_cov=np.broadcast_to(vp * eye, (n_cols, T, T)).copy(),
        bR_mean=np.full(n_cols, float(hyper.mu_bR)),
        bR_var=np.full(n_cols, float(vp)),
    )


def init_state(hyper: Hyperparams, n_rows: int, n_cols: int, seed: int = 0,
               jitter: float = INIT_JITTER) -> VariationalState:
    """Prior-initialized state with Gaussian jitter on the trait means only."""
    if n_rows < 1 or n_cols < 1:
        raise ValueError("need at least one row and one column")
    state = prior_state(hyper, n_rows, n_cols)
    if jitter > 0 and hyper.T > 0:
        rng = np.random.default_rng(seed)
        state.P_mean += jitter * rng.standard_normal(state.P_mean.shape)
        state.R_mean += jitter * rng.standard_normal(state.R_mean.shape)
    return state


def _check_index(state: VariationalState, u: int, i: int):
    if not (0 <= u < state.n_rows and 0 <= i < state.n_cols):
        raise IndexError(f"cell ({u}, {i}) outside {state.n_rows}x{state.n_cols}")


def predict_mean(state: VariationalState, u: int, i: int) -> float:
    _check_index(state, u, i)
    return float(state.P_mean[u] @ state.R_mean[i] + state.bP_mean[u] + state.bR_mean[i])


def predict_with_variance(state: VariationalState, hyper: Hyperparams, u: int, i: int) -> tuple[float, float]:
    """Predictive mean and variance of a cell under the factorized posterior."""
    _check_index(state, u, i)
    mu, mi = state.P_mean[u], state.R_mean[i]
    Su, Si = state.P_cov[u], state.R_cov[i]
    var = (hyper.noise_var + np.sum(Su * Si.T) + mu @ Si @ mu + mi @ Su @ mi
           + state.bP_var[u] + state.bR_var[i])
    return predict_mean(state, u, i), float(var)


def predict_entries(state: VariationalState, rows, cols) -> np.ndarray:
    """Vectorized posterior-mean prediction for many cells."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    return (np.einsum("kt,kt->k", state.P_mean[rows], state.R_mean[cols])
            + state.bP_mean[rows] + state.bR_mean[cols])


def predict_dense(state: VariationalState) -> np.ndarray:
    return state.P_mean @ state.R_mean.T + state.bP_mean[:, None] + state.bR_mean[None, :]


# ---------------------------------------------------------------------- synthetic

@dataclass(eq=False)
class SyntheticInstance:
    P: np.ndarray
    R: np.ndarray
    bP: np.ndarray
    bR: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray
    observed: ObservationMatrix
    hyper: Hyperparams
    seed: int

    @property
    def missing_mask(self) -> np.ndarray:
        return ~self.observed.mask()

    def latents_dict(self) -> dict:
        return {
            "seed": self.seed,
            "hyperparams": self.hyper.to_dict(),
            "P": self.P.tolist(),
            "R": self.R.tolist(),
            "bP": self.bP.tolist(),
            "bR": self.bR.tolist(),
        }


def n_masked_cells(n_cells: int, missing_fraction: float) -> int:
    # the tiny epsilon keeps fractions such as k / n_cells from flooring to k - 1
    return int(np.floor(missing_fraction * n_cells + 1e-9))


def generate_synthetic(n_rows: int, n_cols: int, hyper: Hyperparams, missing_fraction: float,
                       seed: int = 0) -> SyntheticInstance:
    """Sample latents from the prior, build the clean matrix, add noise, mask cells.

    Exactly ``floor(missing_fraction * n_rows * n_cols)`` cells, chosen uniformly,
    are hidden from ``observed``.
    """
    if not 0 <= missing_fraction < 1:
        raise ValueError("missing_fraction must lie in [0, 1)")
    n_cells = n_rows * n_cols
    n_missing = n_masked_cells(n_cells, missing_fraction)
    if n_cells - n_missing < 1:
        raise ValueError("missing_fraction leaves no observed entry")
    latent_ss, noise_ss, mask_ss = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(latent_ss)
    sd = np.sqrt(hyper.var_prior)
    T = hyper.T
    P = hyper.mu_P + sd * rng.standard_normal((n_rows, T))
    R = hyper.mu_R + sd * rng.standard_normal((n_cols, T))
    bP = hyper.mu_bP + sd * rng.standard_normal(n_rows)
    bR = hyper.mu_bR + sd * rng.standard_normal(n_cols)
    clean = P @ R.T + bP[:, None] + bR[None, :]
    noisy = clean + np.sqrt(hyper.noise_var) * np.random.default_rng(noise_ss).standard_normal(clean.shape)

    hidden = np.random.default_rng(mask_ss).permutation(n_cells)[:n_missing]
    keep = np.ones(n_cells, dtype=bool)
    keep[hidden] = False
    rows, cols = np.divmod(np.flatnonzero(keep), n_cols)
    observed = ObservationMatrix(n_rows, n_cols, rows, cols, noisy[rows, cols],
                                 tuple(f"p{u}" for u in range(n_rows)),
                                 tuple(f"m{i}" for i in range(n_cols)))
    return SyntheticInstance(P, R, bP, bR, clean, noisy, observed, hyper, seed)
