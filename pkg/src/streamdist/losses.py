"""Loss functions, (pseudo-)gradients, projections, and risk evaluators.

Three problem families are supported:

* ``logistic`` - binary linear classification with the log loss.  Models are
  augmented vectors of length d+1 whose last coordinate is the intercept, so
  the score of a sample x is w[:-1] @ x + w[-1].
* ``hinge`` - same model convention, max-margin loss, subgradients only.
* ``pca_krasulina`` - top-eigenvector estimation.  The loss of a sample z at
  a nonzero w is -(w@z)^2 / ||w||^2 and the update direction is the ascent
  pseudo-gradient that is always orthogonal to w.

Scalar entry points (``loss``, ``gradient``) take one sample; the ``batch_``
variants are vectorized over a (m, d) sample block and are what the
simulators call in their inner loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOSS_KINDS = ("logistic", "hinge", "pca_krasulina")


@dataclass(frozen=True)
class LossModel:
    """Loss family plus the problem constants the schedules and bounds need.

    ``dimension`` is the raw data dimension d (models for the supervised
    kinds live in R^(d+1)).  ``expanse`` D_W is the radius of the feasible
    ball; None means unconstrained, and is mandatory-None for the PCA kind
    whose iterates must stay unconstrained.  ``data_bound`` kappa is the
    sample-norm bound assumed by the PCA analysis (an empirical estimate is
    acceptable here; Gaussian streams are unbounded and we record the
    observed maximum instead of truncating).
    """

    kind: str
    dimension: int
    smoothness: float | None = None      # L
    noise_variance: float | None = None  # sigma^2
    data_bound: float | None = None      # kappa
    expanse: float | None = None         # D_W

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if self.kind in ("logistic", "pca_krasulina") and self.smoothness is not None and self.smoothness < 0:
            raise ValueError("smoothness must be nonnegative")
        if self.kind == "pca_krasulina":
            if self.expanse is not None:
                raise ValueError("pca_krasulina iterates are unconstrained; expanse must be None")
            if self.data_bound is not None and self.data_bound <= 0:
                raise ValueError("data_bound must be positive")
        if self.expanse is not None and self.expanse <= 0:
            raise ValueError("expanse must be positive")

    @property
    def model_dimension(self) -> int:
        """Length of the parameter vector (d+1 for the supervised kinds)."""
        return self.dimension + 1 if self.kind in ("logistic", "hinge") else self.dimension


@dataclass(frozen=True)
class SpectrumSpec:
    """Eigenvalues of the data covariance, sorted nonincreasing."""

    eigenvalues: tuple[float, ...]

    def __post_init__(self) -> None:
        lam = self.eigenvalues
        if len(lam) < 2:
            raise ValueError("need at least two eigenvalues")
        if any(l < 0 for l in lam):
            raise ValueError("eigenvalues must be nonnegative")
        if any(lam[i] < lam[i + 1] for i in range(len(lam) - 1)):
            raise ValueError("eigenvalues must be sorted nonincreasing")

    @property
    def gap(self) -> float:
        return self.eigenvalues[0] - self.eigenvalues[1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.eigenvalues, dtype=np.float64)


def _sigmoid(m: np.ndarray | float) -> np.ndarray | float:
    """1/(1+exp(-m)) without overflow for large |m|."""
    e = np.exp(-np.abs(m))
    return np.where(np.asarray(m) >= 0, 1.0, e) / (1.0 + e)


def _augment(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, [1.0]])


def _margin(w: np.ndarray, x: np.ndarray) -> float:
    # score with the intercept carried as the last model coordinate
    return float(w[:-1] @ x + w[-1])


def loss(model: LossModel, w: np.ndarray, z) -> float:
    """Per-sample loss; z is (x, y) for the supervised kinds, a vector for PCA."""
    if model.kind == "logistic":
        x, y = z
        return float(np.logaddexp(0.0, -y * _margin(w, x)))
    if model.kind == "hinge":
        x, y = z
        return max(0.0, 1.0 - y * _margin(w, x))
    nrm2 = float(w @ w)
    if nrm2 <= 0.0:
        raise ValueError("PCA loss undefined at w = 0")
    proj = float(w @ z)
    return -proj * proj / nrm2


def gradient(model: LossModel, w: np.ndarray, z) -> np.ndarray:
    """Per-sample (sub)gradient; PCA routes to krasulina_direction."""
    if model.kind == "pca_krasulina":
        return krasulina_direction(w, z)
    x, y = z
    if x.shape[0] + 1 != w.shape[0]:
        raise ValueError(f"model length {w.shape[0]} does not match sample dimension {x.shape[0]}")
    xt = _augment(x)
    m = y * float(w @ xt)
    if model.kind == "logistic":
        return (-y * float(_sigmoid(-m))) * xt
    # hinge: 0 at margin >= 1, including exactly 1 (deterministic subgradient choice)
    if 1.0 - m > 0.0:
        return -y * xt
    return np.zeros_like(w)


def krasulina_direction(w: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Ascent pseudo-gradient z(z@w) - ((w@z)(z@w)/||w||^2) w; orthogonal to w."""
    nrm2 = float(w @ w)
    if nrm2 <= 0.0:
        raise ValueError("Krasulina direction undefined at w = 0")
    proj = float(z @ w)
    return proj * z - (proj * proj / nrm2) * w


def project_ball(w: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto the origin-centered ball of the given radius."""
    nrm = float(np.linalg.norm(w))
    if nrm <= radius:
        return w
    return w * (radius / nrm)


def project(model: LossModel, w: np.ndarray) -> np.ndarray:
    if model.expanse is None:
        raise ValueError("projection requires a configured expanse")
    return project_ball(w, model.expanse)


def pca_excess_risk(spectrum: SpectrumSpec, basis: np.ndarray, w: np.ndarray) -> float:
    """lambda_1 - w'Sigma w/||w||^2 for Sigma = basis diag(lambda) basis'."""
    nrm2 = float(w @ w)
    if nrm2 <= 0.0:
        raise ValueError("excess risk undefined at w = 0")
    coeff = basis.T @ w
    rayleigh = float(coeff @ (spectrum.as_array() * coeff)) / nrm2
    return spectrum.eigenvalues[0] - rayleigh


def estimate_risk(model: LossModel, w: np.ndarray, holdout) -> float:
    """Monte Carlo risk: mean loss over a held-out sample set."""
    if model.kind == "pca_krasulina":
        z = np.asarray(holdout, dtype=np.float64)
        if z.size == 0:
            raise ValueError("holdout must be nonempty")
        nrm2 = float(w @ w)
        if nrm2 <= 0.0:
            raise ValueError("PCA loss undefined at w = 0")
        proj = z @ w
        return float(np.mean(-(proj * proj) / nrm2))
    x, y = holdout
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("holdout must be nonempty")
    margins = np.asarray(y, dtype=np.float64) * (x @ w[:-1] + w[-1])
    if model.kind == "logistic":
        return float(np.mean(np.logaddexp(0.0, -margins)))
    return float(np.mean(np.maximum(0.0, 1.0 - margins)))


# ---------------------------------------------------------------------------
# Vectorized batch kernels used by the simulators.
# ---------------------------------------------------------------------------

def batch_gradient(model: LossModel, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean (sub)gradient of a supervised mini-batch at a single iterate."""
    margins = y * (x @ w[:-1] + w[-1])
    if model.kind == "logistic":
        coeff = -y * np.asarray(_sigmoid(-margins))
    else:
        coeff = np.where(1.0 - margins > 0.0, -y, 0.0)
    g = np.empty_like(w)
    g[:-1] = coeff @ x
    g[-1] = coeff.sum()
    g /= x.shape[0]
    return g


def multi_batch_gradient(model: LossModel, iterates: np.ndarray,
                         x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-node mean gradients: iterates (N, d+1), x (N, m, d), y (N, m)."""
    margins = y * (np.einsum("nmd,nd->nm", x, iterates[:, :-1]) + iterates[:, -1:])
    if model.kind == "logistic":
        coeff = -y * np.asarray(_sigmoid(-margins))
    else:
        coeff = np.where(1.0 - margins > 0.0, -y, 0.0)
    g = np.empty_like(iterates)
    g[:, :-1] = np.einsum("nm,nmd->nd", coeff, x)
    g[:, -1] = coeff.sum(axis=1)
    g /= x.shape[1]
    return g


def batch_krasulina_sum(w: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Sum of per-sample Krasulina directions over a (m, d) block at one w."""
    nrm2 = float(w @ w)
    if nrm2 <= 0.0:
        raise ValueError("Krasulina direction undefined at w = 0")
    proj = z @ w
    return proj @ z - (float(proj @ proj) / nrm2) * w


# ---------------------------------------------------------------------------
# True-risk helpers for the synthetic generators.
# ---------------------------------------------------------------------------

_HERM_NODES, _HERM_WEIGHTS = np.polynomial.hermite.hermgauss(96)


def conditional_gaussian_logistic_risk(w: np.ndarray, mean_neg: np.ndarray,
                                       mean_pos: np.ndarray, noise_var: float) -> float:
    """Exact logistic risk under the balanced two-Gaussian class model.

    Conditioned on the label, the score w[:-1]@x + w[-1] is univariate
    Gaussian, so the risk reduces to two 1-D integrals evaluated here with
    Gauss-Hermite quadrature.
    """
    wt = w[:-1]
    scale = math.sqrt(2.0 * noise_var) * float(np.linalg.norm(wt))
    total = 0.0
    for y, mean in ((1.0, mean_pos), (-1.0, mean_neg)):
        center = float(wt @ mean) + float(w[-1])
        scores = -y * (center + scale * _HERM_NODES)
        total += 0.5 * float(_HERM_WEIGHTS @ np.logaddexp(0.0, scores)) / math.sqrt(math.pi)
    return total


def conditional_gaussian_bayes_model(mean_neg: np.ndarray, mean_pos: np.ndarray,
                                     noise_var: float) -> np.ndarray:
    """Risk-minimizing augmented model: the posterior log-odds coefficients."""
    wt = (mean_pos - mean_neg) / noise_var
    intercept = (float(mean_neg @ mean_neg) - float(mean_pos @ mean_pos)) / (2.0 * noise_var)
    return np.concatenate([wt, [intercept]])


def estimate_noise_variance(model: LossModel, w: np.ndarray, x: np.ndarray,
                            y: np.ndarray | None = None) -> float:
    """Empirical gradient-noise variance at w: mean ||g_i - mean(g)||^2.

    For the PCA kind this is the sample-covariance noise
    mean ||z z' - mean(z z')||_F^2 instead.
    """
    if model.kind == "pca_krasulina":
        z = np.asarray(x, dtype=np.float64)
        outer = np.einsum("mi,mj->mij", z, z)
        centered = outer - outer.mean(axis=0)
        return float(np.mean(np.sum(centered * centered, axis=(1, 2))))
    margins = y * (x @ w[:-1] + w[-1])
    if model.kind == "logistic":
        coeff = -y * np.asarray(_sigmoid(-margins))
    else:
        coeff = np.where(1.0 - margins > 0.0, -y, 0.0)
    xt = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    grads = coeff[:, None] * xt
    centered = grads - grads.mean(axis=0)
    return float(np.mean(np.sum(centered * centered, axis=1)))


def estimate_smoothness(x: np.ndarray) -> float:
    """Logistic smoothness bound max ||x_aug||^2 / 4 over a sample block."""
    norms2 = np.sum(x * x, axis=1) + 1.0
    return float(norms2.max()) / 4.0
