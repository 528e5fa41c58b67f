"""Reparameterizable Gaussian families and their closed-form divergences.

Standard deviations are parameterized through softplus.  The Cholesky family
stores each block's lower triangle packed row-major (``np.tril_indices``);
diagonal slots pass through softplus so the factor always has a positive
diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, DomainError

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_INIT_SIGMA = 0.05


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def fan_in_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _same_shape(a, b, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


@dataclass
class DiagGaussian:
    """Independent Gaussian per coordinate; ``sigma = softplus(rho)``."""

    mu: Tensor
    rho: Tensor

    def __post_init__(self):
        _same_shape(self.mu.data, self.rho.data, "DiagGaussian")

    @classmethod
    def create(cls, mu, sigma, requires_grad: bool = True) -> "DiagGaussian":
        mu = np.asarray(mu, dtype=np.float64)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape)
        if np.any(sigma <= 0):
            raise DomainError("sigma must be positive")
        return cls(Tensor(mu, requires_grad), Tensor(inverse_softplus(sigma), requires_grad))

    @classmethod
    def init(cls, shape, fan_in: int, rng: np.random.Generator, sigma: float = DEFAULT_INIT_SIGMA):
        return cls.create(fan_in_uniform(shape, fan_in, rng), sigma)

    @property
    def shape(self):
        return self.mu.shape

    def sigma(self) -> Tensor:
        return ad.softplus(self.rho)

    def parameters(self) -> list[Tensor]:
        return [self.mu, self.rho]


def sample_reparam_diag(q: DiagGaussian, eps) -> Tensor:
    """w = mu + sigma * eps."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != q.shape:
        raise DimensionError(f"noise shape {eps.shape} does not match posterior shape {q.shape}")
    return q.mu + q.sigma() * Tensor(eps)


# ------------------------------------------------------------------ Cholesky blocks


def packed_size(d: int) -> int:
    return d * (d + 1) // 2


def block_dim(packed: int) -> int:
    d = int(round((math.sqrt(8 * packed + 1) - 1) / 2))
    if packed_size(d) != packed:
        raise DimensionError(f"{packed} is not a triangular number")
    return d


def pack_lower(L: np.ndarray, positive_diag: bool = True) -> np.ndarray:
    """Inverse of :func:`tril_from_packed` for a batch of factors (B, d, d)."""
    L = np.asarray(L, dtype=np.float64)
    d = L.shape[-1]
    rows, cols = np.tril_indices(d)
    raw = L[..., rows, cols].copy()
    if positive_diag:
        diag = rows == cols
        raw[..., diag] = inverse_softplus(raw[..., diag])
    return raw


def tril_from_packed(l_raw: Tensor) -> Tensor:
    """Lower-triangular factors (B, d, d) from packed raw entries (B, d(d+1)/2)."""
    l_raw = ad.as_tensor(l_raw)
    B, P = l_raw.shape
    d = block_dim(P)
    rows, cols = np.tril_indices(d)
    diag = rows == cols
    vals = l_raw.data.copy()
    vals[:, diag] = ad.softplus_array(vals[:, diag])
    L = np.zeros((B, d, d))
    L[:, rows, cols] = vals

    def backward(g):
        gp = g[:, rows, cols].copy()
        gp[:, diag] *= ad.sigmoid_array(l_raw.data[:, diag])
        return (gp,)

    return ad.custom_op(L, (l_raw,), backward, "tril_from_packed")


@dataclass
class CholGaussian:
    """B independent d-dimensional Gaussians N(mu_k, L_k L_k^T)."""

    mu: Tensor  # (B, d)
    l_raw: Tensor  # (B, d(d+1)/2)

    def __post_init__(self):
        if self.mu.ndim != 2 or self.l_raw.ndim != 2 or self.mu.shape[0] != self.l_raw.shape[0]:
            raise DimensionError(f"CholGaussian: mu {self.mu.shape}, l_raw {self.l_raw.shape}")
        if packed_size(self.mu.shape[1]) != self.l_raw.shape[1]:
            raise DimensionError(f"CholGaussian: block dim {self.mu.shape[1]} needs {packed_size(self.mu.shape[1])} packed entries")

    @classmethod
    def create(cls, mu, L, requires_grad: bool = True) -> "CholGaussian":
        mu = np.asarray(mu, dtype=np.float64)
        L = np.asarray(L, dtype=np.float64)
        if np.any(np.diagonal(L, axis1=-2, axis2=-1) <= 0):
            raise DomainError("Cholesky factor needs a positive diagonal")
        return cls(Tensor(mu, requires_grad), Tensor(pack_lower(L), requires_grad))

    @classmethod
    def init(cls, blocks: int, d: int, fan_in: int, rng, sigma: float = DEFAULT_INIT_SIGMA):
        L = np.broadcast_to(np.eye(d) * sigma, (blocks, d, d))
        return cls.create(fan_in_uniform((blocks, d), fan_in, rng), L)

    @property
    def blocks(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def factor(self) -> Tensor:
        return tril_from_packed(self.l_raw)

    def parameters(self) -> list[Tensor]:
        return [self.mu, self.l_raw]


def sample_reparam_chol(q: CholGaussian, eps) -> Tensor:
    """w_k = mu_k + L_k eps_k for every block."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != q.mu.shape:
        raise DimensionError(f"noise shape {eps.shape} does not match blocks {q.mu.shape}")
    return q.mu + ad.batched_matvec(q.factor(), Tensor(eps))


# ------------------------------------------------------------------ divergences


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def kl_diag_diag(mu_q, sigma_q, mu_p, sigma_p) -> Tensor:
    """KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) summed over coordinates.

    The ``p`` arguments are treated as constants.
    """
    mu_q, sigma_q = ad.as_tensor(mu_q), ad.as_tensor(sigma_q)
    mu_p, sigma_p = _const(mu_p), _const(sigma_p)
    for a, b in ((mu_q.data, sigma_q.data), (mu_q.data, mu_p), (mu_q.data, sigma_p)):
        _same_shape(a, b, "kl_diag_diag")
    if np.any(sigma_p <= 0) or np.any(sigma_q.data <= 0):
        raise DomainError("kl_diag_diag: standard deviations must be positive")
    var_p2 = Tensor(2.0 * sigma_p * sigma_p)
    terms = (
        Tensor(np.log(sigma_p))
        - ad.log(sigma_q)
        + (ad.square(sigma_q) + ad.square(mu_q - Tensor(mu_p))) / var_p2
        - 0.5
    )
    return ad.tsum(terms)


def kl_gaussians(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    return kl_diag_diag(q.mu, q.sigma(), p.mu.data, ad.softplus_array(p.rho.data))


def triangular_inverse(L: np.ndarray) -> np.ndarray:
    """Batched inverse of lower-triangular factors (B, d, d)."""
    L = np.asarray(L, dtype=np.float64)
    eye = np.eye(L.shape[-1])
    return np.stack([solve_triangular(Lk, eye, lower=True) for Lk in L])


def kl_chol_chol(mu_q, L_q, mu_p, L_p, L_p_inv=None) -> Tensor:
    """Sum over blocks of KL(N(mu_q, L_q L_q^T) || N(mu_p, L_p L_p^T)).

    Shapes: mu (B, d), L (B, d, d).  Gradients flow to ``mu_q`` and ``L_q``;
    the ``p`` side is constant.  ``L_p_inv`` may carry a cached inverse of
    ``L_p``.
    """
    mu_q, L_q = ad.as_tensor(mu_q), ad.as_tensor(L_q)
    mu_p, L_p = _const(mu_p), _const(L_p)
    if L_q.ndim != 3 or mu_q.ndim != 2 or L_q.shape != L_p.shape or mu_q.shape != mu_p.shape or mu_q.shape != L_q.shape[:2]:
        raise DimensionError(f"kl_chol_chol: mu_q {mu_q.shape}, L_q {L_q.shape}, mu_p {mu_p.shape}, L_p {L_p.shape}")
    P = triangular_inverse(L_p) if L_p_inv is None else L_p_inv
    d = mu_q.shape[1]
    dq = np.diagonal(L_q.data, axis1=1, axis2=2)
    dp = np.diagonal(L_p, axis1=1, axis2=2)
    if np.any(dq <= 0) or np.any(dp <= 0):
        raise DomainError("kl_chol_chol: factors need a positive diagonal")
    A = P @ L_q.data
    delta = np.einsum("bij,bj->bi", P, mu_p - mu_q.data)
    if np.array_equal(L_q.data, L_p) and np.array_equal(mu_q.data, mu_p):
        # rounding in P @ L would otherwise leave ~1e-16
        value = 0.0
    else:
        value = 0.5 * (
            np.sum(A * A)
            + np.sum(delta * delta)
            - d * mu_q.shape[0]
            + 2.0 * np.sum(np.log(dp))
            - 2.0 * np.sum(np.log(dq))
        )

    def backward(g):
        gmu = gL = None
        if mu_q.requires_grad:
            gmu = -g * np.einsum("bji,bj->bi", P, delta)
        if L_q.requires_grad:
            S = np.transpose(P, (0, 2, 1)) @ P
            gL = np.tril(S @ L_q.data)
            idx = np.arange(d)
            gL[:, idx, idx] -= 1.0 / dq
            gL = g * gL
        return gmu, gL

    return ad.custom_op(np.asarray(value), (mu_q, L_q), backward, "kl_chol_chol")


def entropy_diag(sigma) -> Tensor:
    """Sum of Gaussian entropies 0.5*log(2*pi*e*sigma^2); independent of the mean."""
    sigma = ad.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise DomainError("entropy_diag: sigma must be positive")
    return ad.tsum(_half_log_2pi_var(sigma) + 0.5)


def _half_log_2pi_var(sigma: Tensor) -> Tensor:
    return 0.5 * (ad.log(ad.square(sigma)) + LOG_2PI)


def cross_entropy_scaled(mu, sigma, mu_t, sigma_t, z) -> Tensor:
    """-E_{N(w | z*mu, sigma^2)} log N(w | z*mu_t, sigma_t^2), summed.

    ``z`` is a scalar or one value per row of ``mu`` (one per dense input unit
    or per conv filter-channel block).  The target parameters are constants.
    """
    mu, sigma, z = ad.as_tensor(mu), ad.as_tensor(sigma), ad.as_tensor(z)
    mu_t, sigma_t = _const(mu_t), _const(sigma_t)
    _same_shape(mu.data, sigma.data, "cross_entropy_scaled")
    _same_shape(mu.data, mu_t, "cross_entropy_scaled")
    _same_shape(mu.data, sigma_t, "cross_entropy_scaled")
    if np.any(sigma_t <= 0):
        raise DomainError("cross_entropy_scaled: target sigma must be positive")
    if np.any(sigma.data <= 0):
        raise DomainError("cross_entropy_scaled: sigma must be positive")
    diff = mu - Tensor(mu_t)
    shifted = diff * z if z.ndim == 0 else ad.scale_rows(diff, z)
    sigma_t = Tensor(sigma_t)
    terms = _half_log_2pi_var(sigma_t) + (ad.square(sigma) + ad.square(shifted)) / (2.0 * ad.square(sigma_t))
    return ad.tsum(terms)
