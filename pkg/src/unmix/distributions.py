"""Probability kernels used by the mixing and unmixing models.

Diagonal Gaussians (log-density, reparametrized sampling), the Dirichlet
(log-density, sampling, pathwise Jacobian of samples w.r.t. concentration),
and the Beta pdf/cdf machinery behind that Jacobian.  All log-densities are
built from :mod:`unmix.diffcore` ops so they can sit inside a recorded loss.

Sampling is routed through a noise source object; ``RngNoise`` draws live,
``ReplayNoise`` records one pass and replays it so losses become smooth
deterministic functions of the parameters (used for gradient verification).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

from . import diffcore as dc
from .diffcore import Tensor, as_tensor, constant
from .errors import (ContractError, DegenerateSampleError, DomainError,
                     NumericError, ShapeError)

GAMMA_FLOOR = 1e-3
SIMPLEX_EPS = 1e-9

_LOG_2PI = float(np.log(2.0 * np.pi))

__all__ = [
    "GAMMA_FLOOR", "SIMPLEX_EPS", "DiagGaussian", "DirichletParams",
    "gaussian_logpdf", "gaussian_rsample", "std_normal_logpdf",
    "dirichlet_logpdf", "dirichlet_sample", "dirichlet_rsample",
    "dirichlet_pathwise_jacobian", "beta_functions",
    "RngNoise", "ReplayNoise",
]


@dataclass
class DiagGaussian:
    """Mean and per-coordinate standard deviation (entries > 0)."""

    mean: Tensor
    scale: Tensor


@dataclass
class DirichletParams:
    """Concentration vector; entries must stay at or above GAMMA_FLOOR."""

    concentration: Tensor


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- Gaussian

def gaussian_logpdf(x, d: DiagGaussian) -> Tensor:
    """Exact diagonal-Gaussian log-density, summed over the last axis."""
    mean, scale = as_tensor(d.mean), as_tensor(d.scale)
    xd = _data(x)
    if xd.shape[-1] != mean.shape[-1]:
        raise ShapeError(f"x has {xd.shape[-1]} coords, mean has {mean.shape[-1]}")
    if np.any(scale.data <= 0.0):
        raise DomainError("Gaussian scale must be positive")
    z = (as_tensor(x) - mean) / scale
    return (z * z * (-0.5) - dc.log(scale) - 0.5 * _LOG_2PI).sum(axis=-1)


def std_normal_logpdf(x) -> Tensor:
    x = as_tensor(x)
    return (x * x * (-0.5) - 0.5 * _LOG_2PI).sum(axis=-1)


def gaussian_rsample(d: DiagGaussian, noise) -> Tensor:
    """mean + scale * noise for externally drawn standard-normal noise."""
    mean, scale = as_tensor(d.mean), as_tensor(d.scale)
    nd = _data(noise)
    if nd.shape[-1] != mean.shape[-1]:
        raise ShapeError(f"noise has {nd.shape[-1]} coords, mean has {mean.shape[-1]}")
    return mean + scale * constant(nd)


# ---------------------------------------------------------------- Dirichlet

def _check_concentration(conc: np.ndarray):
    if np.any(conc < GAMMA_FLOOR * (1.0 - 1e-9)):
        raise DomainError(
            f"concentration below floor {GAMMA_FLOOR}: min {conc.min()}")


def dirichlet_logpdf(a, p: DirichletParams) -> Tensor:
    """Dirichlet log-density with boundary clipping and renormalization."""
    conc = as_tensor(p.concentration)
    _check_concentration(conc.data)
    at = dc.clip(as_tensor(a), SIMPLEX_EPS, 1.0 - SIMPLEX_EPS)
    at = at / at.sum(axis=-1, keepdims=True)
    norm = dc.lgamma(conc.sum(axis=-1)) - dc.lgamma(conc).sum(axis=-1)
    return ((conc - 1.0) * dc.log(at)).sum(axis=-1) + norm


def _sample_dirichlet_data(conc: np.ndarray, rng: np.random.Generator,
                           max_resample: int = 5) -> np.ndarray:
    """Gamma-normalize sampling with resample-then-clip degeneracy handling."""
    g = rng.standard_gamma(conc)
    a = np.empty_like(g)
    flat_g = g.reshape(-1, conc.shape[-1])
    flat_c = np.broadcast_to(conc, g.shape).reshape(-1, conc.shape[-1])
    for _ in range(max_resample):
        s = flat_g.sum(axis=-1)
        bad = (s <= 0.0) | (flat_g.max(axis=-1) >= s * (1.0 - SIMPLEX_EPS))
        if not bad.any():
            break
        flat_g[bad] = rng.standard_gamma(flat_c[bad])
    s = flat_g.sum(axis=-1, keepdims=True)
    s[s <= 0.0] = 1.0
    a = flat_g / s
    a = np.clip(a, SIMPLEX_EPS, 1.0 - SIMPLEX_EPS)
    a /= a.sum(axis=-1, keepdims=True)
    return a.reshape(g.shape)


def dirichlet_sample(p: DirichletParams, rng: np.random.Generator) -> np.ndarray:
    """Draw simplex vectors a_i = g_i / sum(g) from Gamma(conc_i, 1) draws."""
    conc = _data(p.concentration)
    _check_concentration(conc)
    return _sample_dirichlet_data(conc, rng)


def _beta_pdf_data(x, a, b):
    return np.exp((a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x)
                  - _sp.betaln(a, b))


def _betacf(a, b, x, max_iter: int = 300, tol: float = 1e-14):
    """Lentz continued fraction for the regularized incomplete beta."""
    a, b, x = np.broadcast_arrays(a, b, x)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < tiny, tiny, d)
    d = 1.0 / d
    h = d.copy()
    converged = np.zeros(x.shape, dtype=bool)
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < tiny, tiny, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < tiny, tiny, c)
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < tiny, tiny, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < tiny, tiny, c)
        d = 1.0 / d
        delt = d * c
        h *= delt
        converged |= np.abs(delt - 1.0) < tol
        if converged.all():
            break
    if not converged.all():
        raise NumericError(
            f"incomplete beta continued fraction did not converge in {max_iter} iterations")
    return h


def _beta_cdf_data(x, a, b):
    """Regularized incomplete beta via the continued fraction."""
    x, a, b = np.broadcast_arrays(
        np.asarray(x, np.float64), np.asarray(a, np.float64),
        np.asarray(b, np.float64))
    out = np.empty(x.shape, dtype=np.float64)
    lnbt = (_sp.gammaln(a + b) - _sp.gammaln(a) - _sp.gammaln(b)
            + a * np.log(x) + b * np.log1p(-x))
    bt = np.exp(lnbt)
    direct = x < (a + 1.0) / (a + b + 2.0)
    if direct.any():
        out[direct] = (bt[direct] * _betacf(a[direct], b[direct], x[direct])
                       / a[direct])
    flip = ~direct
    if flip.any():
        out[flip] = 1.0 - (bt[flip] * _betacf(b[flip], a[flip], 1.0 - x[flip])
                           / b[flip])
    return np.clip(out, 0.0, 1.0)


def _beta_cdf_dalpha_data(x, a, b):
    """d/da of the Beta cdf by central difference with step 1e-4*max(1,a)."""
    h = 1e-4 * np.maximum(1.0, np.asarray(a, dtype=np.float64))
    return (_beta_cdf_data(x, a + h, b) - _beta_cdf_data(x, a - h, b)) / (2.0 * h)


def beta_functions(x: float, alpha: float, beta: float):
    """Return (pdf, cdf, d cdf / d alpha) for the Beta(alpha, beta) law at x."""
    if not (0.0 < x < 1.0):
        raise DomainError(f"x must be interior to (0, 1), got {x}")
    if alpha <= 0.0 or beta <= 0.0:
        raise DomainError(f"shape parameters must be positive, got ({alpha}, {beta})")
    pdf = float(_beta_pdf_data(x, alpha, beta))
    cdf = float(_beta_cdf_data(x, alpha, beta))
    dcdf = float(_beta_cdf_dalpha_data(x, alpha, beta))
    return pdf, cdf, dcdf


def _pathwise_jacobian_data(a: np.ndarray, conc: np.ndarray) -> np.ndarray:
    """Batched da_i/dgamma_j for samples a ~ Dir(conc); shape (..., P, P)."""
    a = np.asarray(a, dtype=np.float64)
    conc = np.broadcast_to(np.asarray(conc, dtype=np.float64), a.shape)
    if np.any(a >= 1.0):
        raise DegenerateSampleError("sampled abundance hit 1; Jacobian undefined")
    total = conc.sum(axis=-1, keepdims=True)
    beta = total - conc
    dF = _beta_cdf_dalpha_data(a, conc, beta)
    pdf = _beta_pdf_data(a, conc, beta)
    # column scale: -(dF/da pdf) / (1 - a_j), shared by every row i
    col = -dF / pdf / (1.0 - a)
    eye = np.eye(a.shape[-1])
    delta_minus_a = eye - a[..., :, None]          # (..., i, j) = delta_ij - a_i
    return delta_minus_a * col[..., None, :]


def dirichlet_pathwise_jacobian(a, p: DirichletParams) -> np.ndarray:
    """Pathwise derivative matrix (i, j) -> da_i / dgamma_j at a sample a."""
    conc = _data(p.concentration)
    _check_concentration(conc)
    return _pathwise_jacobian_data(_data(a), conc)


def dirichlet_rsample(concentration: Tensor, noise) -> Tensor:
    """Sample a ~ Dir(concentration) as a graph node.

    The forward draw comes from the noise source; the reverse pass applies
    the Beta-marginal pathwise derivative of the sample w.r.t. the
    concentration parameters.
    """
    conc = as_tensor(concentration)
    _check_concentration(conc.data)
    a = noise.dirichlet(conc.data)
    out = Tensor(a, (conc,))

    def vjp(g):
        jac = _pathwise_jacobian_data(a, conc.data)
        return (np.einsum("...i,...ij->...j", g, jac),)
    out._vjp = vjp
    return out


# ---------------------------------------------------------------- noise

class RngNoise:
    """Live sampling from a numpy Generator."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def normal(self, shape) -> np.ndarray:
        return self.rng.standard_normal(shape)

    def dirichlet(self, conc: np.ndarray) -> np.ndarray:
        return _sample_dirichlet_data(conc, self.rng)


class ReplayNoise:
    """Record one sampling pass, then replay it deterministically.

    In replay mode Gaussian draws are returned verbatim while Dirichlet
    draws are recomputed from the frozen uniform base through the Beta
    inverse cdf, so the sample varies smoothly with the concentration.
    Only two-component Dirichlets support a frozen base.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.recording = True
        self._normals: list[np.ndarray] = []
        self._bases: list[np.ndarray] = []
        self._ni = 0
        self._bi = 0

    def rewind(self):
        self.recording = False
        self._ni = 0
        self._bi = 0

    def normal(self, shape) -> np.ndarray:
        if self.recording:
            x = self.rng.standard_normal(shape)
            self._normals.append(x)
            return x
        x = self._normals[self._ni]
        self._ni += 1
        if x.shape != tuple(np.atleast_1d(shape)) and x.shape != shape:
            raise ContractError("replayed noise shape mismatch")
        return x

    def dirichlet(self, conc: np.ndarray) -> np.ndarray:
        if conc.shape[-1] != 2:
            raise ContractError("frozen Dirichlet base requires two components")
        if self.recording:
            u = self.rng.uniform(size=conc.shape[:-1])
            self._bases.append(u)
        else:
            u = self._bases[self._bi]
            self._bi += 1
        a0 = _sp.betaincinv(conc[..., 0], conc[..., 1], u)
        a0 = np.clip(a0, SIMPLEX_EPS, 1.0 - SIMPLEX_EPS)
        return np.stack([a0, 1.0 - a0], axis=-1)
