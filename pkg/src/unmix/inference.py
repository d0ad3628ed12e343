"""The variational unmixing model.

The approximate posterior factorizes as q(a | y, M) q(M | Z) q(Z | y):
abundances are disentangled from the latent codes (they see Z only through
M), and the endmember conditional q(M | Z) reuses the generative decoders
("bottom-up" sharing), so its density ratio against p(M | Z) vanishes.

q(Z | y) is a diagonal Gaussian computed by a pair of nets with a shared
trunk; the same conditional serves every latent code.  q(a | y, M) is a
Dirichlet whose concentration is the ReLU of a two-stream sum: an unrolled
least-squares/shrinkage stream in (y, M) plus a free nonlinear stream in y.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import MlpParams, Tensor, as_tensor, mlp_forward
from .distributions import (GAMMA_FLOOR, DiagGaussian, DirichletParams,
                            dirichlet_rsample, gaussian_rsample)
from .errors import ShapeError
from .generative import GenerativeParams

__all__ = ["ListaParams", "InferenceParams", "PosteriorSample", "encode_z",
           "lista_concentration", "abundance_streams", "abundance_concentration",
           "posterior_sample", "point_estimates", "init_model"]

INIT_ETA_SPARSE = 0.01
INIT_ETA_UNC = 10.0
INIT_ETA_STEP = 0.1


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def nlin_encoder_widths(n_bands: int, n_endmembers: int) -> list[int]:
    L, P = n_bands, n_endmembers
    return [L, 2 * L, _round_half_up(L / 2), _round_half_up(L / 4), 4 * P, P]


@dataclass
class ListaParams:
    """Scalars of the unrolled stream, stored as logs of positive values.

    ``log_eta_steps`` holds n_layers - 1 step sizes; the recurrence consumes
    the first n_layers - 2 (the final layer is the uncertainty scaling).
    """

    log_eta_steps: list[Tensor]
    log_eta_sparse: Tensor
    log_eta_unc: Tensor

    @property
    def n_layers(self) -> int:
        return len(self.log_eta_steps) + 1

    @classmethod
    def create(cls, n_layers: int, rng: np.random.Generator,
               eta_step: float = INIT_ETA_STEP) -> "ListaParams":
        steps = [dc.parameter(np.log(eta_step), f"inf.lista.log_eta{m}")
                 for m in range(n_layers - 1)]
        return cls(steps,
                   dc.parameter(np.log(INIT_ETA_SPARSE), "inf.lista.log_eta_sp"),
                   dc.parameter(np.log(INIT_ETA_UNC), "inf.lista.log_eta_unc"))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {t.name: t for t in self.log_eta_steps}
        out[self.log_eta_sparse.name] = self.log_eta_sparse
        out[self.log_eta_unc.name] = self.log_eta_unc
        return out


@dataclass
class InferenceParams:
    """Posterior parameters; endmember decoders are references into theta."""

    z_trunk: MlpParams
    z_mean_head: MlpParams
    z_scale_head: MlpParams
    lista: ListaParams
    nlin_encoder: MlpParams
    em_decoders: list[MlpParams]      # shared with the generative model
    em_log_scales: list[Tensor]       # shared with the generative model

    @property
    def latent_dim(self) -> int:
        return self.z_mean_head.widths[-1]

    @property
    def n_endmembers(self) -> int:
        return self.nlin_encoder.widths[-1]

    @property
    def n_bands(self) -> int:
        return self.z_trunk.widths[0]

    @classmethod
    def create(cls, n_bands: int, n_endmembers: int, latent_dim: int,
               lista_layers: int, rng: np.random.Generator,
               theta: GenerativeParams,
               ref_endmembers: np.ndarray | None = None) -> "InferenceParams":
        L, H = n_bands, latent_dim
        trunk = MlpParams.create([L, 5 * H, 2 * H], ["relu", "relu"],
                                 rng, "inf.z_trunk")
        mean_head = MlpParams.create([2 * H, H], ["linear"], rng, "inf.z_mean_head")
        scale_head = MlpParams.create([2 * H, 2 * H, 2 * H, H],
                                      ["relu", "relu", "linear"],
                                      rng, "inf.z_scale_head")
        eta_step = INIT_ETA_STEP
        if ref_endmembers is not None:
            gram = ref_endmembers.T @ ref_endmembers
            eta_step = 1.0 / float(np.linalg.eigvalsh(gram)[-1])
        lista = ListaParams.create(lista_layers, rng, eta_step=eta_step)
        nlin = MlpParams.create(nlin_encoder_widths(L, n_endmembers),
                                ["relu"] * 4 + ["linear"], rng, "inf.nlin_encoder")
        return cls(trunk, mean_head, scale_head, lista, nlin,
                   theta.em_decoders, theta.em_log_scales)

    def named_parameters(self) -> dict[str, Tensor]:
        """Parameters owned by the posterior (shared decoders excluded)."""
        out: dict[str, Tensor] = {}
        out.update(self.z_trunk.named_parameters())
        out.update(self.z_mean_head.named_parameters())
        out.update(self.z_scale_head.named_parameters())
        out.update(self.lista.named_parameters())
        out.update(self.nlin_encoder.named_parameters())
        return out


@dataclass
class PosteriorSample:
    """One ancestral draw (Z -> M -> a) with its abundance concentration."""

    a: Tensor                  # (..., P) simplex
    em_matrix: Tensor          # (..., L, P)
    latent: Tensor             # (..., H, P), columns are the codes
    gamma: DirichletParams
    z_dist: DiagGaussian
    z_columns: list[Tensor]    # the P sampled codes, each (..., H)


def encode_z(y, phi: InferenceParams) -> DiagGaussian:
    """Gaussian posterior over a latent code given the pixel.

    The same conditional applies to each of the P codes; with zero weights
    it collapses to a bias-determined Gaussian identical for every code.
    """
    t = mlp_forward(phi.z_trunk, y)
    mean = mlp_forward(phi.z_mean_head, t)
    scale = dc.exp(mlp_forward(phi.z_scale_head, t))
    return DiagGaussian(mean=mean, scale=scale)


def _as_column(x: Tensor) -> Tensor:
    return x.reshape(x.shape + (1,))


class _PinnedPinv:
    """Record pseudoinverses in call order, replay them on later passes."""

    def __init__(self):
        self.store: list[np.ndarray] = []
        self.pos = 0

    def rewind(self):
        self.pos = 0

    def take(self, m_data: np.ndarray) -> np.ndarray:
        if self.pos < len(self.store):
            out = self.store[self.pos]
        else:
            out = np.linalg.pinv(m_data, rcond=1e-8)
            self.store.append(out)
        self.pos += 1
        return out


_active_pinv_pin: _PinnedPinv | None = None


@contextmanager
def pinned_pseudoinverses():
    """Freeze the unrolled stream's warm starts across repeated passes.

    The reverse pass treats the pseudoinverse as per-pass data, so
    finite-difference verification must hold it fixed the same way the
    recorded noise is held fixed.  Yields the pin; call ``rewind()``
    before each replayed evaluation.
    """
    global _active_pinv_pin
    pin = _PinnedPinv()
    _active_pinv_pin = pin
    try:
        yield pin
    finally:
        _active_pinv_pin = None


def _pseudoinverse(m_data: np.ndarray) -> np.ndarray:
    if _active_pinv_pin is not None:
        return _active_pinv_pin.take(m_data)
    return np.linalg.pinv(m_data, rcond=1e-8)


def lista_concentration(y, M, phi: InferenceParams) -> Tensor:
    """Unrolled gradient/shrinkage stream; the piecewise-linear half of gamma.

    Starts from the pseudoinverse solution (treated as data for the reverse
    pass), runs n_layers - 2 shrinkage steps, and scales by the uncertainty
    factor.  ``y``: (..., L); ``M``: (..., L, P).
    """
    M = as_tensor(M)
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if M.shape[-2] != y_arr.shape[-1]:
        raise ShapeError(f"M has {M.shape[-2]} bands, y has {y_arr.shape[-1]}")
    pinv = _pseudoinverse(M.data)
    h = dc.constant(np.squeeze(pinv @ y_arr[..., None], axis=-1))
    y_col = dc.constant(y_arr[..., None])
    eta_sp = dc.exp(phi.lista.log_eta_sparse)
    for m in range(phi.lista.n_layers - 2):
        eta = dc.exp(phi.lista.log_eta_steps[m])
        resid = dc.matmul(M, _as_column(h)) - y_col
        grad = dc.matmul(M.transpose(), resid).reshape(h.shape)
        h = dc.relu(h - eta * grad - eta_sp * eta)
    return dc.exp(phi.lista.log_eta_unc) * h


def abundance_streams(y, M, phi: InferenceParams) -> tuple[Tensor, Tensor]:
    """The two concentration streams before their ReLU combination."""
    lin = lista_concentration(y, M, phi)
    nlin = mlp_forward(phi.nlin_encoder, y)
    return lin, nlin


def abundance_concentration(y, M, phi: InferenceParams) -> DirichletParams:
    """gamma = relu(linear stream + nonlinear stream) + floor."""
    lin, nlin = abundance_streams(y, M, phi)
    conc = dc.relu(lin + nlin) + GAMMA_FLOOR
    return DirichletParams(concentration=conc)


def posterior_sample(y, phi: InferenceParams, theta: GenerativeParams,
                     noise) -> PosteriorSample:
    """Ancestral reparametrized draw Z -> M -> a for pixel(s) y (..., L)."""
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    batch = y_arr.shape[:-1]
    P, H, L = phi.n_endmembers, phi.latent_dim, phi.n_bands
    z_dist = encode_z(y_arr, phi)
    xi_z = noise.normal(batch + (P, H))
    z_cols = [gaussian_rsample(z_dist, xi_z[..., k, :]) for k in range(P)]
    m_cols = []
    for k in range(P):
        from .generative import em_decode
        d_m = em_decode(z_cols[k], k, theta)
        m_cols.append(gaussian_rsample(d_m, noise.normal(batch + (L,))))
    em = dc.stack_last(m_cols)
    gamma = abundance_concentration(y_arr, em, phi)
    a = dirichlet_rsample(gamma.concentration, noise)
    return PosteriorSample(a=a, em_matrix=em, latent=dc.stack_last(z_cols),
                           gamma=gamma, z_dist=z_dist, z_columns=z_cols)


def point_estimates(y, phi: InferenceParams,
                    theta: GenerativeParams) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic summaries: Dirichlet-mean abundances and decoder-mean EMs.

    ``y``: (..., L).  Returns (a_hat (..., P), m_hat (..., L, P)).
    """
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    z_mean = encode_z(y_arr, phi).mean
    m_cols = [mlp_forward(theta.em_decoders[k], z_mean).data
              for k in range(phi.n_endmembers)]
    m_hat = np.stack(m_cols, axis=-1)
    gamma = abundance_concentration(y_arr, dc.constant(m_hat), phi)
    conc = gamma.concentration.data
    a_hat = conc / conc.sum(axis=-1, keepdims=True)
    return a_hat, m_hat


def init_model(n_bands: int, n_endmembers: int, latent_dim: int = 2,
               lista_layers: int = 11, rng: np.random.Generator | None = None,
               ref_endmembers: np.ndarray | None = None,
               ) -> tuple[GenerativeParams, InferenceParams]:
    """Build a generative/inference pair with shared endmember decoders."""
    if rng is None:
        rng = np.random.default_rng(0)
    theta = GenerativeParams.create(n_bands, n_endmembers, latent_dim, rng)
    phi = InferenceParams.create(n_bands, n_endmembers, latent_dim,
                                 lista_layers, rng, theta, ref_endmembers)
    return theta, phi


def model_parameters(theta: GenerativeParams,
                     phi: InferenceParams) -> dict[str, Tensor]:
    """All trainable tensors, shared decoders counted once."""
    params = theta.named_parameters()
    params.update(phi.named_parameters())
    return params
