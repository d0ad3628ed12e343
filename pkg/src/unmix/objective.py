"""Training objective and optimization loop.

The maximized objective combines, per batch:

* an unsupervised bound: Monte Carlo average of
  log p(y, a, M, Z) - log q(a, M, Z | y) over ancestral posterior draws,
  where the q(M|Z)/p(M|Z) ratio vanishes identically because the decoders
  are shared;
* a supervised bound over labeled (y, a, M) triples: a self-normalized
  importance-weighted log-ratio over latent draws, plus a posterior-
  likelihood regularizer weighted by (1 + beta), the whole block scaled
  by lambda;
* an L1/2 penalty on the Dirichlet concentrations (sparsity);
* a norm penalty on the two nonlinear networks.

Training minimizes the negation with Adam under the decaying schedule and
stops early once the relative objective increase between epochs falls
below the tolerance.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, Tensor, adam_step, backward, lr_schedule
from .distributions import (DiagGaussian, RngNoise, dirichlet_logpdf,
                            gaussian_logpdf, std_normal_logpdf)
from .errors import ContractError, InputError, NumericError, TrainingError
from .generative import GenerativeParams, flat_abundance_logpdf, log_likelihood
from .inference import (InferenceParams, abundance_concentration, encode_z,
                        init_model, model_parameters, posterior_sample)

__all__ = ["TrainConfig", "LossBreakdown", "EpochStats", "unsup_term",
           "importance_weights", "ImportanceWeights", "sup_term",
           "sparsity_penalty", "network_norm_penalty", "fnn_norm",
           "l_half_norm", "total_loss", "train", "history_to_csv"]


@dataclass
class TrainConfig:
    """All objective and schedule hyperparameters.

    ``lam`` balances the supervised block, ``beta`` weights the posterior
    regularizer, ``tau`` the sparsity penalty, ``varsigma1``/``varsigma2``
    the nonlinear-network norms.  ``k`` is the importance-sample count,
    ``k_e`` the Monte Carlo sample count for plain expectations.
    """

    lam: float = 1.0
    beta: float = 0.1
    tau: float = 0.01
    varsigma1: float = 1.0
    varsigma2: float = 1.0
    k: int = 5
    k_e: int = 1
    batch_size: int = 16
    max_epochs: int = 30
    rel_stop_tol: float = 0.01

    def __post_init__(self):
        for name in ("lam", "beta", "tau", "varsigma1", "varsigma2"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")
        if self.k < 1 or self.k_e < 1:
            raise ContractError("k and k_e must be positive integers")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ContractError("batch_size and max_epochs must be positive")

    def as_dict(self) -> dict:
        return {"lambda": self.lam, "beta": self.beta, "tau": self.tau,
                "varsigma1": self.varsigma1, "varsigma2": self.varsigma2,
                "k": self.k, "k_e": self.k_e, "batch_size": self.batch_size,
                "max_epochs": self.max_epochs,
                "rel_stop_tol": self.rel_stop_tol}


@dataclass
class LossBreakdown:
    """Per-batch objective pieces; ``node`` carries the differentiable total."""

    unsup: float
    sup_iw: float
    sup_posterior: float
    sparsity: float
    reg: float
    total: float
    node: Tensor | None = None


def _assert_shared(theta: GenerativeParams, phi: InferenceParams):
    if phi.em_decoders is not theta.em_decoders:
        raise ContractError("inference model must share the generative decoders")


def _as_batch(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y[None, :] if y.ndim == 1 else y


def unsup_term(y, theta: GenerativeParams, phi: InferenceParams, noise,
               k_e: int = 1) -> Tensor:
    """Evidence bound for unlabeled pixels, summed over the batch.

    For each pixel, averages log p(y, a, M, Z) - log q(a, M, Z | y) over
    ``k_e`` ancestral draws; the shared-decoder terms cancel exactly and
    are therefore omitted rather than computed.
    """
    _assert_shared(theta, phi)
    if isinstance(noise, np.random.Generator):
        noise = RngNoise(noise)
    y_b = _as_batch(y)
    total = None
    for _ in range(k_e):
        s = posterior_sample(y_b, phi, theta, noise)
        factors = {
            "likelihood": log_likelihood(y_b, s.a, s.em_matrix, theta),
            "abundance prior": flat_abundance_logpdf(s.a, theta.n_endmembers),
            "abundance posterior": -dirichlet_logpdf(s.a, s.gamma),
        }
        lp_z = lq_z = None
        for z_k in s.z_columns:
            pz = std_normal_logpdf(z_k)
            qz = gaussian_logpdf(z_k, s.z_dist)
            lp_z = pz if lp_z is None else lp_z + pz
            lq_z = qz if lq_z is None else lq_z + qz
        factors["latent prior"] = lp_z
        factors["latent posterior"] = -lq_z
        term = None
        for name, f in factors.items():
            if not np.all(np.isfinite(f.data)):
                raise TrainingError(f"non-finite {name} term in the "
                                    "unsupervised bound")
            term = f if term is None else term + f
        total = term if total is None else total + term
    return (total * (1.0 / k_e)).sum()


@dataclass
class ImportanceWeights:
    """Endmember-likelihood weights over latent draws, kept in log domain."""

    log_weights: Tensor     # (..., K)
    normalized: Tensor      # (..., K), sums to 1 over the last axis

    @property
    def log_total(self) -> Tensor:
        return dc.logsumexp(self.log_weights, axis=-1)


def _log_em_likelihood(em_matrix: np.ndarray, z_cols: list[Tensor],
                       theta: GenerativeParams, extra_axes: int = 0) -> Tensor:
    """Sum over endmembers of log N(m_k; decoder_k(z_k), scale_k).

    ``em_matrix``: (..., L, P) observed data; ``z_cols[k]``: latent draws with
    ``extra_axes`` additional broadcast axes (e.g. an importance-sample axis).
    """
    from .generative import em_decode
    total = None
    for k, z_k in enumerate(z_cols):
        m_k = em_matrix[..., :, k]
        if extra_axes:
            m_k = np.expand_dims(m_k, tuple(range(m_k.ndim - 1, m_k.ndim - 1 + extra_axes)))
        lp = gaussian_logpdf(dc.constant(m_k), em_decode(z_k, k, theta))
        total = lp if total is None else total + lp
    return total


def importance_weights(em_matrix, z_samples, theta: GenerativeParams
                       ) -> ImportanceWeights:
    """Self-normalized weights w_i = q(M | Z_i) for observed M over K draws.

    ``em_matrix``: (L, P); ``z_samples``: (K, H, P) latent codes (columns
    are per-endmember) or a list of K such matrices.  Both arguments are
    treated as data here; the gradient-bearing path lives in sup_term.
    """
    em = np.asarray(em_matrix.data if isinstance(em_matrix, Tensor)
                    else em_matrix, dtype=np.float64)
    if isinstance(z_samples, (list, tuple)):
        z_samples = np.stack([np.asarray(z.data if isinstance(z, Tensor) else z)
                              for z in z_samples])
    z = np.asarray(z_samples, dtype=np.float64)        # (K, H, P)
    z_cols = [dc.constant(z[:, :, k]) for k in range(z.shape[-1])]
    log_w = _log_em_likelihood(em[None, :, :], z_cols, theta)   # (K,)
    if not np.any(np.isfinite(log_w.data)):
        raise NumericError("all importance weights underflowed")
    norm = dc.exp(log_w - dc.logsumexp(log_w, axis=-1, keepdims=True))
    return ImportanceWeights(log_weights=log_w, normalized=norm)


def _check_simplex(a: np.ndarray):
    if np.any(a < -1e-9) or np.any(np.abs(a.sum(axis=-1) - 1.0) > 1e-6):
        raise InputError("observed abundances must lie on the unit simplex")


def sup_term(y, a, em_matrix, theta: GenerativeParams, phi: InferenceParams,
             noise, k: int = 5) -> tuple[Tensor, Tensor]:
    """Supervised bound pieces for labeled triples, summed over the batch.

    Returns ``(sup_iw, sup_posterior)``: the importance-weighted log-ratio
    and the posterior-likelihood regularizer (the latter enters the total
    with weight lambda * (1 + beta)).
    """
    _assert_shared(theta, phi)
    if isinstance(noise, np.random.Generator):
        noise = RngNoise(noise)
    y_b = _as_batch(y)
    a_b = _as_batch(a)
    em = np.asarray(em_matrix.data if isinstance(em_matrix, Tensor)
                    else em_matrix, dtype=np.float64)
    if em.ndim == 2:
        em = em[None, :, :]
    _check_simplex(a_b)
    B = y_b.shape[0]
    P, H = phi.n_endmembers, phi.latent_dim

    z_dist = encode_z(y_b, phi)
    mean = z_dist.mean.reshape((B, 1, H))
    scale = z_dist.scale.reshape((B, 1, H))
    xi = noise.normal((B, k, P, H))
    z_cols = [mean + scale * dc.constant(xi[:, :, j, :]) for j in range(P)]

    log_w = _log_em_likelihood(em, z_cols, theta, extra_axes=1)       # (B, K)
    if not np.any(np.isfinite(log_w.data)):
        raise NumericError("all importance weights underflowed")
    norm_w = dc.exp(log_w - dc.logsumexp(log_w, axis=-1, keepdims=True))

    gamma = abundance_concentration(y_b, dc.constant(em), phi)
    lq_a = dirichlet_logpdf(a_b, gamma)                               # (B,)
    ll = log_likelihood(y_b, a_b, em, theta)                          # (B,)
    lp_a = flat_abundance_logpdf(a_b, P)                              # (B,)
    fixed = (ll + lp_a - lq_a).reshape((B, 1))
    lp_z = None
    lq_z = None
    for z_k in z_cols:
        pz = std_normal_logpdf(z_k)
        qz = gaussian_logpdf(z_k, DiagGaussian(mean=mean, scale=scale))
        lp_z = pz if lp_z is None else lp_z + pz
        lq_z = qz if lq_z is None else lq_z + qz
    bracket = fixed + lp_z - lq_z                                     # (B, K)
    sup_iw = (norm_w * bracket).sum(axis=-1).sum()
    sup_posterior = (lq_a + log_w.mean(axis=-1)).sum()
    return sup_iw, sup_posterior


def l_half_norm(x: Tensor) -> Tensor:
    """Sum of square roots over the last axis (entries must be nonnegative)."""
    return (dc.as_tensor(x) ** 0.5).sum(axis=-1)


def _sample_em_matrix(y_b: np.ndarray, theta: GenerativeParams,
                      phi: InferenceParams, noise) -> Tensor:
    """One reparametrized draw M ~ q(M | Z) q(Z | y) for each pixel."""
    from .distributions import gaussian_rsample
    from .generative import em_decode
    batch = y_b.shape[:-1]
    P, H, L = phi.n_endmembers, phi.latent_dim, phi.n_bands
    z_dist = encode_z(y_b, phi)
    xi = noise.normal(batch + (P, H))
    cols = []
    for j in range(P):
        z_j = gaussian_rsample(z_dist, xi[..., j, :])
        cols.append(gaussian_rsample(em_decode(z_j, j, theta),
                                     noise.normal(batch + (L,))))
    return dc.stack_last(cols)


def sparsity_penalty(batch_u, batch_s, theta: GenerativeParams,
                     phi: InferenceParams, noise, k_e: int = 1,
                     tau: float = 0.01) -> Tensor:
    """tau-weighted L1/2 norm of the abundance concentrations.

    Supervised samples use their observed endmember matrices; unlabeled
    pixels average the norm over ``k_e`` endmember draws from the posterior.
    """
    if tau == 0.0:
        return dc.constant(0.0)
    if isinstance(noise, np.random.Generator):
        noise = RngNoise(noise)
    total = dc.constant(0.0)
    if batch_s is not None:
        y_s, em_s = batch_s
        gamma = abundance_concentration(_as_batch(y_s), dc.constant(em_s), phi)
        total = total + l_half_norm(gamma.concentration).sum()
    if batch_u is not None:
        y_b = _as_batch(batch_u)
        acc = None
        for _ in range(k_e):
            em = _sample_em_matrix(y_b, theta, phi, noise)
            gamma = abundance_concentration(y_b, em, phi)
            term = l_half_norm(gamma.concentration)
            acc = term if acc is None else acc + term
        total = total + (acc * (1.0 / k_e)).sum()
    return tau * total


def fnn_norm(net) -> Tensor:
    """Network norm: sum over layers of ||W||_F + ||b||_2."""
    total = dc.constant(0.0)
    for w, b in zip(net.weights, net.biases):
        total = total + dc.l2norm(w) + dc.l2norm(b)
    return total


def network_norm_penalty(theta: GenerativeParams, phi: InferenceParams,
                         varsigma1: float, varsigma2: float) -> Tensor:
    return (varsigma1 * fnn_norm(theta.nlin_mixing)
            + varsigma2 * fnn_norm(phi.nlin_encoder))


def total_loss(batch_u, batch_s, theta: GenerativeParams, phi: InferenceParams,
               config: TrainConfig, noise) -> LossBreakdown:
    """Assemble the maximized objective on one (possibly partial) batch.

    ``batch_u``: (B, L) unlabeled pixels or None; ``batch_s``: tuple
    (Y, A, M) of labeled arrays or None.
    """
    if isinstance(noise, np.random.Generator):
        noise = RngNoise(noise)
    zero = dc.constant(0.0)
    unsup = (unsup_term(batch_u, theta, phi, noise, config.k_e)
             if batch_u is not None and len(batch_u) else zero)
    if batch_s is not None and len(batch_s[0]):
        y_s, a_s, em_s = batch_s
        sup_iw, sup_post = sup_term(y_s, a_s, em_s, theta, phi, noise, config.k)
        spars_s = (y_s, em_s)
    else:
        sup_iw, sup_post = zero, zero
        spars_s = None
    spars_u = batch_u if batch_u is not None and len(batch_u) else None
    sparsity = sparsity_penalty(spars_u, spars_s, theta, phi, noise,
                                config.k_e, config.tau)
    reg = network_norm_penalty(theta, phi, config.varsigma1, config.varsigma2)
    node = (unsup + config.lam * (sup_iw + (1.0 + config.beta) * sup_post)
            - sparsity - reg)
    return LossBreakdown(unsup=unsup.item(), sup_iw=sup_iw.item(),
                         sup_posterior=sup_post.item(),
                         sparsity=sparsity.item(), reg=reg.item(),
                         total=node.item(), node=node)


# --------------------------------------------------------------- training

@dataclass
class EpochStats:
    """Epoch means of the loss pieces plus the learning rate used."""

    epoch: int
    unsup: float
    sup_iw: float
    sup_posterior: float
    sparsity: float
    reg: float
    total: float
    lr: float


def _supervised_arrays(d_s) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(d_s, tuple):
        y, a, m = d_s
        return (np.asarray(y, np.float64), np.asarray(a, np.float64),
                np.asarray(m, np.float64))
    y = np.stack([s.y for s in d_s])
    a = np.stack([s.a for s in d_s])
    m = np.stack([s.em for s in d_s])
    return y, a, m


class _SupervisedCycler:
    """Deterministic shuffled cycling through the labeled set."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            grab = min(count, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + grab])
            self.pos += grab
            count -= grab
        return np.concatenate(out)


def train(d_u: np.ndarray, d_s, config: TrainConfig, seed: int,
          latent_dim: int = 2, lista_layers: int = 11,
          theta: GenerativeParams | None = None,
          phi: InferenceParams | None = None,
          start_epoch: int = 0,
          epoch_callback=None):
    """Fit (theta, phi) on unlabeled pixels d_u and labeled triples d_s.

    Deterministic given ``seed``: initialization, batch order, and every
    sampled noise value flow from named substreams of one seed sequence.
    Returns ``(theta, phi, history)`` with per-epoch statistics.
    """
    d_u = np.asarray(d_u, dtype=np.float64)
    if d_u.ndim != 2 or not len(d_u):
        raise InputError("unlabeled data must be a nonempty (N, L) array")
    y_s, a_s, m_s = _supervised_arrays(d_s)
    ss = np.random.SeedSequence(seed)
    init_ss, order_ss, noise_ss = ss.spawn(3)
    if theta is None or phi is None:
        ref = m_s.mean(axis=0) if len(m_s) else None
        theta, phi = init_model(d_u.shape[1], a_s.shape[1], latent_dim,
                                lista_layers, np.random.default_rng(init_ss),
                                ref_endmembers=ref)
    params = model_parameters(theta, phi)
    state = AdamState.create(params)
    order_rng = np.random.default_rng(order_ss)
    noise = RngNoise(np.random.default_rng(noise_ss))
    sup_cycler = _SupervisedCycler(len(y_s), order_rng) if len(y_s) else None
    n_u = len(d_u)
    history: list[EpochStats] = []
    last_good = {k: t.data.copy() for k, t in params.items()}
    last_epoch = start_epoch - 1

    for epoch in range(start_epoch, start_epoch + config.max_epochs):
        lr = lr_schedule(epoch)
        perm = order_rng.permutation(n_u)
        sums = np.zeros(6)
        n_steps = 0
        for start in range(0, n_u, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch_u = d_u[idx]
            if sup_cycler is not None:
                s_idx = sup_cycler.take(min(config.batch_size, len(y_s)))
                batch_s = (y_s[s_idx], a_s[s_idx], m_s[s_idx])
            else:
                batch_s = None
            try:
                bd = total_loss(batch_u, batch_s, theta, phi, config, noise)
                if not math.isfinite(bd.total):
                    raise TrainingError("objective diverged")
                grads = backward(-bd.node, params)
                adam_step(params, grads, state, lr)
            except (TrainingError, NumericError, np.linalg.LinAlgError) as exc:
                param = exc.param if isinstance(exc, TrainingError) else None
                err = TrainingError(str(exc), param=param, epoch=epoch,
                                    batch=n_steps)
                err.last_good, err.last_epoch = last_good, last_epoch
                raise err from None
            sums += np.array([bd.unsup, bd.sup_iw, bd.sup_posterior,
                              bd.sparsity, bd.reg, bd.total])
            n_steps += 1
        means = (sums / n_steps).tolist()
        stats = EpochStats(epoch=epoch, unsup=means[0], sup_iw=means[1],
                           sup_posterior=means[2], sparsity=means[3],
                           reg=means[4], total=means[5], lr=lr)
        history.append(stats)
        last_good = {k: t.data.copy() for k, t in params.items()}
        last_epoch = epoch
        if epoch_callback is not None:
            epoch_callback(epoch, theta, phi, stats)
        if len(history) >= 2:
            prev, cur = history[-2].total, history[-1].total
            rel = (cur - prev) / max(abs(prev), 1e-12)
            if rel < config.rel_stop_tol:
                break
    return theta, phi, history


_HISTORY_COLUMNS = ["epoch", "unsup", "sup_iw", "sup_posterior", "sparsity",
                    "reg", "total", "lr"]


def history_to_csv(history: list[EpochStats]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_HISTORY_COLUMNS)
    for h in history:
        writer.writerow([h.epoch, repr(h.unsup), repr(h.sup_iw),
                         repr(h.sup_posterior), repr(h.sparsity),
                         repr(h.reg), repr(h.total), repr(h.lr)])
    return buf.getvalue()
