"""Gaussian-kernel divergence estimators.

Cauchy-Schwarz divergence between empirical samples, its closed form for
Gaussian pairs, the marginal Gaussianity loss built from it, and the
kernel estimator of conditional mutual information.  Every estimator
exists twice: a plain numpy path for analysis code, and a tape builder
(`*_node`) used inside training losses.  Both evaluate the same
log-domain expressions; a test pins them together.

All log-of-kernel-sum terms are computed with max-subtraction, so
distant clusters give large finite values instead of log(0).
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from .autodiff import Tape

__all__ = [
    "KernelConfig",
    "median_heuristic",
    "gram",
    "cs_divergence_empirical",
    "cs_divergence_node",
    "cs_divergence_gaussians_analytic",
    "cs_marginal_loss",
    "cs_marginal_loss_node",
    "cmi_cs",
    "cmi_cs_node",
    "cmi_loss",
    "cmi_loss_node",
]


@dataclass(frozen=True)
class KernelConfig:
    width_rule: str = "median"  # "median" or "fixed"
    sigma: float | None = None  # only read when width_rule == "fixed"

    def resolve_sigma(self, pooled):
        if self.width_rule == "fixed":
            if self.sigma is None or self.sigma <= 0:
                raise ValueError("fixed width rule needs sigma > 0")
            return float(self.sigma)
        if self.width_rule != "median":
            raise ValueError(f"unknown width rule {self.width_rule!r}")
        return median_heuristic(pooled)


def median_heuristic(x):
    """Median of the nonzero pairwise Euclidean distances of a sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        return 1.0
    d = pdist(x)
    d = d[d > 0]
    if d.size == 0:
        # degenerate batch of identical rows; any width works
        return 1.0
    return float(np.median(d))


def _sqdist(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    np.maximum(d, 0.0, out=d)
    return d


def gram(a, b, cfg=KernelConfig()):
    """Gaussian Gram matrix exp(-dist^2 / 2 sigma^2) between rows of a and b."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch between sample sets")
    sigma = cfg.resolve_sigma(np.vstack([a, b]))
    return np.exp(-_sqdist(a, b) / (2.0 * sigma * sigma))


# ---------------------------------------------------------------------------
# CS divergence


def _cs_terms_value(p, q, sigma):
    c = -1.0 / (2.0 * sigma * sigma)
    lpp = logsumexp(c * _sqdist(p, p)) - 2.0 * np.log(p.shape[0])
    lqq = logsumexp(c * _sqdist(q, q)) - 2.0 * np.log(q.shape[0])
    lpq = logsumexp(c * _sqdist(p, q)) - np.log(p.shape[0] * q.shape[0])
    return lpp + lqq - 2.0 * lpq


def cs_divergence_empirical(p, q, cfg=KernelConfig()):
    """Empirical CS divergence between two sample sets (three log-mean-Gram terms)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape[1] != q.shape[1]:
        raise ValueError("dimension mismatch between sample sets")
    if p.shape[0] < 2 or q.shape[0] < 2:
        raise ValueError("need at least two samples on each side")
    # the value is symmetric; route both argument orders through one
    # evaluation order so equality is exact, not just up to rounding
    if (q.shape, q.tobytes()) < (p.shape, p.tobytes()):
        p, q = q, p
    sigma = cfg.resolve_sigma(np.vstack([p, q]))
    v = _cs_terms_value(p, q, sigma)
    # nonnegative by Cauchy-Schwarz; floor out rounding residue
    return max(float(v), 0.0)


def _log_mean_exp_all(tape, s, n_total):
    m = float(s.value.max())
    return tape.log(tape.sum(tape.exp(s - m))) + (m - np.log(n_total))


def _log_sum_exp_rows(tape, s):
    m = s.value.max(axis=1, keepdims=True)
    return tape.log(tape.sum(tape.exp(tape.sub(s, tape.constant(m))), axis=1)) + tape.constant(m)


def _log_sum_exp_col(tape, s):
    m = float(s.value.max())
    return tape.log(tape.sum(tape.exp(s - m))) + m


def cs_divergence_node(tape, p, q, cfg=KernelConfig()):
    """Tape version of cs_divergence_empirical; p and q may be tensors or arrays."""
    p = tape._lift(p)
    q = tape._lift(q)
    if p.shape[0] < 2 or q.shape[0] < 2:
        raise ValueError("need at least two samples on each side")
    sigma = cfg.resolve_sigma(np.vstack([p.value, q.value]))
    c = -1.0 / (2.0 * sigma * sigma)
    lpp = _log_mean_exp_all(tape, tape.scale(tape.pairwise_sqdist(p, p), c), p.shape[0] ** 2)
    lqq = _log_mean_exp_all(tape, tape.scale(tape.pairwise_sqdist(q, q), c), q.shape[0] ** 2)
    lpq = _log_mean_exp_all(tape, tape.scale(tape.pairwise_sqdist(p, q), c),
                            p.shape[0] * q.shape[0])
    return lpp + lqq - 2.0 * lpq


def _logdet_spd(a):
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError("covariance not positive definite") from e
    return 2.0 * float(np.log(np.diag(c)).sum())


def cs_divergence_gaussians_analytic(mu1, s1, mu2, s2):
    """Closed-form CS divergence between two Gaussians.

    Each of the three integrals in the definition is a Gaussian density
    value, so the divergence reduces to log-determinants and one
    quadratic form.
    """
    mu1 = np.asarray(mu1, dtype=np.float64).ravel()
    mu2 = np.asarray(mu2, dtype=np.float64).ravel()
    s1 = np.atleast_2d(np.asarray(s1, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(s2, dtype=np.float64))
    d = mu1.size
    if mu2.size != d or s1.shape != (d, d) or s2.shape != (d, d):
        raise ValueError("inconsistent Gaussian parameters")
    delta = mu1 - mu2
    s12 = s1 + s2
    maha = float(delta @ np.linalg.solve(s12, delta))
    log_cross = -0.5 * d * np.log(2.0 * np.pi) - 0.5 * _logdet_spd(s12) - 0.5 * maha
    log_pp = 0.5 * (-d * np.log(4.0 * np.pi) - _logdet_spd(s1))
    log_qq = 0.5 * (-d * np.log(4.0 * np.pi) - _logdet_spd(s2))
    return log_pp + log_qq - 2.0 * log_cross


# ---------------------------------------------------------------------------
# Marginal Gaussianity loss


def cs_marginal_loss(z1, z2, rng, cfg=KernelConfig()):
    """Sum of CS divergences of each latent batch against fresh N(0, I) samples."""
    tape = Tape()
    node = cs_marginal_loss_node(tape, [tape.constant(np.atleast_2d(z1)),
                                        tape.constant(np.atleast_2d(z2))], rng, cfg)
    return float(node.value[0, 0])


def cs_marginal_loss_node(tape, latents, rng, cfg=KernelConfig()):
    """Tape version; latents is a sequence of (N, d) tensors, one per modality.

    Reference samples are drawn from rng in modality order, one
    independent standard-normal set per latent.
    """
    total = None
    for z in latents:
        z = tape._lift(z)
        if z.shape[0] < 2:
            raise ValueError("marginal loss needs batch size >= 2")
        ref = rng.standard_normal(size=z.shape)
        term = cs_divergence_node(tape, z, tape.constant(ref), cfg)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# Conditional mutual information


def _cmi_exponents(z, x_other, x_own, cfg):
    """Per-variable scaled negative squared distances (widths from each variable)."""
    def expo(v):
        sigma = cfg.resolve_sigma(v)
        return -_sqdist(v, v) / (2.0 * sigma * sigma)

    return expo(np.atleast_2d(z)), expo(np.atleast_2d(x_other)), expo(np.atleast_2d(x_own))


def cmi_cs(z, x_other, x_own, cfg=KernelConfig()):
    """Kernel CMI estimate of I(Z; X_other | X_own).

    Three stabilized log-sum terms over the Gram matrices M (X_own),
    K (X_other) and L (Z); rows of the three inputs must be aligned
    observations.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    x_other = np.atleast_2d(np.asarray(x_other, dtype=np.float64))
    x_own = np.atleast_2d(np.asarray(x_own, dtype=np.float64))
    n = z.shape[0]
    if not (x_other.shape[0] == n and x_own.shape[0] == n):
        raise ValueError("row counts must agree across variables")
    if n < 2:
        raise ValueError("CMI estimator needs at least two observations")
    el, ek, em = _cmi_exponents(z, x_other, x_own, cfg)
    lse_m = logsumexp(em, axis=1)
    lse_km = logsumexp(ek + em, axis=1)
    lse_lm = logsumexp(el + em, axis=1)
    lse_klm = logsumexp(ek + el + em, axis=1)
    lse_l = logsumexp(el, axis=1)
    lse_kl = logsumexp(ek + el, axis=1)
    term1 = logsumexp(lse_m + lse_km + lse_lm)
    term2 = logsumexp(lse_klm + 2.0 * lse_l)
    term3 = logsumexp(2.0 * lse_kl + 2.0 * lse_lm - lse_klm)
    return float(-2.0 * term1 + term2 + term3)


def cmi_cs_node(tape, z, x_other, x_own, cfg=KernelConfig()):
    """Tape version of cmi_cs; typically only z carries gradients."""
    z = tape._lift(z)
    x_other = tape._lift(x_other)
    x_own = tape._lift(x_own)
    n = z.shape[0]
    if not (x_other.shape[0] == n and x_own.shape[0] == n):
        raise ValueError("row counts must agree across variables")
    if n < 2:
        raise ValueError("CMI estimator needs at least two observations")

    def expo(v):
        sigma = cfg.resolve_sigma(v.value)
        return tape.scale(tape.pairwise_sqdist(v, v), -1.0 / (2.0 * sigma * sigma))

    el, ek, em = expo(z), expo(x_other), expo(x_own)
    lse_m = _log_sum_exp_rows(tape, em)
    lse_km = _log_sum_exp_rows(tape, ek + em)
    lse_lm = _log_sum_exp_rows(tape, el + em)
    lse_klm = _log_sum_exp_rows(tape, ek + el + em)
    lse_l = _log_sum_exp_rows(tape, el)
    lse_kl = _log_sum_exp_rows(tape, ek + el)
    term1 = _log_sum_exp_col(tape, lse_m + lse_km + lse_lm)
    term2 = _log_sum_exp_col(tape, lse_klm + 2.0 * lse_l)
    term3 = _log_sum_exp_col(tape, 2.0 * lse_kl + 2.0 * lse_lm - lse_klm)
    return -2.0 * term1 + term2 + term3


def cmi_loss(z1, z2, x1, x2, cfg=KernelConfig()):
    """Leakage penalty: I(Z1; X2 | X1) + I(Z2; X1 | X2)."""
    return cmi_cs(z1, x2, x1, cfg) + cmi_cs(z2, x1, x2, cfg)


def cmi_loss_node(tape, latents, inputs, cfg=KernelConfig()):
    """Tape version for two or three modalities.

    With k modalities, each latent is penalized against the
    concatenation of the other modalities' raw inputs, conditioned on
    its own input.
    """
    if len(latents) != len(inputs) or len(latents) < 2:
        raise ValueError("need matching latents and inputs for at least two modalities")
    inputs = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in inputs]
    total = None
    for i, z in enumerate(latents):
        others = [inputs[j] for j in range(len(inputs)) if j != i]
        x_other = others[0] if len(others) == 1 else np.hstack(others)
        term = cmi_cs_node(tape, z, x_other, inputs[i], cfg)
        total = term if total is None else total + term
    return total
