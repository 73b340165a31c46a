"""Rank-normal target transform and a differentiable Gaussianity penalty.

The penalty whitens the stacked [Y, Z_1, ..., Z_k] feature matrix, vectorizes
it, and evaluates a Shapiro-Wilk statistic W with large-sample coefficients;
the loss is -log W, which vanishes as the features approach joint normality.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


@dataclass(frozen=True)
class IntConfig:
    """Rank-to-probability rule for the inverse normal transform."""

    offset: float = 0.375
    tie_rule: str = "average"

    def __post_init__(self):
        if not 0.0 <= self.offset < 0.5:
            raise ValueError("rank offset must be in [0, 0.5)")
        if self.tie_rule != "average":
            raise ValueError("only average-rank tie handling is supported")


@dataclass(frozen=True)
class SwResult:
    w: float
    loss: float
    n_eff: int
    coefficients_source: str = "blom-normalized"


def normal_quantile(p):
    """Standard normal quantile; p strictly inside (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    out = ndtri(p)
    return float(out) if out.ndim == 0 else out


def inverse_normal_transform(y, cfg=IntConfig()):
    """Blom rank-based transform of a 1-d sample onto normal scores."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = y.shape[0]
    if n < 2:
        raise ValueError("need at least two values")
    if not np.all(np.isfinite(y)):
        raise ValueError("input contains non-finite values")
    r = rankdata(y, method=cfg.tie_rule)
    return normal_quantile((r - cfg.offset) / (n + 1.0 - 2.0 * cfg.offset))


def whiten(f, ridge=None):
    """Center and map by the symmetric inverse square root of the covariance.

    The ridge is a rescue for rank-deficient batches: it is added only when
    the smallest eigenvalue does not clear it, so well-conditioned input is
    whitened exactly.  ridge None means 1e-6 * trace/dim; 0 disables.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("expected a 2-d sample matrix")
    n, d = f.shape
    if n <= d:
        raise ValueError("need more rows than columns to whiten")
    if not np.all(np.isfinite(f)):
        raise ValueError("input contains non-finite values")
    centered = f - f.mean(axis=0)
    s = centered.T @ centered / (n - 1)
    if ridge is None:
        ridge = 1e-6 * np.trace(s) / d
    w, u = np.linalg.eigh(0.5 * (s + s.T))
    if w.min() <= ridge:
        if ridge <= 0.0 or w.min() + ridge <= 0.0:
            raise ValueError("covariance is not positive definite")
        w = w + ridge
    root = (u / np.sqrt(w)) @ u.T
    return centered @ root


def _blom_coefficients(m):
    """Normalized expected-order-statistic surrogate; antisymmetric."""
    i = np.arange(1, m + 1, dtype=np.float64)
    q = ndtri((i - 0.375) / (m + 0.25))
    return q / np.sqrt((q * q).sum())


def _sw_from_vector(x):
    m = x.shape[0]
    a = _blom_coefficients(m)
    num = float(a @ np.sort(x)) ** 2
    den = float(((x - x.mean()) ** 2).sum())
    if den <= 0.0:
        raise ValueError("zero variance")
    return min(num / den, 1.0)


def sw_statistic(x):
    """Shapiro-Wilk statistic of a 1-d sample with large-m coefficients."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    m = x.shape[0]
    if m < 3:
        raise ValueError("need at least three values")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    w = _sw_from_vector(x)
    return SwResult(w=w, loss=-np.log(w), n_eff=m)


MAX_SW_ENTRIES = 200000


def _stack_features(y, latents):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    blocks = [y] + [np.asarray(z, dtype=np.float64) for z in latents]
    return np.hstack(blocks)


def _jitter_ramp(values):
    # deterministic tie-breaking ramp; too small to move W materially
    m = values.shape[0]
    scale = values.std()
    if scale == 0.0:
        scale = 1.0
    return 1e-12 * scale * np.linspace(0.0, 1.0, m)


def gauss_statistic(y, z1, z2, z3=None, rng=None):
    """W over the vectorized whitened [Y, Z_1, ..., Z_k] matrix."""
    latents = [z1, z2] if z3 is None else [z1, z2, z3]
    f = _stack_features(y, latents)
    vec = whiten(f).reshape(-1)
    if vec.shape[0] > MAX_SW_ENTRIES:
        if rng is None:
            rng = np.random.default_rng(0)
        idx = rng.choice(vec.shape[0], size=MAX_SW_ENTRIES, replace=False)
        vec = vec[idx]
    vec = vec + _jitter_ramp(vec)
    w = _sw_from_vector(vec)
    return SwResult(w=w, loss=-np.log(w), n_eff=vec.shape[0])


def gauss_loss(y, z1, z2, z3=None, rng=None):
    return gauss_statistic(y, z1, z2, z3, rng=rng).loss


def gauss_loss_node(tape, y, latents):
    """Tape version of gauss_loss over already-built latent nodes.

    y may be a plain array (targets carry no gradient) or a node.  Entry
    count is capped implicitly by the batch size; callers wanting the
    subsampled large-m path use the numpy version.
    """
    from .autodiff import Tensor

    if not isinstance(y, Tensor):
        y = tape.constant(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    blocks = [y] + list(latents)
    f = tape.concat_cols(blocks)
    n, d = f.value.shape
    if n <= d:
        raise ValueError("need more rows than columns to whiten")
    m = n * d
    if m > MAX_SW_ENTRIES:
        raise ValueError("batch too large for the differentiable path")

    mu = tape.scale(tape.sum(f, axis=0), 1.0 / n)
    centered = tape.sub(f, tape.broadcast_row(mu, n))
    cov = tape.scale(tape.matmul(tape.transpose(centered), centered), 1.0 / (n - 1))
    # rescue ridge only for rank-deficient batches, mirroring whiten; the
    # ridge level is treated as a constant in the graph
    delta = 1e-6 * float(np.trace(cov.value)) / d
    if np.linalg.eigvalsh(0.5 * (cov.value + cov.value.T)).min() <= delta:
        cov = tape.add(cov, tape.constant(delta * np.eye(d)))
    root = tape.inv_sqrtm_psd(cov)
    vec = tape.reshape(tape.matmul(centered, root), (m, 1))

    jit = tape.constant(_jitter_ramp(vec.value.reshape(-1)).reshape(m, 1))
    x = tape.add(vec, jit)
    a_row = tape.constant(_blom_coefficients(m)[None, :])
    num = tape.powc(tape.matmul(a_row, tape.sort_gather(x)), 2.0)
    xbar = tape.scale(tape.sum(x), 1.0 / m)
    cx = tape.sub(x, xbar)
    den = tape.sum(tape.mul(cx, cx))
    return -tape.log(tape.div(num, den))
