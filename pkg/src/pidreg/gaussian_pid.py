"""Gaussian partial information decomposition.

Estimates the joint Gaussian of a scalar target and stacked latent
blocks, evaluates the closed-form mutual informations, minimizes the
union information over couplings that preserve the per-modality
marginals, and turns the resulting components into fusion weights.

Block layout is fixed everywhere: column 0 is Y, then the latent blocks
in modality order.  All information quantities are in nats.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky

__all__ = [
    "JointGaussian",
    "SolverConfig",
    "PidComponents",
    "FusionWeights",
    "UnionResult",
    "covariance_estimate",
    "conditional_cov",
    "mi_pairwise",
    "mi_joint",
    "psd_project",
    "union_information",
    "brute_force_union_1d",
    "pid_decompose",
    "fusion_weights",
]


@dataclass
class JointGaussian:
    """Gaussian over [Y, Z_1, ..., Z_k]; dims stores the per-block sizes with Y first."""

    dims: tuple
    mean: np.ndarray
    cov: np.ndarray
    shrinkage: float = 0.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.cov = np.asarray(self.cov, dtype=np.float64)
        n = sum(self.dims)
        if self.dims[0] != 1:
            raise ValueError("first block must be the scalar target")
        if self.cov.shape != (n, n) or self.mean.shape != (n,):
            raise ValueError("covariance/mean shape does not match dims")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")

    @property
    def k(self):
        return len(self.dims) - 1

    @property
    def sigma_y2(self):
        return float(self.cov[0, 0])

    def z_slice(self, i):
        """Slice of latent block i (0-based) in the stacked layout."""
        start = 1 + sum(self.dims[1:i + 1])
        return slice(start, start + self.dims[i + 1])

    def cross_yz(self, i):
        return self.cov[0, self.z_slice(i)]

    def cov_z(self, i):
        s = self.z_slice(i)
        return self.cov[s, s]

    @property
    def cov_zz(self):
        return self.cov[1:, 1:]

    @property
    def b(self):
        """Stacked target-latent cross covariances, one row per the scalar Y."""
        return self.cov[0, 1:]


def covariance_estimate(f, dims, shrinkage=None):
    """Joint Gaussian from stacked samples [y, z_1, ..., z_k] of shape N x (1+sum dims).

    dims lists the latent block sizes.  shrinkage is the absolute ridge
    added to the diagonal; None picks 1e-4 * trace/dim of the raw
    covariance.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("stacked sample matrix must be 2-d")
    if f.shape[0] < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite values in stacked samples")
    dims = tuple(int(d) for d in dims)
    if f.shape[1] != 1 + sum(dims):
        raise ValueError("column count does not match 1 + sum(dims)")
    mean = f.mean(axis=0)
    centered = f - mean
    cov = centered.T @ centered / (f.shape[0] - 1)
    if shrinkage is None:
        shrinkage = 1e-4 * np.trace(cov) / cov.shape[0]
    shrinkage = float(shrinkage)
    cov = cov + shrinkage * np.eye(cov.shape[0])
    return JointGaussian(dims=(1,) + dims, mean=mean, cov=cov, shrinkage=shrinkage)


def conditional_cov(jg):
    """Covariance of the stacked latents given Y (Schur complement in the Y block)."""
    sy2 = jg.sigma_y2
    if sy2 <= 0:
        raise ValueError("target variance must be positive")
    zy = jg.cov[1:, 0]
    c = jg.cov_zz - np.outer(zy, zy) / sy2
    return 0.5 * (c + c.T)


def _logdet_spd(a):
    try:
        c = cholesky(a, lower=True)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError("matrix not positive definite") from e
    return 2.0 * float(np.log(np.diag(c)).sum())


def mi_pairwise(jg, i):
    """I(Z_i; Y) in nats from the closed form for jointly Gaussian blocks."""
    bi = jg.cross_yz(i)
    # conditional block keeps the log1p form shared with the union objective
    cond_i = jg.cov_z(i) - np.outer(bi, bi) / jg.sigma_y2
    cond_i = 0.5 * (cond_i + cond_i.T)
    try:
        quad = float(bi @ cho_solve(cho_factor(cond_i), bi))
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"latent block {i} covariance is singular") from e
    return 0.5 * np.log1p(max(quad, 0.0) / jg.sigma_y2)


def mi_joint(jg):
    """I(Y; Z_1, ..., Z_k) = 0.5 log(det Sigma_ZZ / det Sigma_ZZ|Y)."""
    return 0.5 * (_logdet_spd(jg.cov_zz) - _logdet_spd(conditional_cov(jg)))


def psd_project(m, eps):
    """Nearest-PSD projection (eigenvalue clip at zero) plus an eps ridge."""
    s = 0.5 * (m + m.T)
    w, u = np.linalg.eigh(s)
    w = np.maximum(w, 0.0) + eps
    out = (u * w) @ u.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class SolverConfig:
    eta0: float = 0.1
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 20
    eps: float = 1e-6
    tol: float = 1e-8
    # ill-conditioned instances descend a narrow valley at ~1e-7 per step;
    # the cap is generous because converged solves stop on tol long before it
    max_iter: int = 20000

    def __post_init__(self):
        if not (0 < self.armijo_c < 1 and 0 < self.backtrack < 1):
            raise ValueError("Armijo parameters must lie in (0, 1)")
        if min(self.eta0, self.eps, self.tol) <= 0 or self.max_iter <= 0:
            raise ValueError("solver parameters must be positive")


@dataclass
class UnionResult:
    value: float
    sigma_q: np.ndarray
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def _is_pd_with_margin(m, margin):
    try:
        cholesky(m - margin * np.eye(m.shape[0]), lower=True)
        return True
    except np.linalg.LinAlgError:
        return False


class _Feasibility:
    """Projection onto {PSD, diagonal blocks fixed at the marginal conditionals}."""

    def __init__(self, diag_blocks, slices, eps):
        self.diag_blocks = diag_blocks
        self.slices = slices
        self.eps = eps
        n = slices[-1].stop
        self.block_diag = np.zeros((n, n))
        for s, blk in zip(slices, diag_blocks):
            self.block_diag[s, s] = blk
        self.cross_mask = np.ones((n, n))
        for s in slices:
            self.cross_mask[s, s] = 0.0

    def restore_diag(self, m):
        out = m.copy()
        for s, blk in zip(self.slices, self.diag_blocks):
            out[s, s] = blk
        return out

    def project(self, m):
        # interior fast path: a candidate that is PD with margin is its own
        # projection, because the eps ridge added by psd_project sits on the
        # main diagonal and is undone by the diagonal-block restore
        if _is_pd_with_margin(m, 0.5 * self.eps):
            return m
        out = self.restore_diag(psd_project(m, self.eps))
        if _is_pd_with_margin(out, 0.5 * self.eps):
            return out
        # shrink the cross blocks toward the feasible block diagonal until
        # the matrix is PD again; the anchor itself bounds what is reachable
        anchor_min = float(np.linalg.eigvalsh(self.block_diag).min())
        target = min(self.eps, 0.5 * anchor_min) if anchor_min < self.eps else self.eps
        cross = (out - self.block_diag) * self.cross_mask
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if np.linalg.eigvalsh(self.block_diag + mid * cross).min() >= target:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-4:
                break
        return self.block_diag + lo * cross


def _sym_root_pair(m):
    """Symmetric PSD square root and its (floored) inverse root."""
    w, u = np.linalg.eigh(0.5 * (m + m.T))
    w = np.clip(w, 0.0, None)
    root = (u * np.sqrt(w)) @ u.T
    floor = 1e-14 * max(float(w.max()), 1e-300)
    inv = (u / np.sqrt(np.maximum(w, floor))) @ u.T
    return root, inv


def union_information(jg, cfg=SolverConfig(), init=None):
    """Minimize the union-information objective by projected gradient descent.

    Both paths pin the diagonal blocks of the coupling's conditional
    covariance at the data marginals and move only the cross blocks.
    For two modalities the cross block is parameterized as
    A^(1/2) K B^(1/2) with the spectral norm of K capped below one, which
    makes the feasible set an exact operator-norm ball with a cheap SVD
    projection; the three-modality path projects the block matrix
    directly.  init warm-starts the iterate; the canonical start (the
    data conditional, whose objective equals the joint information) is
    always evaluated too and descent begins from whichever is lower, so
    a warm start can never push the result above the joint information.
    """
    if jg.k == 2:
        return _union_contraction(jg, cfg, init)
    if jg.k == 3:
        return _union_block_pgd(jg, cfg, init)
    raise ValueError("union information is defined for 2 or 3 modalities")


def _union_contraction(jg, cfg, init):
    sy2 = jg.sigma_y2
    if sy2 <= 0:
        raise ValueError("target variance must be positive")
    inv_sy2 = 1.0 / sy2
    b = jg.b
    cond = conditional_cov(jg)
    d1, d2 = jg.dims[1], jg.dims[2]
    s1, s2 = slice(0, d1), slice(d1, d1 + d2)
    blk_a, blk_b = cond[s1, s1], cond[s2, s2]
    ra, ra_inv = _sym_root_pair(blk_a)
    rb, rb_inv = _sym_root_pair(blk_b)
    cap = 1.0 - cfg.eps

    def project(k):
        u, sv, vt = np.linalg.svd(k, full_matrices=False)
        return u @ (np.minimum(sv, cap)[:, None] * vt)

    def assemble(k):
        cross = ra @ k @ rb
        out = np.empty((d1 + d2, d1 + d2))
        out[s1, s1] = blk_a
        out[s2, s2] = blk_b
        out[s1, s2] = cross
        out[s2, s1] = cross.T
        return out

    def objective(k):
        m = assemble(k)
        s = cho_solve(cho_factor(0.5 * (m + m.T)), b)
        return 0.5 * np.log1p(inv_sy2 * float(b @ s)), s

    x = project(ra_inv @ cond[s1, s2] @ rb_inv)
    fx, sx = objective(x)
    if init is not None:
        xw = project(ra_inv @ init[s1, s2] @ rb_inv)
        fw, sw = objective(xw)
        if fw < fx:
            x, fx, sx = xw, fw, sw
    trace = [fx]
    converged = False
    it = 0
    eta = cfg.eta0
    for it in range(1, cfg.max_iter + 1):
        m_scalar = 1.0 + inv_sy2 * float(b @ sx)
        grad = ra @ ((-inv_sy2 / m_scalar) * np.outer(sx[s1], sx[s2])) @ rb
        trial = eta
        accepted = False
        backtracked = False
        for _ in range(cfg.max_backtracks + 1):
            cand = project(x - trial * grad)
            try:
                fc, sc = objective(cand)
            except np.linalg.LinAlgError:
                trial *= cfg.backtrack
                backtracked = True
                continue
            step = cand - x
            sn2 = float((step * step).sum())
            # a null step satisfies the sufficient-decrease test trivially,
            # so require strict progress before accepting
            if sn2 > 0.0 and fc < fx and fc <= fx - (cfg.armijo_c / trial) * sn2:
                accepted = True
                break
            trial *= cfg.backtrack
            backtracked = True
        if not accepted:
            converged = True
            break
        # carry the accepted step; grow it when no backtracking was needed so
        # flat near-boundary instances do not crawl at the initial step size
        eta = trial if backtracked else 2.0 * trial
        drop = fx - fc
        x, fx, sx = cand, fc, sc
        trace.append(fx)
        if drop < cfg.tol:
            converged = True
            break
    return UnionResult(value=float(fx), sigma_q=assemble(x), iterations=it,
                       converged=converged, trace=trace)


def _union_block_pgd(jg, cfg, init):
    sy2 = jg.sigma_y2
    if sy2 <= 0:
        raise ValueError("target variance must be positive")
    inv_sy2 = 1.0 / sy2
    b = jg.b
    cond = conditional_cov(jg)
    offsets = np.cumsum([0] + list(jg.dims[1:]))
    slices = [slice(offsets[i], offsets[i + 1]) for i in range(jg.k)]
    feas = _Feasibility([cond[s, s] for s in slices], slices, cfg.eps)

    def objective(m):
        c = cho_factor(m)
        s = cho_solve(c, b)
        return 0.5 * np.log1p(inv_sy2 * float(b @ s)), s

    x = feas.project(cond)
    fx, sx = objective(x)
    if init is not None:
        xw = feas.project(feas.restore_diag(init))
        fw, sw = objective(xw)
        if fw < fx:
            x, fx, sx = xw, fw, sw
    trace = [fx]
    converged = False
    it = 0
    eta = cfg.eta0
    for it in range(1, cfg.max_iter + 1):
        m_scalar = 1.0 + inv_sy2 * float(b @ sx)
        grad = (-0.5 * inv_sy2 / m_scalar) * np.outer(sx, sx) * feas.cross_mask
        trial = eta
        accepted = False
        backtracked = False
        for _ in range(cfg.max_backtracks + 1):
            cand = feas.project(x - trial * grad)
            fc, sc = objective(cand)
            step = cand - x
            sn2 = float((step * step).sum())
            if sn2 > 0.0 and fc < fx and fc <= fx - (cfg.armijo_c / trial) * sn2:
                accepted = True
                break
            trial *= cfg.backtrack
            backtracked = True
        if not accepted:
            converged = True
            break
        # carry the accepted step; grow it when no backtracking was needed so
        # flat near-boundary instances do not crawl at the initial step size
        eta = trial if backtracked else 2.0 * trial
        drop = fx - fc
        x, fx, sx = cand, fc, sc
        trace.append(fx)
        if drop < cfg.tol:
            converged = True
            break
    return UnionResult(value=float(fx), sigma_q=x, iterations=it,
                       converged=converged, trace=trace)


def brute_force_union_1d(jg, grid_resolution=100001):
    """Grid-search oracle for two 1-d latents.

    The only free parameter is the scalar conditional cross covariance;
    the grid is clipped just inside the feasibility interval.
    """
    if jg.dims != (1, 1, 1):
        raise ValueError("oracle covers exactly two 1-d latents")
    sy2 = jg.sigma_y2
    cond = conditional_cov(jg)
    v1, v2 = cond[0, 0], cond[1, 1]
    b1, b2 = jg.b
    cmax = np.sqrt(v1 * v2) * (1.0 - 1e-9)
    c = np.linspace(-cmax, cmax, int(grid_resolution))
    det = v1 * v2 - c * c
    quad = (v2 * b1 * b1 - 2.0 * c * b1 * b2 + v1 * b2 * b2) / det
    f = 0.5 * np.log1p(quad / sy2)
    return float(f.min())


CLAMP_TOL = 1e-6


@dataclass
class PidComponents:
    u: tuple
    r: float
    s: float
    i_pairwise: tuple
    i_total: float
    i_union: float
    clamped: dict
    raw: dict
    union_result: UnionResult = None

    def as_vector(self):
        """Component vector (U_1, ..., U_k, R, S) used for convergence tracking."""
        return np.array(list(self.u) + [self.r, self.s])


def _clamp(name, value, clamped):
    if -CLAMP_TOL <= value < 0.0:
        clamped[name] = True
        return 0.0
    if value < -CLAMP_TOL:
        clamped[name] = True
        return value
    return value


def pid_decompose(jg, cfg=SolverConfig(), init=None):
    """Full decomposition: uniques, redundancy, synergy, plus diagnostics."""
    k = jg.k
    i_pair = tuple(mi_pairwise(jg, i) for i in range(k))
    i_total = mi_joint(jg)
    res = union_information(jg, cfg, init=init)
    i_union = res.value
    if k == 2:
        r = i_pair[0] + i_pair[1] - i_union
    else:
        r = (sum(i_pair) - i_union) / 2.0
    u = tuple(i_pair[i] - r for i in range(k))
    s = i_total - i_union
    raw = {f"u{i + 1}": u[i] for i in range(k)}
    raw.update(r=r, s=s)
    clamped = {}
    u = tuple(_clamp(f"u{i + 1}", u[i], clamped) for i in range(k))
    r = _clamp("r", r, clamped)
    s = _clamp("s", s, clamped)
    return PidComponents(u=u, r=r, s=s, i_pairwise=i_pair, i_total=i_total,
                         i_union=i_union, clamped=clamped, raw=raw,
                         union_result=res)


@dataclass
class FusionWeights:
    w: tuple
    xi_policy: str
    xi: object = None

    @property
    def synergy_weight(self):
        return self.w[-1]


def fusion_weights(pc, xi_policy="expected", rng=None, xi=None):
    """Eq-style weights: uniques plus a redundancy share per modality, synergy last.

    xi_policy "sampled" draws the redundancy assignment from rng
    (Bernoulli for two modalities, uniform categorical for three);
    "expected" splits R evenly.  xi forces a realization for tests.
    """
    k = len(pc.u)
    comps = list(pc.u) + [pc.r, pc.s]
    if any(c < 0 for c in comps):
        raise ValueError("fusion weights need nonnegative components (post-clamp)")
    t = float(sum(comps))
    if t <= 0.0:
        w = (1.0 / (k + 1),) * (k + 1)
        return FusionWeights(w=w, xi_policy=xi_policy, xi=None)
    if k == 2:
        if xi is None:
            if xi_policy == "sampled":
                if rng is None:
                    raise ValueError("sampled policy needs an rng")
                xi = float(rng.integers(0, 2))
            elif xi_policy == "expected":
                xi = 0.5
            else:
                raise ValueError(f"unknown xi policy {xi_policy!r}")
        shares = [xi * pc.r, (1.0 - xi) * pc.r]
    else:
        if xi is None:
            if xi_policy == "sampled":
                if rng is None:
                    raise ValueError("sampled policy needs an rng")
                xi = int(rng.integers(0, 3))
                shares = [pc.r if j == xi else 0.0 for j in range(3)]
            elif xi_policy == "expected":
                shares = [pc.r / 3.0] * 3
            else:
                raise ValueError(f"unknown xi policy {xi_policy!r}")
        else:
            shares = [pc.r if j == int(xi) else 0.0 for j in range(3)]
    head = [(pc.u[i] + shares[i]) / t for i in range(k)]
    syn = 1.0 - sum(head)
    if syn < 0.0:
        # rounding residue only; rescale so the vector stays in the simplex
        total = sum(head)
        head = [h / total for h in head]
        syn = max(1.0 - sum(head), 0.0)
    w = tuple(head) + (syn,)
    return FusionWeights(w=w, xi_policy=xi_policy, xi=xi)
