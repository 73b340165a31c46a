"""Synthetic bimodal benchmark with controllable redundancy, uniqueness, synergy.

Three scalar latents drive everything: R is shared by both modalities,
U_1 and U_2 are private to one each.  Observations are random two-layer
tanh projections of the latent pairs plus isotropic noise, and the
target mixes the latents through fixed weights:

    Y = w_r tanh(R) + w_u1 sin(U_1) + w_u2 sin(U_2) + w_s (U_1 U_2) + eps

so the ground-truth information structure is set by (w_u1, w_u2, w_s, w_r).
Latent families swap the sampling distribution of R, U_1, U_2 to probe
behaviour away from Gaussianity.
"""

import csv
import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

FAMILIES = ("gaussian", "chi2", "rademacher-u1", "mixture")
SYNERGY_FORMS = ("product", "sign-flip")

# offset keeps the split permutation reproducible from the config alone,
# independent of how many draws generation itself consumed
SPLIT_SEED_OFFSET = 7919

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class SynthConfig:
    n: int = 10000
    d1: int = 20
    d2: int = 20
    h1: int = 16
    w_r: float = 0.25
    w_u1: float = 0.0
    w_u2: float = 0.0
    w_s: float = 0.75
    alpha: float = 1.0
    sigma1: float = 0.1
    sigma2: float = 0.1
    sigma_eps: float = 0.05
    family: str = "gaussian"
    synergy: str = "product"
    seed: int = 0
    label: str = ""

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two samples")
        for name in ("d1", "d2", "h1"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("sigma1", "sigma2", "sigma_eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("w_r", "w_u1", "w_u2", "w_s", "alpha"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown latent family: {self.family!r}")
        if self.synergy not in SYNERGY_FORMS:
            raise ValueError(f"unknown synergy form: {self.synergy!r}")

    def echo(self):
        return dataclasses.asdict(self)


@dataclass
class SynthDataset:
    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    r: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    config: SynthConfig


def gen_latents(cfg, rng):
    """Draw (R, U_1, U_2) as i.i.d. columns from the configured family."""
    n = cfg.n
    if cfg.family == "gaussian":
        r, u1, u2 = rng.standard_normal((3, n))
    elif cfg.family == "chi2":
        r = rng.chisquare(4, n)
        u1 = rng.chisquare(4, n)
        u2 = rng.chisquare(4, n)
    elif cfg.family == "rademacher-u1":
        r = rng.standard_normal(n)
        u1 = rng.integers(0, 2, n) * 2.0 - 1.0
        u2 = rng.standard_normal(n)
    elif cfg.family == "mixture":
        # U_1 ~ even mixture of N(+2, 0.2) and N(-2, 0.2)
        r = rng.standard_normal(n)
        sign = rng.integers(0, 2, n) * 2.0 - 1.0
        u1 = 2.0 * sign + np.sqrt(0.2) * rng.standard_normal(n)
        u2 = rng.standard_normal(n)
    else:
        raise ValueError(f"unknown latent family: {cfg.family!r}")
    return r, u1, u2


def gen_modality(pair, cfg, rng, m):
    """Project a latent pair through a freshly drawn two-layer tanh MLP.

    m picks the modality's output width and noise level.  All weights and
    biases are N(0, alpha^2); the additive noise is N(0, sigma_m^2 I).
    """
    pair = np.asarray(pair, dtype=np.float64)
    if pair.ndim != 2 or pair.shape[1] != 2:
        raise ValueError("latent pair must be n x 2")
    d_out = cfg.d1 if m == 0 else cfg.d2
    sigma = cfg.sigma1 if m == 0 else cfg.sigma2
    a = cfg.alpha
    w1 = a * rng.standard_normal((2, cfg.h1))
    b1 = a * rng.standard_normal(cfg.h1)
    w2 = a * rng.standard_normal((cfg.h1, d_out))
    b2 = a * rng.standard_normal(d_out)
    x = np.tanh(pair @ w1 + b1) @ w2 + b2
    return x + sigma * rng.standard_normal((pair.shape[0], d_out))


def gen_target(r, u1, u2, cfg, rng):
    """Mix the latents into the scalar target with the configured weights."""
    if cfg.synergy == "product":
        interaction = u1 * u2
    else:
        interaction = np.sign(u1) * u2
    y = (cfg.w_r * np.tanh(r) + cfg.w_u1 * np.sin(u1)
         + cfg.w_u2 * np.sin(u2) + cfg.w_s * interaction)
    return y + cfg.sigma_eps * rng.standard_normal(r.shape[0])


def generate(cfg):
    """Full pipeline under one generator seeded from the config."""
    rng = np.random.default_rng(cfg.seed)
    r, u1, u2 = gen_latents(cfg, rng)
    x1 = gen_modality(np.column_stack([r, u1]), cfg, rng, 0)
    x2 = gen_modality(np.column_stack([r, u2]), cfg, rng, 1)
    y = gen_target(r, u1, u2, cfg, rng)
    return SynthDataset(x1=x1, x2=x2, y=y, r=r, u1=u1, u2=u2, config=cfg)


def split_indices(cfg):
    """Deterministic 70/10/20 row permutation derived from the seed only."""
    rng = np.random.default_rng(cfg.seed + SPLIT_SEED_OFFSET)
    perm = rng.permutation(cfg.n)
    n_tr = int(SPLIT_FRACTIONS[0] * cfg.n)
    n_va = int(SPLIT_FRACTIONS[1] * cfg.n)
    if n_tr < 1 or n_va < 1 or cfg.n - n_tr - n_va < 1:
        raise ValueError("dataset too small to split")
    return perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:]


def splits(ds):
    """Dataset dict in the shape the trainer consumes."""
    idx_tr, idx_va, idx_te = split_indices(ds.config)
    def take(idx):
        return ds.y[idx], [ds.x1[idx], ds.x2[idx]]
    return {"train": take(idx_tr), "val": take(idx_va), "test": take(idx_te)}


SCENARIO_WEIGHTS = {
    # (w_u1, w_u2, w_s, w_r)
    "a": (0.00, 0.00, 0.75, 0.25),
    "b": (0.00, 0.00, 0.50, 0.50),
    "c": (0.00, 0.00, 0.25, 0.75),
    "d": (0.00, 0.80, 0.10, 0.10),
    "e": (0.80, 0.00, 0.10, 0.10),
    "f": (1.00, 0.00, 0.00, 0.00),
    "g": (0.00, 1.00, 0.00, 0.00),
    "h": (0.00, 0.00, 1.00, 0.00),
    "i": (0.00, 0.00, 0.00, 1.00),
}


def scenario_grid(family=None, seed=0, **overrides):
    """The nine canonical weight configurations, per family.

    family=None enumerates all families (9 configs each).  The sign-flip
    interaction replaces the product exactly where the Rademacher latent
    does, which for values in {-1, +1} is the same function.
    """
    fams = FAMILIES if family is None else (family,)
    out = []
    for fam in fams:
        synergy = "sign-flip" if fam == "rademacher-u1" else "product"
        for lab, (w_u1, w_u2, w_s, w_r) in SCENARIO_WEIGHTS.items():
            out.append(SynthConfig(w_u1=w_u1, w_u2=w_u2, w_s=w_s, w_r=w_r,
                                   family=fam, synergy=synergy, seed=seed,
                                   label=lab, **overrides))
    return out


def save_dataset(ds, out_dir, stem="dataset"):
    """Write the feature CSV, the latent CSV, and the sidecar config JSON."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = ds.config
    data_path = os.path.join(out_dir, f"{stem}.csv")
    latent_path = os.path.join(out_dir, f"{stem}.latents.csv")
    meta_path = os.path.join(out_dir, f"{stem}.json")
    header = (["y"] + [f"x1_{j}" for j in range(cfg.d1)]
              + [f"x2_{j}" for j in range(cfg.d2)])
    table = np.column_stack([ds.y, ds.x1, ds.x2])
    with open(data_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        # repr of a Python float is the shortest round-trip form
        for row in table:
            writer.writerow([repr(float(v)) for v in row])
    with open(latent_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r", "u1", "u2"])
        for row in np.column_stack([ds.r, ds.u1, ds.u2]):
            writer.writerow([repr(float(v)) for v in row])
    meta = {"config": cfg.echo(), "seed": cfg.seed,
            "latents": os.path.basename(latent_path)}
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
    return {"data": data_path, "latents": latent_path, "meta": meta_path}


def load_dataset(data_path):
    """Rebuild a SynthDataset from the CSV pair written by save_dataset."""
    stem = data_path[:-4] if data_path.endswith(".csv") else data_path
    with open(stem + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = SynthConfig(**meta["config"])
    table = np.loadtxt(data_path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] != 1 + cfg.d1 + cfg.d2:
        raise ValueError("feature CSV width does not match the sidecar config")
    latent_path = os.path.join(os.path.dirname(data_path), meta["latents"])
    lat = np.loadtxt(latent_path, delimiter=",", skiprows=1, ndmin=2)
    return SynthDataset(x1=table[:, 1:1 + cfg.d1],
                        x2=table[:, 1 + cfg.d1:],
                        y=table[:, 0],
                        r=lat[:, 0], u1=lat[:, 1], u2=lat[:, 2],
                        config=cfg)
