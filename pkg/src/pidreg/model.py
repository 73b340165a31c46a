"""Encoders, adaptive-noise bottleneck, weighted fusion, and the total loss.

Parameters live in a flat name -> float64 array dict; each training step
lifts them onto a fresh tape, builds the loss graph, and reads gradients
back by name.  All randomness flows through one generator in a fixed order
(per modality: encoder dropout then bottleneck noise; then predictor
dropout, then the marginal-divergence reference draws), so a run is fully
reproducible from the seed.
"""

import base64
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .kernels import KernelConfig, cmi_loss_node, cs_marginal_loss_node
from .normality import gauss_loss_node

BN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderSpec:
    """Widths and per-hidden-layer regularization of one MLP stack."""

    widths: tuple
    dropout: tuple = ()
    batchnorm: bool = True
    final_batchnorm: bool = False
    activation: str = "relu"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("need an input and an output width")
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")
        n_hidden = len(self.widths) - 2
        if len(self.dropout) not in (0, n_hidden):
            raise ValueError("need one dropout rate per hidden layer, or none")
        if any(not 0.0 <= p < 1.0 for p in self.dropout):
            raise ValueError("dropout rates must be in [0, 1)")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")


def encoder_spec(d_in, hidden, d_latent):
    """Paper stack: in -> HL -> HL/2 -> d, batch-normed output."""
    return EncoderSpec(widths=(d_in, hidden, max(hidden // 2, 1), d_latent),
                       dropout=(0.3, 0.2), batchnorm=True, final_batchnorm=True)


def predictor_spec(d_latent, hidden, d_out):
    """Prediction head: wide -> narrow -> output, no output normalization."""
    return EncoderSpec(widths=(d_latent, hidden, max(hidden // 2, 1), d_out),
                       dropout=(0.3, 0.2), batchnorm=True, final_batchnorm=False)


@dataclass(frozen=True)
class ModelSpec:
    encoders: tuple
    predictor: EncoderSpec
    lam_init: float = 2.0

    def __post_init__(self):
        if len(self.encoders) not in (2, 3):
            raise ValueError("expected two or three modalities")
        outs = {e.widths[-1] for e in self.encoders}
        if len(outs) != 1:
            raise ValueError("all encoders must share the latent width")
        if self.predictor.widths[0] != self.encoders[0].widths[-1]:
            raise ValueError("predictor input width must equal the latent width")

    @property
    def k(self):
        return len(self.encoders)

    @property
    def latent_dim(self):
        return self.encoders[0].widths[-1]


@dataclass(frozen=True)
class FusionState:
    weights: object
    frozen: bool = False
    source: int = -1


def _init_stack(params, prefix, spec, rng):
    for i in range(len(spec.widths) - 1):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        params[f"{prefix}/l{i}/W"] = (
            rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        params[f"{prefix}/l{i}/b"] = np.zeros((1, fan_out))
        last = i == len(spec.widths) - 2
        if (spec.batchnorm and not last) or (last and spec.final_batchnorm):
            params[f"{prefix}/l{i}/g"] = np.ones((1, fan_out))
            params[f"{prefix}/l{i}/beta"] = np.zeros((1, fan_out))


def init_params(spec, rng):
    """Kaiming-scaled weights, zero biases, unit batch-norm gains."""
    params = {}
    for m, enc in enumerate(spec.encoders):
        _init_stack(params, f"enc{m}", enc, rng)
        params[f"bneck{m}/lam"] = np.array([[spec.lam_init]])
    _init_stack(params, "pred", spec.predictor, rng)
    return params


def lift_params(tape, params):
    return {name: tape.leaf(v) for name, v in params.items()}


def _batchnorm(tape, x, gamma, beta):
    n = x.value.shape[0]
    mu = tape.scale(tape.sum(x, axis=0), 1.0 / n)
    centered = tape.sub(x, mu)
    var = tape.scale(tape.sum(tape.mul(centered, centered), axis=0), 1.0 / n)
    eps = tape.constant(np.full((1, x.value.shape[1]), BN_EPS))
    xhat = tape.mul(centered, tape.powc(tape.add(var, eps), -0.5))
    return tape.add(tape.mul(xhat, gamma), beta)


def _dropout(tape, x, rate, rng):
    keep = 1.0 - rate
    mask = (rng.random(size=x.value.shape) < keep) / keep
    return tape.mul(x, tape.constant(mask))


def _forward_stack(tape, leaves, prefix, spec, x, rng, train):
    h = x if isinstance(x, Tensor) else tape.constant(np.asarray(x, dtype=np.float64))
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        h = tape.add(tape.matmul(h, leaves[f"{prefix}/l{i}/W"]),
                     leaves[f"{prefix}/l{i}/b"])
        last = i == n_layers - 1
        if (spec.batchnorm and not last) or (last and spec.final_batchnorm):
            h = _batchnorm(tape, h, leaves[f"{prefix}/l{i}/g"],
                           leaves[f"{prefix}/l{i}/beta"])
        if not last:
            if spec.activation == "relu":
                h = tape.leaky_relu(h, 0.0)
            if train and spec.dropout and spec.dropout[i] > 0.0:
                h = _dropout(tape, h, spec.dropout[i], rng)
    return h


def encode(tape, leaves, spec, m, x, rng=None, train=False):
    """Run modality m's encoder stack; training mode consumes dropout draws."""
    if train and rng is None:
        raise ValueError("training mode needs a generator for dropout")
    return _forward_stack(tape, leaves, f"enc{m}", spec.encoders[m], x, rng, train)


def bottleneck(tape, r, lam_leaf, rng):
    """Convex mix of the representation with batch-moment-matched noise.

    Z = lam * R + (1 - lam) * eps with lam = sigmoid(lam'), eps drawn per
    row from a diagonal Gaussian carrying R's current batch mean/variance.
    The noise and its statistics are constants on the tape.
    """
    n, d = r.value.shape
    if n < 2:
        raise ValueError("batch moments need at least two rows")
    lam = tape.sigmoid(lam_leaf)
    mu = r.value.mean(axis=0)
    sd = r.value.std(axis=0)
    eps = tape.constant(mu + sd * rng.standard_normal(size=(n, d)))
    z = tape.add(tape.mul(lam, r), tape.mul(1.0 - lam, eps))
    return z, {"lam": float(lam.value[0, 0]), "eps": eps.value}


def latents(tape, leaves, spec, xs, rng, train=True):
    """Encoder + bottleneck per modality, in modality order."""
    if len(xs) != spec.k:
        raise ValueError("one input block per modality expected")
    out = []
    info = []
    for m, x in enumerate(xs):
        r = encode(tape, leaves, spec, m, x, rng, train)
        z, meta = bottleneck(tape, r, leaves[f"bneck{m}/lam"], rng)
        out.append(z)
        info.append(meta)
    return out, info


def eval_latents(tape, leaves, spec, xs):
    """Deterministic latents for evaluation: noise replaced by its mean.

    With eps ~ N(mu_R, diag sigma_R^2) the expected bottleneck output is
    lam * R + (1 - lam) * mu_R, so evaluation needs no generator at all.
    """
    if len(xs) != spec.k:
        raise ValueError("one input block per modality expected")
    out = []
    for m, x in enumerate(xs):
        r = encode(tape, leaves, spec, m, x, rng=None, train=False)
        lam = tape.sigmoid(leaves[f"bneck{m}/lam"])
        mu = tape.scale(tape.sum(r, axis=0), 1.0 / r.value.shape[0])
        z = tape.add(tape.mul(lam, r), tape.mul(1.0 - lam, mu))
        out.append(z)
    return out


def fuse(tape, zs, fs):
    """Weighted sum of latents plus the weighted elementwise product term."""
    w = fs.weights.w
    if len(w) != len(zs) + 1:
        raise ValueError("need one weight per modality plus the product term")
    out = tape.scale(zs[0], w[0])
    for i in range(1, len(zs)):
        out = tape.add(out, tape.scale(zs[i], w[i]))
    prod = zs[0]
    for z in zs[1:]:
        prod = tape.mul(prod, z)
    return tape.add(out, tape.scale(prod, w[-1]))


def predict(tape, leaves, spec, z, rng=None, train=False):
    if train and rng is None:
        raise ValueError("training mode needs a generator for dropout")
    return _forward_stack(tape, leaves, "pred", spec.predictor, z, rng, train)


def loss_terms(tape, leaves, spec, y, xs, zs, fs, rng, train=True,
               lambdas=(0.1, 0.1, 0.1), kernel_cfg=KernelConfig()):
    """Assemble Eq.-17-style total loss from already-built latent nodes."""
    fused = fuse(tape, zs, fs)
    yhat = predict(tape, leaves, spec, fused, rng, train)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    diff = tape.sub(yhat, tape.constant(y))
    pred = tape.mean(tape.mul(diff, diff))
    total = pred
    parts = {"pred": float(pred.value[0, 0]),
             "cs": np.nan, "cmi": np.nan, "gauss": np.nan}
    nodes = {"pred": pred, "cs": None, "cmi": None, "gauss": None, "reg": None}
    builders = {
        "cs": lambda: cs_marginal_loss_node(tape, zs, rng, kernel_cfg),
        "cmi": lambda: cmi_loss_node(tape, zs, xs, kernel_cfg),
        "gauss": lambda: gauss_loss_node(tape, y, zs),
    }
    # disabled terms are not built at all; their rng draws are skipped too
    for lam, name in zip(lambdas, ("cs", "cmi", "gauss")):
        if lam != 0.0:
            term = builders[name]()
            nodes[name] = term
            parts[name] = float(term.value[0, 0])
            weighted = tape.scale(term, lam)
            total = tape.add(total, weighted)
            nodes["reg"] = (weighted if nodes["reg"] is None
                            else tape.add(nodes["reg"], weighted))
    return total, parts, nodes


def total_loss(tape, leaves, spec, y, xs, fs, rng, train=True,
               lambdas=(0.1, 0.1, 0.1), kernel_cfg=KernelConfig()):
    zs, _ = latents(tape, leaves, spec, xs, rng, train)
    return loss_terms(tape, leaves, spec, y, xs, zs, fs, rng, train,
                      lambdas, kernel_cfg)


# ---------------------------------------------------------------------------
# checkpointing


def _pack(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {"shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(d):
    a = np.frombuffer(base64.b64decode(d["data"]), dtype=np.float64)
    return a.reshape(d["shape"]).copy()


def config_hash(obj):
    """Stable digest of any JSON-serializable config mapping."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path, params, fusion, opt_state, rng_state, cfg_hash,
                    extra=None):
    doc = {
        "params": {k: _pack(v) for k, v in params.items()},
        "fusion": None if fusion is None else {
            "w": list(fusion.weights.w),
            "xi_policy": fusion.weights.xi_policy,
            "xi": fusion.weights.xi,
            "frozen": fusion.frozen,
            "source": fusion.source,
        },
        "opt": {k: _pack(v) if isinstance(v, np.ndarray) else v
                for k, v in opt_state.items()},
        "rng_state": rng_state,
        "config_hash": cfg_hash,
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    from .gaussian_pid import FusionWeights

    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    params = {k: _unpack(v) for k, v in doc["params"].items()}
    fusion = None
    if doc["fusion"] is not None:
        f = doc["fusion"]
        fw = FusionWeights(w=tuple(f["w"]), xi_policy=f["xi_policy"], xi=f["xi"])
        fusion = FusionState(weights=fw, frozen=f["frozen"], source=f["source"])
    opt = {k: _unpack(v) if isinstance(v, dict) and "data" in v else v
           for k, v in doc["opt"].items()}
    return params, fusion, opt, doc["rng_state"], doc["config_hash"], doc["extra"]
