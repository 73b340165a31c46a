"""Two-stage training loop with per-batch decomposition-driven fusion.

Stage I runs the full objective and re-estimates the decomposition on every
batch; once the epoch-averaged components are stable the fusion weights are
frozen and stage II trains the predictor on the prediction loss alone while
the encoders follow the weighted regularizer gradients.
"""

import csv
import json
import math
import os
import shutil
from dataclasses import asdict, dataclass, field
from types import SimpleNamespace

import numpy as np

from .autodiff import Tape
from .gaussian_pid import (FusionWeights, SolverConfig, covariance_estimate,
                           fusion_weights, pid_decompose)
from .kernels import KernelConfig, cmi_loss_node, cs_marginal_loss_node
from .model import (FusionState, config_hash, eval_latents, fuse, init_params,
                    latents, lift_params, load_checkpoint, loss_terms, predict,
                    save_checkpoint)
from .normality import gauss_loss, inverse_normal_transform

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lambdas: tuple = (0.1, 0.1, 0.1)
    batch_size: int = 256
    lr: float = 1e-3
    lam_lr: float = 0.1
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_lr: float = 1e-6
    early_stop_patience: int = 30
    clip_norm: float = 1.0
    pid_eps: float = 0.01
    pid_k: int = 5
    shrinkage: float = None
    seed: int = 0
    max_epochs: int = 200
    xi_policy: str = "sampled"
    stage2_joint: bool = False
    eval_kernel_rows: int = 2000
    kernel: KernelConfig = KernelConfig()
    solver: SolverConfig = SolverConfig()

    def __post_init__(self):
        if len(self.lambdas) != 3 or any(l < 0 for l in self.lambdas):
            raise ValueError("three nonnegative regularizer weights expected")
        for name in ("batch_size", "lr", "lam_lr", "plateau_factor",
                     "plateau_patience", "min_lr", "early_stop_patience",
                     "clip_norm", "pid_eps", "max_epochs", "eval_kernel_rows"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pid_k < 1:
            raise ValueError("stability window must cover at least one pair")
        if self.xi_policy not in ("sampled", "expected"):
            raise ValueError(f"unknown xi policy {self.xi_policy!r}")

    def echo(self):
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d


@dataclass
class RunState:
    stage: int = 1
    epoch: int = 0
    lr: float = 1e-3
    pid_history: list = field(default_factory=list)
    stable_run: int = 0
    fusion: FusionState = None
    freeze_epoch: int = None
    freeze_pid: np.ndarray = None
    union_init: np.ndarray = None
    best_val_total: float = math.inf
    best_val_pred: float = math.inf
    best_epoch: int = None
    plateau_count: int = 0
    since_best: int = 0
    bad_epochs: int = 0
    skipped_batches: int = 0
    nonfinite_batches: int = 0
    skipped_steps: int = 0
    clamp_events: int = 0
    last_batch_pids: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# optimizer


def adam_init(names, params):
    state = {"t": 0}
    for name in names:
        state["m/" + name] = np.zeros_like(params[name])
        state["v/" + name] = np.zeros_like(params[name])
    return state


def adam_step(params, grads, moments, lr):
    """Bias-corrected Adam update in place; a non-finite gradient anywhere
    in the group skips the whole step and returns the offending names."""
    bad = sorted(n for n, g in grads.items() if not np.all(np.isfinite(g)))
    if bad:
        return bad
    if not grads:
        return []
    moments["t"] += 1
    t = moments["t"]
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, g in grads.items():
        m = moments["m/" + name]
        v = moments["v/" + name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return []


def clip_gradients(grads, max_norm):
    """Scale the whole gradient dict so its global l2 norm is <= max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm > 0.0:
        scale = max_norm / total
        grads = {n: g * scale for n, g in grads.items()}
    return grads, total


def pid_convergence_check(history, eps=0.01, k=5):
    """True when the last k epoch-to-epoch gaps all stay below eps in sup norm."""
    if len(history) < k + 1:
        return False
    tail = history[-(k + 1):]
    return all(float(np.max(np.abs(tail[i + 1] - tail[i]))) < eps
               for i in range(k))


# ---------------------------------------------------------------------------
# target transform


@dataclass
class TargetTransform:
    """Monotone map between raw targets and their normal scores.

    Fitted on the training split; both directions are piecewise-linear
    interpolations so the inverse is available for raw-scale metrics.
    """

    raw: np.ndarray
    z: np.ndarray

    @classmethod
    def fit(cls, y):
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        scores = inverse_normal_transform(y)
        raw, inverse = np.unique(y, return_inverse=True)
        z = np.zeros(raw.size)
        np.add.at(z, inverse, scores)
        z /= np.bincount(inverse)
        return cls(raw=raw, z=z)

    def forward(self, y):
        return np.interp(np.asarray(y, dtype=np.float64), self.raw, self.z)

    def invert(self, z):
        return np.interp(np.asarray(z, dtype=np.float64), self.z, self.raw)


# ---------------------------------------------------------------------------
# epoch drivers


def _split_groups(grads):
    net = {n: g for n, g in grads.items() if not n.startswith("bneck")}
    lam = {n: g for n, g in grads.items() if n.startswith("bneck")}
    return net, lam


def _grad_dict(grads, leaves, names):
    return {n: grads.wrt(leaves[n]) for n in names}


def _pid_for_batch(yb, zvals, cfg, state):
    f = np.hstack([yb] + zvals)
    dims = tuple(z.shape[1] for z in zvals)
    jg = covariance_estimate(f, dims, cfg.shrinkage)
    return pid_decompose(jg, cfg.solver, init=state.union_init)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    bs = min(batch_size, n)
    count = max(n // bs, 1)
    return [order[i * bs:(i + 1) * bs] for i in range(count)]


def stage1_epoch(params, spec, y_z, xs, cfg, state, opt_net, opt_lam, rng):
    batches = _batches(y_z.shape[0], cfg.batch_size, rng)
    pid_vecs = []
    w_sum = None
    loss_sum = 0.0
    counted = 0
    skipped = 0
    nonfinite = 0
    for idx in batches:
        yb = y_z[idx]
        xb = [x[idx] for x in xs]
        tape = Tape()
        leaves = lift_params(tape, params)
        try:
            zs, _ = latents(tape, leaves, spec, xb, rng, train=True)
        except ArithmeticError:
            nonfinite += 1
            continue
        zvals = [z.value for z in zs]
        try:
            pc = _pid_for_batch(yb, zvals, cfg, state)
            fw = fusion_weights(pc, cfg.xi_policy, rng)
        except (ValueError, np.linalg.LinAlgError):
            skipped += 1
            continue
        state.union_init = pc.union_result.sigma_q
        fs = FusionState(weights=fw, frozen=False, source=state.epoch)
        try:
            total, _, _ = loss_terms(tape, leaves, spec, yb, xb, zs, fs,
                                     rng, True, cfg.lambdas, cfg.kernel)
        except ArithmeticError:
            nonfinite += 1
            continue
        grads = tape.backward(total)
        gdict = _grad_dict(grads, leaves, list(leaves))
        gdict, _ = clip_gradients(gdict, cfg.clip_norm)
        g_net, g_lam = _split_groups(gdict)
        state.skipped_steps += bool(adam_step(params, g_net, opt_net, state.lr))
        state.skipped_steps += bool(adam_step(params, g_lam, opt_lam, cfg.lam_lr))
        pid_vecs.append(pc.as_vector())
        state.clamp_events += len(pc.clamped)
        wv = np.asarray(fw.w)
        w_sum = wv if w_sum is None else w_sum + wv
        loss_sum += float(total.value[0, 0])
        counted += 1
    state.skipped_batches += skipped
    state.nonfinite_batches += nonfinite
    if skipped > 0.1 * len(batches):
        raise RuntimeError(
            f"covariance or decomposition failed on "
            f"{skipped}/{len(batches)} batches")
    if counted == 0:
        return {"counted": 0, "loss": float("nan"), "pid": None, "w": None}
    g = np.mean(pid_vecs, axis=0)
    state.pid_history.append(g)
    state.last_batch_pids = pid_vecs
    gaps_ok = (len(state.pid_history) >= 2 and
               float(np.max(np.abs(state.pid_history[-1]
                                   - state.pid_history[-2]))) < cfg.pid_eps)
    state.stable_run = state.stable_run + 1 if gaps_ok else 0
    return {"counted": counted, "loss": loss_sum / counted, "pid": g,
            "w": w_sum / counted}


def _freeze_from_history(state, k_mod):
    g = state.pid_history[-1]
    pc = SimpleNamespace(u=tuple(g[:k_mod]), r=float(g[k_mod]),
                         s=float(g[k_mod + 1]))
    # the frozen weights use the even redundancy split; per-batch coin flips
    # only matter while the weights are still being re-derived each step
    fw = fusion_weights(pc, "expected")
    state.fusion = FusionState(weights=fw, frozen=True, source=state.epoch)
    state.freeze_epoch = state.epoch
    state.freeze_pid = g.copy()
    state.stage = 2


def stage2_epoch(params, spec, y_z, xs, cfg, state, opt_net, opt_lam, rng):
    if state.fusion is None or not state.fusion.frozen:
        raise RuntimeError("stage II needs frozen fusion weights")
    batches = _batches(y_z.shape[0], cfg.batch_size, rng)
    loss_sum = 0.0
    counted = 0
    nonfinite = 0
    pred_names = [n for n in params if n.startswith("pred")]
    enc_names = [n for n in params if n.startswith("enc")]
    for idx in batches:
        yb = y_z[idx]
        xb = [x[idx] for x in xs]
        tape = Tape()
        leaves = lift_params(tape, params)
        try:
            zs, _ = latents(tape, leaves, spec, xb, rng, train=True)
            total, _, nodes = loss_terms(tape, leaves, spec, yb, xb, zs,
                                         state.fusion, rng, True,
                                         cfg.lambdas, cfg.kernel)
        except ArithmeticError:
            nonfinite += 1
            continue
        if cfg.stage2_joint:
            grads = tape.backward(total)
            gdict = _grad_dict(grads, leaves, list(leaves))
            gdict, _ = clip_gradients(gdict, cfg.clip_norm)
            g_net, g_lam = _split_groups(gdict)
            state.skipped_steps += bool(adam_step(params, g_net, opt_net,
                                                  state.lr))
            state.skipped_steps += bool(adam_step(params, g_lam, opt_lam,
                                                  cfg.lam_lr))
        else:
            # the prediction loss moves only the predictor; the weighted
            # regularizers move only the encoders; lambda' stays frozen
            gdict = _grad_dict(tape.backward(nodes["pred"]), leaves, pred_names)
            if nodes["reg"] is not None:
                gdict.update(_grad_dict(tape.backward(nodes["reg"]), leaves,
                                        enc_names))
            gdict, _ = clip_gradients(gdict, cfg.clip_norm)
            state.skipped_steps += bool(adam_step(params, gdict, opt_net,
                                                  state.lr))
        loss_sum += float(total.value[0, 0])
        counted += 1
    state.nonfinite_batches += nonfinite
    if counted == 0:
        return {"counted": 0, "loss": float("nan"), "pid": None, "w": None}
    return {"counted": counted, "loss": loss_sum / counted,
            "pid": state.pid_history[-1] if state.pid_history else None,
            "w": np.asarray(state.fusion.weights.w)}


# ---------------------------------------------------------------------------
# evaluation


def evaluate(params, spec, y_raw, xs, cfg, transform, fusion,
             compute_pid=False):
    """Deterministic eval-mode metrics for one split.

    Prediction error and correlation are reported on the raw target scale;
    the kernel losses run on a seeded row subsample so cost stays bounded.
    """
    y_raw = np.asarray(y_raw, dtype=np.float64).reshape(-1)
    y_z = transform.forward(y_raw).reshape(-1, 1)
    tape = Tape()
    leaves = {name: tape.constant(v) for name, v in params.items()}
    zs = eval_latents(tape, leaves, spec, xs)
    yhat = predict(tape, leaves, spec, fuse(tape, zs, fusion))
    pred_z = float(np.mean((yhat.value - y_z) ** 2))
    yhat_raw = transform.invert(yhat.value.reshape(-1))
    mse = float(np.mean((yhat_raw - y_raw) ** 2))
    a = yhat_raw - yhat_raw.mean()
    b = y_raw - y_raw.mean()
    den = float(np.linalg.norm(a) * np.linalg.norm(b))
    corr = float(a @ b / den) if den > 0.0 else float("nan")
    zvals = [z.value for z in zs]
    rng = np.random.default_rng(cfg.seed + 9173)
    n = y_z.shape[0]
    rows = min(n, cfg.eval_kernel_rows)
    idx = np.sort(rng.choice(n, size=rows, replace=False))
    lam1, lam2, lam3 = cfg.lambdas
    l_cs = l_cmi = l_gauss = float("nan")
    if lam1 != 0.0:
        t2 = Tape()
        l_cs = float(cs_marginal_loss_node(
            t2, [t2.constant(z[idx]) for z in zvals], rng,
            cfg.kernel).value[0, 0])
    if lam2 != 0.0:
        t3 = Tape()
        l_cmi = float(cmi_loss_node(
            t3, [t3.constant(z[idx]) for z in zvals],
            [np.asarray(x, dtype=np.float64)[idx] for x in xs],
            cfg.kernel).value[0, 0])
    if lam3 != 0.0:
        l_gauss = float(gauss_loss(y_z, *zvals, rng=rng))
    total = pred_z
    for lam, term in zip(cfg.lambdas, (l_cs, l_cmi, l_gauss)):
        if lam != 0.0:
            total += lam * term
    out = {"mse": mse, "corr": corr, "pred": pred_z, "total": total,
           "cs": l_cs, "cmi": l_cmi, "gauss": l_gauss}
    if compute_pid:
        f = np.hstack([y_z] + zvals)
        dims = tuple(z.shape[1] for z in zvals)
        jg = covariance_estimate(f, dims, cfg.shrinkage)
        pc = pid_decompose(jg, cfg.solver)
        out["pid"] = pc
    return out


# ---------------------------------------------------------------------------
# fit


def _safe_evaluate(params, spec, y_raw, xs, cfg, transform, fusion):
    # parameters can go non-finite mid-run; eval then reports nan metrics
    # instead of tearing the whole fit down before the abort rule can act
    try:
        return evaluate(params, spec, y_raw, xs, cfg, transform, fusion)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError):
        nan = float("nan")
        return {"mse": nan, "corr": nan, "pred": nan, "total": nan,
                "cs": nan, "cmi": nan, "gauss": nan}


def _csv_header(k):
    cols = ["epoch", "split", "mse", "corr", "L_CS", "L_CMI", "L_Gauss"]
    cols += [f"U{i + 1}" for i in range(k)] + ["R", "S"]
    cols += [f"w{i + 1}" for i in range(k + 1)]
    cols += [f"lam{i + 1}_b" for i in range(k)] + ["lr"]
    return cols


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _lambda_values(params, k):
    return [_sigmoid(float(params[f"bneck{m}/lam"][0, 0])) for m in range(k)]


def _csv_row(epoch, split, ev, pid_vec, w_vec, lams, lr, k):
    pid = list(pid_vec) if pid_vec is not None else [float("nan")] * (k + 2)
    w = list(w_vec) if w_vec is not None else [float("nan")] * (k + 1)
    return ([epoch, split, ev["mse"], ev["corr"], ev["cs"], ev["cmi"],
             ev["gauss"]] + pid + w + lams + [lr])


def _flatten_opt(opt_net, opt_lam):
    flat = {}
    for prefix, opt in (("net", opt_net), ("lam", opt_lam)):
        for key, val in opt.items():
            flat[f"{prefix}/{key}"] = val
    return flat


def _unflatten_opt(flat):
    opt_net, opt_lam = {}, {}
    for key, val in flat.items():
        prefix, rest = key.split("/", 1)
        (opt_net if prefix == "net" else opt_lam)[rest] = val
    return opt_net, opt_lam


def _validate_dataset(dataset, spec):
    for split in ("train", "val", "test"):
        if split not in dataset:
            raise ValueError(f"dataset is missing the {split!r} split")
        y, xs = dataset[split]
        if np.asarray(y).shape[0] == 0:
            raise ValueError(f"{split} split is empty")
        if len(xs) != spec.k:
            raise ValueError("one input block per modality expected")


def _eval_fusion(state, summary, k):
    if state.fusion is not None:
        return state.fusion
    if summary["w"] is not None:
        return FusionState(weights=FusionWeights(w=tuple(summary["w"]),
                                                 xi_policy="mean"),
                           frozen=False, source=state.epoch)
    w = (1.0 / (k + 1),) * (k + 1)
    return FusionState(weights=FusionWeights(w=w, xi_policy="uniform"),
                       frozen=False, source=state.epoch)


def _pid_dict(vec, k):
    if vec is None:
        return None
    d = {f"U{i + 1}": float(vec[i]) for i in range(k)}
    d["R"] = float(vec[k])
    d["S"] = float(vec[k + 1])
    return d


def fit(spec, dataset, cfg, out_dir, resume=None):
    """Run both stages and write metrics.csv, report.json, best.ckpt.json.

    Returns (best parameters, report dict).  Everything that lands on disk
    is a pure function of the spec, the dataset, and the config.  resume
    names a checkpoint to continue from (parameters, optimizer moments,
    generator state, stage and epoch counter all restored).
    """
    _validate_dataset(dataset, spec)
    os.makedirs(out_dir, exist_ok=True)
    k = spec.k
    rng = np.random.default_rng(cfg.seed)
    params = init_params(spec, rng)
    y_tr_raw, xs_tr = dataset["train"]
    y_tr_raw = np.asarray(y_tr_raw, dtype=np.float64).reshape(-1)
    xs_tr = [np.asarray(x, dtype=np.float64) for x in xs_tr]
    transform = TargetTransform.fit(y_tr_raw)
    y_tr_z = transform.forward(y_tr_raw).reshape(-1, 1)
    net_names = [n for n in params if not n.startswith("bneck")]
    lam_names = [n for n in params if n.startswith("bneck")]
    opt_net = adam_init(net_names, params)
    opt_lam = adam_init(lam_names, params)
    state = RunState(lr=cfg.lr)
    echo = {"model": {"encoders": [list(e.widths) for e in spec.encoders],
                      "predictor": list(spec.predictor.widths),
                      "lam_init": spec.lam_init},
            "train": cfg.echo()}
    c_hash = config_hash(echo)
    start_epoch = 1
    if resume is not None:
        loaded, fusion_ck, opt_flat, rng_state, _, extra = \
            load_checkpoint(resume)
        if set(loaded) != set(params):
            raise ValueError("checkpoint parameters do not match the model")
        params.update(loaded)
        opt_net, opt_lam = _unflatten_opt(opt_flat)
        rng.bit_generator.state = rng_state
        state.stage = extra.get("stage", 1)
        state.lr = extra.get("lr", cfg.lr)
        state.freeze_epoch = extra.get("freeze_epoch")
        # checkpoints carry the eval-time fusion snapshot; only a frozen
        # one is state, the rest is recomputed from each epoch's batches
        if fusion_ck is not None and fusion_ck.frozen:
            state.fusion = fusion_ck
        if extra.get("freeze_pid") is not None:
            state.freeze_pid = np.asarray(extra["freeze_pid"])
        for vec in extra.get("pid_tail") or []:
            state.pid_history.append(np.asarray(vec))
        if extra.get("union_init") is not None:
            state.union_init = np.asarray(extra["union_init"])
        state.best_val_pred = float(extra.get("best_val_pred", math.inf))
        state.plateau_count = int(extra.get("plateau_count", 0))
        state.best_val_total = float(extra.get("best_val_total", math.inf))
        state.since_best = int(extra.get("since_best", 0))
        state.bad_epochs = int(extra.get("bad_epochs", 0))
        state.best_epoch = extra.get("epoch")
        start_epoch = extra.get("epoch", 0) + 1
        if start_epoch > cfg.max_epochs:
            raise ValueError("checkpoint epoch is already past max_epochs")
    best_path = os.path.join(out_dir, "best.ckpt.json")
    if resume is not None and os.path.abspath(resume) != \
            os.path.abspath(best_path):
        # the resumed checkpoint is the best seen so far; keep it loadable
        # even when no later epoch improves on it
        shutil.copyfile(resume, best_path)
    rows = []
    pid_trajectory = []
    lam_trajectory = []
    val_trajectory = []
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        state.epoch = epoch
        driver = stage1_epoch if state.stage == 1 else stage2_epoch
        summary = driver(params, spec, y_tr_z, xs_tr, cfg, state,
                         opt_net, opt_lam, rng)
        if state.stage == 1 and pid_convergence_check(
                state.pid_history, cfg.pid_eps, cfg.pid_k):
            _freeze_from_history(state, k)
        bad = (summary["counted"] == 0
               or not math.isfinite(summary["loss"]))
        state.bad_epochs = state.bad_epochs + 1 if bad else 0
        if state.bad_epochs >= 3:
            raise RuntimeError(
                f"training loss non-finite for {state.bad_epochs} "
                f"consecutive epochs (epoch {epoch})")
        fusion_now = _eval_fusion(state, summary, k)
        lams = _lambda_values(params, k)
        tr_ev = _safe_evaluate(params, spec, y_tr_raw, xs_tr, cfg, transform,
                               fusion_now)
        va_ev = _safe_evaluate(params, spec, dataset["val"][0],
                               [np.asarray(x, dtype=np.float64)
                                for x in dataset["val"][1]],
                               cfg, transform, fusion_now)
        w_now = np.asarray(fusion_now.weights.w)
        rows.append(_csv_row(epoch, "train", tr_ev, summary["pid"], w_now,
                             lams, state.lr, k))
        rows.append(_csv_row(epoch, "val", va_ev, summary["pid"], w_now,
                             lams, state.lr, k))
        pid_trajectory.append(_pid_dict(summary["pid"], k))
        lam_trajectory.append(lams)
        val_trajectory.append(float(va_ev["total"]))
        # plateau scheduler watches the validation prediction loss and only
        # ever touches the network optimizer's learning rate
        if va_ev["pred"] < state.best_val_pred:
            state.best_val_pred = va_ev["pred"]
            state.plateau_count = 0
        else:
            state.plateau_count += 1
            if state.plateau_count > cfg.plateau_patience:
                state.lr = max(state.lr * cfg.plateau_factor, cfg.min_lr)
                state.plateau_count = 0
        if va_ev["total"] < state.best_val_total:
            state.best_val_total = va_ev["total"]
            state.best_epoch = epoch
            state.since_best = 0
            save_checkpoint(best_path, params, fusion_now,
                            _flatten_opt(opt_net, opt_lam),
                            rng.bit_generator.state, c_hash,
                            extra={"epoch": epoch, "lr": state.lr,
                                   "stage": state.stage,
                                   "freeze_epoch": state.freeze_epoch,
                                   "freeze_pid":
                                       None if state.freeze_pid is None
                                       else [float(v) for v in
                                             state.freeze_pid],
                                   "pid_tail":
                                       [[float(v) for v in vec] for vec in
                                        state.pid_history[-(cfg.pid_k + 1):]],
                                   "union_init":
                                       None if state.union_init is None
                                       else [[float(v) for v in row] for row
                                             in state.union_init],
                                   "best_val_pred": state.best_val_pred,
                                   "plateau_count": state.plateau_count,
                                   "best_val_total": state.best_val_total,
                                   "since_best": state.since_best,
                                   "bad_epochs": state.bad_epochs})
        else:
            state.since_best += 1
            if state.since_best >= cfg.early_stop_patience:
                break
    if state.best_epoch is None:
        raise RuntimeError("no epoch produced a finite validation loss")
    params_best, fusion_best, _, _, _, extra = load_checkpoint(best_path)
    test_ev = evaluate(params_best, spec, dataset["test"][0],
                       [np.asarray(x, dtype=np.float64)
                        for x in dataset["test"][1]],
                       cfg, transform, fusion_best, compute_pid=True)
    lams_best = _lambda_values(params_best, k)
    pid_test = test_ev.pop("pid")
    rows.append(_csv_row(state.best_epoch, "test", test_ev,
                         pid_test.as_vector(),
                         np.asarray(fusion_best.weights.w), lams_best,
                         extra["lr"], k))
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_csv_header(k))
        writer.writerows(rows)
    report = {
        "config": echo,
        "config_hash": c_hash,
        "seed": cfg.seed,
        "metrics_csv": "metrics.csv",
        "checkpoint": "best.ckpt.json",
        "status": "ok",
        "epochs_run": state.epoch,
        "freeze_epoch": state.freeze_epoch,
        "fusion_weights": (list(state.fusion.weights.w)
                           if state.fusion is not None else None),
        "pid_freeze": _pid_dict(state.freeze_pid, k),
        "pid_test": ({**_pid_dict(pid_test.as_vector(), k),
                      "clamped": sorted(pid_test.clamped)}),
        "pid_trajectory": pid_trajectory,
        "lambda_trajectory": lam_trajectory,
        "lambda_final": lams_best,
        "best_epoch": state.best_epoch,
        "best_val_total": state.best_val_total,
        "val_trajectory": val_trajectory,
        "test": {key: test_ev[key] for key in
                 ("mse", "corr", "pred", "total", "cs", "cmi", "gauss")},
        "skipped_batches": state.skipped_batches,
        "nonfinite_batches": state.nonfinite_batches,
        "skipped_steps": state.skipped_steps,
        "clamp_events": state.clamp_events,
    }
    with open(os.path.join(out_dir, "report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    return params_best, report
