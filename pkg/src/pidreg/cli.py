"""Command line front end: dataset generation, training, standalone PID
analysis, estimator checks, and scenario benchmarks.

Every command reads an optional flat JSON config, writes its artifacts
under --out, and finishes by writing a manifest that lists them.  Exit
codes: 0 success, 1 runtime failure, 2 usage or configuration error.

Heavy imports stay inside the command handlers so the PIDREG_THREADS cap
can land in the environment before the numerics stack loads.
"""

import argparse
import hashlib
import json
import os
import sys
import time

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

_MODEL_KEYS = ("hidden", "d_latent", "lam_init")

_FAMILY_ALIASES = {"rademacher": "rademacher-u1"}

# which component should dominate in the single-component scenarios
_DOMINANT = {"f": "U1", "g": "U2", "h": "S", "i": "R"}


class ConfigError(ValueError):
    pass


def _apply_thread_cap():
    cap = os.environ.get("PIDREG_THREADS")
    if cap is None or cap == "":
        return
    if not cap.isdigit() or int(cap) < 1:
        raise ConfigError("PIDREG_THREADS must be a positive integer")
    for var in _THREAD_VARS:
        os.environ.setdefault(var, cap)


# ---------------------------------------------------------------------------
# config and manifest plumbing


def _read_config(path):
    """Flat JSON object plus the exact text that was hashed."""
    if path is None:
        return {}, "{}"
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a flat JSON object")
    return doc, text


def _reject_unknown(doc, allowed, context):
    bad = sorted(set(doc) - set(allowed))
    if bad:
        raise ConfigError(f"unknown {context} keys: {', '.join(bad)}")


def _canon_family(name):
    from .synthdata import FAMILIES
    fam = _FAMILY_ALIASES.get(name, name)
    if fam not in FAMILIES:
        raise ConfigError(f"unknown latent family {name!r}")
    return fam


def _parse_scenarios(text):
    from .synthdata import SCENARIO_WEIGHTS
    letters = list(dict.fromkeys(part.strip() for part in text.split(",")
                                 if part.strip()))
    bad = sorted(set(letters) - set(SCENARIO_WEIGHTS))
    if bad:
        raise ConfigError(f"unknown scenarios: {', '.join(bad)}")
    if not letters:
        raise ConfigError("empty scenario list")
    return letters


def _code_version():
    try:
        from importlib.metadata import version
        return version("pidreg")
    except Exception:
        return "unknown"


def _write_json(path, doc):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def _write_manifest(out_dir, command, config_path, config_text, seed, t0):
    """Atomic run record naming every artifact below out_dir."""
    outputs = []
    for root, _, files in os.walk(out_dir):
        for name in files:
            rel = os.path.relpath(os.path.join(root, name), out_dir)
            if rel != "manifest.json":
                outputs.append(rel)
    doc = {
        "command": command,
        "config_path": None if config_path is None
        else os.path.abspath(config_path),
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": seed,
        "code_version": _code_version(),
        "wall_time_s": round(time.time() - t0, 3),
        "outputs": sorted(outputs),
    }
    _write_json(os.path.join(out_dir, "manifest.json"), doc)


def _load_matrix(path):
    """CSV matrix; a first line containing letters is taken as a header."""
    import numpy as np
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    skip = 1 if any(ch.isalpha() for ch in first) else 0
    return np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    from dataclasses import fields

    from .synthdata import SynthConfig, generate, save_dataset, scenario_grid

    t0 = time.time()
    doc, text = _read_config(args.config)
    allowed = {f.name for f in fields(SynthConfig)}
    _reject_unknown(doc, allowed, "synth config")
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.family is not None:
        doc["family"] = _canon_family(args.family)
    os.makedirs(args.out, exist_ok=True)
    seed = doc.get("seed", 0)
    if args.scenarios is not None:
        letters = _parse_scenarios(args.scenarios)
        fixed = [key for key in ("w_u1", "w_u2", "w_s", "w_r",
                                 "synergy", "label") if key in doc]
        if fixed:
            raise ConfigError("scenario selection fixes "
                              f"{', '.join(fixed)}; drop from the config")
        family = doc.pop("family", "gaussian")
        doc.pop("seed", None)
        grid = {cfg.label: cfg
                for cfg in scenario_grid(family=family, seed=seed, **doc)}
        for letter in letters:
            save_dataset(generate(grid[letter]), args.out,
                         stem=f"dataset_{letter}")
    else:
        save_dataset(generate(SynthConfig(**doc)), args.out, stem="dataset")
    _write_manifest(args.out, "synth", args.config, text, seed, t0)
    return 0


# ---------------------------------------------------------------------------
# train


def _split_train_config(doc):
    """Flat keys -> (TrainConfig kwargs, SolverConfig kwargs, model kwargs)."""
    from dataclasses import fields

    from .gaussian_pid import SolverConfig
    from .trainer import TrainConfig

    train_names = {f.name for f in fields(TrainConfig)} - {"solver"}
    solver_names = {f.name for f in fields(SolverConfig)}
    train, solver, model, bad = {}, {}, {}, []
    for key, val in doc.items():
        if key in _MODEL_KEYS:
            model[key] = val
        elif key.startswith("solver_") and key[7:] in solver_names:
            solver[key[7:]] = val
        elif key in train_names:
            train[key] = val
        else:
            bad.append(key)
    if bad:
        raise ConfigError(f"unknown train config keys: {', '.join(sorted(bad))}")
    if "lambdas" in train:
        train["lambdas"] = tuple(train["lambdas"])
    return train, solver, model


def _standardize(data):
    """Feature columns to train-split z-scores; targets pass through
    untouched (the trainer owns the target transform)."""
    _, xs_tr = data["train"]
    mus = [x.mean(axis=0) for x in xs_tr]
    sds = [x.std(axis=0) + 1e-12 for x in xs_tr]
    out = {}
    for name, (y, xs) in data.items():
        out[name] = (y, [(x - mu) / sd
                         for x, mu, sd in zip(xs, mus, sds)])
    return out


def _build_model(model_kw, d_ins):
    from .model import ModelSpec, encoder_spec, predictor_spec
    hidden = int(model_kw.get("hidden", 128))
    d_latent = int(model_kw.get("d_latent", 64))
    extra = {}
    if model_kw.get("lam_init") is not None:
        extra["lam_init"] = float(model_kw["lam_init"])
    return ModelSpec(encoders=tuple(encoder_spec(d, hidden, d_latent)
                                    for d in d_ins),
                     predictor=predictor_spec(d_latent, hidden, 1), **extra)


def _make_train_config(doc, seed_override):
    from .gaussian_pid import SolverConfig
    from .trainer import TrainConfig
    train_kw, solver_kw, model_kw = _split_train_config(doc)
    if seed_override is not None:
        train_kw["seed"] = seed_override
    try:
        cfg = TrainConfig(solver=SolverConfig(**solver_kw), **train_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, model_kw


def _write_pid_long(path, report):
    """Long-format trajectory (epoch, component, value) for plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("epoch,component,value\n")
        for epoch, entry in enumerate(report["pid_trajectory"], start=1):
            if entry is None:
                continue
            for comp, val in entry.items():
                fh.write(f"{epoch},{comp},{repr(float(val))}\n")


def cmd_train(args):
    from .model import load_checkpoint
    from .synthdata import load_dataset, splits
    from .trainer import fit

    t0 = time.time()
    doc, text = _read_config(args.config)
    cfg, model_kw = _make_train_config(doc, args.seed)
    data = _standardize(splits(load_dataset(args.data)))
    spec = _build_model(model_kw, [x.shape[1] for x in data["train"][1]])
    if args.stage2_only:
        if args.resume is None:
            raise ConfigError("--stage2-only needs --resume with a frozen "
                              "checkpoint")
        extra = load_checkpoint(args.resume)[5]
        if not extra or extra.get("freeze_epoch") is None:
            raise ConfigError("--stage2-only needs a checkpoint whose fusion "
                              "weights are frozen")
    os.makedirs(args.out, exist_ok=True)
    _, report = fit(spec, data, cfg, args.out, resume=args.resume)
    _write_pid_long(os.path.join(args.out, "pid_trajectory.csv"), report)
    _write_manifest(args.out, "train", args.config, text, cfg.seed, t0)
    return 0


# ---------------------------------------------------------------------------
# standalone pid on exported latents


def _latent_groups(path, modalities):
    """Column indices for y and the z1_*/z2_*(/z3_*) groups, order checked."""
    with open(path, encoding="utf-8") as fh:
        names = [part.strip() for part in fh.readline().strip().split(",")]
    if not names or names[0] != "y":
        got = names[0] if names and names[0] else "nothing"
        raise ConfigError(f"first column must be y, got {got!r}")
    groups = {}
    for col, name in enumerate(names[1:], start=1):
        prefix, sep, rest = name.partition("_")
        if prefix not in ("z1", "z2", "z3") or not sep or not rest:
            raise ConfigError(f"unrecognized column {name!r}")
        groups.setdefault(prefix, []).append(col)
    expected = ["z1", "z2"] + (["z3"] if "z3" in groups else [])
    missing = sorted(set(expected) - set(groups))
    if missing:
        raise ConfigError(f"missing column groups: {', '.join(missing)}")
    if modalities is not None and modalities != len(groups):
        raise ConfigError(f"file has {len(groups)} modality groups, "
                          f"--modalities asked for {modalities}")
    return names, [groups[key] for key in expected]


def cmd_pid(args):
    from dataclasses import fields

    import numpy as np

    from .gaussian_pid import (SolverConfig, covariance_estimate,
                               fusion_weights, pid_decompose)

    t0 = time.time()
    doc, text = _read_config(args.config)
    solver_names = {f.name for f in fields(SolverConfig)}
    _reject_unknown(doc, {"shrinkage"} | {f"solver_{n}" for n in solver_names},
                    "pid config")
    solver = SolverConfig(**{key[7:]: val for key, val in doc.items()
                             if key.startswith("solver_")})
    names, groups = _latent_groups(args.data, args.modalities)
    table = np.loadtxt(args.data, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] != len(names):
        raise ConfigError("row width does not match the header")
    cols = [c for grp in groups for c in grp]
    f = np.hstack([table[:, :1], table[:, cols]])
    dims = [len(grp) for grp in groups]
    jg = covariance_estimate(f, dims, doc.get("shrinkage"))
    pc = pid_decompose(jg, solver)
    fw = fusion_weights(pc, xi_policy="expected")
    k = len(dims)
    raw_sum = sum(pc.raw[f"u{i + 1}"] for i in range(k)) \
        + pc.raw["r"] + pc.raw["s"]
    doc_out = {
        "rows": int(table.shape[0]),
        "dims": dims,
        "components": {**{f"U{i + 1}": float(pc.u[i]) for i in range(k)},
                       "R": float(pc.r), "S": float(pc.s)},
        "pairwise_mi": [float(v) for v in pc.i_pairwise],
        "total_mi": float(pc.i_total),
        "union_information": float(pc.i_union),
        "weights": [float(w) for w in fw.w],
        "clamped": sorted(pc.clamped),
        "identity_residuals": {
            "unique": [abs(float(pc.raw[f"u{i + 1}"] + pc.raw["r"]
                                 - pc.i_pairwise[i])) for i in range(k)],
            "total": abs(float(raw_sum - pc.i_total)),
        },
        "solver": {"iterations": int(pc.union_result.iterations),
                   "converged": bool(pc.union_result.converged)},
    }
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "pid.json"), doc_out)
    print(json.dumps(doc_out, sort_keys=True, indent=1))
    _write_manifest(args.out, "pid", args.config, text, None, t0)
    return 0


# ---------------------------------------------------------------------------
# estimator checks


def cmd_estimate(args):
    import numpy as np

    from .kernels import (KernelConfig, cmi_cs, cs_divergence_empirical,
                          median_heuristic)
    from .normality import sw_statistic, whiten

    t0 = time.time()
    if args.sigma is None:
        kcfg = KernelConfig()
    else:
        kcfg = KernelConfig(width_rule="fixed", sigma=args.sigma)
    if args.mode == "cs":
        if args.a is None:
            raise ConfigError("cs mode needs --a (and optionally --b)")
        a = _load_matrix(args.a)
        b = _load_matrix(args.b) if args.b is not None else a
        value = cs_divergence_empirical(a, b, kcfg)
        doc = {"mode": "cs", "value": float(value),
               "sigma": float(kcfg.resolve_sigma(np.vstack([a, b]))),
               "rows": [int(a.shape[0]), int(b.shape[0])],
               "dims": int(a.shape[1])}
    elif args.mode == "sw":
        if args.a is None:
            raise ConfigError("sw mode needs --a")
        a = _load_matrix(args.a)
        vec = a.reshape(-1) if a.shape[1] == 1 else whiten(a).reshape(-1)
        res = sw_statistic(vec)
        doc = {"mode": "sw", "w": float(res.w), "loss": float(res.loss),
               "rows": int(a.shape[0]), "dims": int(a.shape[1]),
               "n_eff": int(res.n_eff)}
    else:
        if args.z is None or args.own is None or args.other is None:
            raise ConfigError("cmi mode needs --z, --own and --other")
        z = _load_matrix(args.z)
        own = _load_matrix(args.own)
        other = _load_matrix(args.other)
        value = cmi_cs(z, other, own, kcfg)
        if args.sigma is not None:
            sigmas = {key: float(args.sigma) for key in ("z", "own", "other")}
        else:
            sigmas = {"z": float(median_heuristic(z)),
                      "own": float(median_heuristic(own)),
                      "other": float(median_heuristic(other))}
        doc = {"mode": "cmi", "value": float(value), "sigmas": sigmas,
               "rows": int(z.shape[0])}
    print(json.dumps(doc, sort_keys=True, indent=1))
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "estimate.json"), doc)
        _write_manifest(args.out, "estimate", None, "{}", None, t0)
    return 0


# ---------------------------------------------------------------------------
# scenario benchmark


_BENCH_SYNTH_KEYS = ("n", "d1", "d2", "h1", "alpha",
                     "sigma1", "sigma2", "sigma_eps")

_RESULT_COLS = ("scenario", "seed", "family", "status", "frozen",
                "freeze_epoch", "U1", "U2", "R", "S", "w1", "w2", "w3",
                "lam1", "lam2", "test_mse", "test_corr", "test_r2")


def _bench_row(letter, seed, family, report):
    from types import SimpleNamespace

    from .gaussian_pid import fusion_weights

    frozen = report["freeze_epoch"] is not None
    if frozen:
        pid = report["pid_freeze"]
        w = report["fusion_weights"]
    else:
        # short runs stop before the freeze; fall back to the last live
        # epoch average and the weights it would have frozen to
        pid = next((entry for entry in reversed(report["pid_trajectory"])
                    if entry is not None), None)
        w = None
    if pid is None:
        pid = {key: float("nan") for key in ("U1", "U2", "R", "S")}
    if w is None:
        pc = SimpleNamespace(u=(pid["U1"], pid["U2"]),
                             r=pid["R"], s=pid["S"])
        w = list(fusion_weights(pc, "expected").w)
    lams = report["lambda_final"]
    mse = report["test"]["mse"]
    return {"scenario": letter, "seed": seed, "family": family,
            "status": "ok", "frozen": frozen,
            "freeze_epoch": report["freeze_epoch"],
            "U1": pid["U1"], "U2": pid["U2"], "R": pid["R"], "S": pid["S"],
            "w1": w[0], "w2": w[1], "w3": w[2],
            "lam1": lams[0], "lam2": lams[1],
            "test_mse": mse, "test_corr": report["test"]["corr"],
            "test_r2": 1.0 - mse}


def _bench_failure(letter, seed, family, exc):
    row = {col: float("nan") for col in _RESULT_COLS}
    row.update({"scenario": letter, "seed": seed, "family": family,
                "status": f"failed: {exc}", "frozen": False,
                "freeze_epoch": None})
    return row


def _bench_summary(rows, letters, seeds):
    """Trend flags over the completed rows, per the synthetic protocol."""
    from .synthdata import SCENARIO_WEIGHTS
    ok = {(r["scenario"], r["seed"]): r for r in rows if r["status"] == "ok"}

    def values(letter, comp):
        return [ok[(letter, s)][comp] for s in seeds if (letter, s) in ok]

    flags = {}
    u1_zero = [l for l in letters if SCENARIO_WEIGHTS[l][0] == 0.0]
    u2_zero = [l for l in letters if SCENARIO_WEIGHTS[l][1] == 0.0]
    if u1_zero:
        vals = [v for l in u1_zero for v in values(l, "U1")]
        flags["U1_near_zero"] = bool(vals) and all(v < 0.05 for v in vals)
    if u2_zero:
        vals = [v for l in u2_zero for v in values(l, "U2")]
        flags["U2_near_zero"] = bool(vals) and all(v < 0.05 for v in vals)
    if {"a", "b", "c"} <= set(letters):
        mono = []
        for s in seeds:
            if any((l, s) not in ok for l in "abc"):
                continue
            s_vals = [ok[(l, s)]["S"] for l in "abc"]
            r_vals = [ok[(l, s)]["R"] for l in "abc"]
            mono.append(s_vals[0] > s_vals[1] > s_vals[2]
                        and r_vals[0] < r_vals[1] < r_vals[2])
        flags["S_over_R_monotone"] = bool(mono) and all(mono)
    dominant = {}
    for letter, comp in _DOMINANT.items():
        if letter not in letters:
            continue
        hits = []
        for s in seeds:
            row = ok.get((letter, s))
            if row is None:
                continue
            comps = {c: row[c] for c in ("U1", "U2", "R", "S")}
            hits.append(max(comps, key=comps.get) == comp)
        dominant[letter] = bool(hits) and sum(hits) * 2 > len(hits)
    if dominant:
        flags["dominant_component"] = dominant
    return flags


def cmd_bench(args):
    import numpy as np

    from .synthdata import SCENARIO_WEIGHTS, SynthConfig, generate, splits
    from .trainer import fit

    t0 = time.time()
    doc, text = _read_config(args.config)
    seeds = doc.pop("seeds", [0, 1, 2])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) for s in seeds)):
        raise ConfigError("seeds must be a non-empty list of integers")
    if args.seed is not None:
        seeds = [args.seed]
    synth_kw = {key: doc.pop(key) for key in _BENCH_SYNTH_KEYS if key in doc}
    reserved = [key for key in ("seed", "family", "label", "synergy",
                                "w_r", "w_u1", "w_u2", "w_s") if key in doc]
    if reserved:
        raise ConfigError("bench fixes "
                          f"{', '.join(reserved)}; drop from the config")
    family = _canon_family(args.family) if args.family else "gaussian"
    synergy = "sign-flip" if family == "rademacher-u1" else "product"
    letters = _parse_scenarios(args.scenarios) if args.scenarios \
        else list(SCENARIO_WEIGHTS)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for letter in letters:
        w_u1, w_u2, w_s, w_r = SCENARIO_WEIGHTS[letter]
        for seed in seeds:
            scfg = SynthConfig(w_u1=w_u1, w_u2=w_u2, w_s=w_s, w_r=w_r,
                               family=family, synergy=synergy, seed=seed,
                               label=letter, **synth_kw)
            run_dir = os.path.join(args.out, "runs", f"{letter}_{seed}")
            try:
                cfg, model_kw = _make_train_config(dict(doc), seed)
                data = _standardize(splits(generate(scfg)))
                spec = _build_model(model_kw,
                                    [x.shape[1] for x in data["train"][1]])
                _, report = fit(spec, data, cfg, run_dir)
                _write_pid_long(os.path.join(run_dir, "pid_trajectory.csv"),
                                report)
                rows.append(_bench_row(letter, seed, family, report))
            except (RuntimeError, ValueError, ArithmeticError,
                    np.linalg.LinAlgError) as exc:
                rows.append(_bench_failure(letter, seed, family, exc))
    results_path = os.path.join(args.out, "results.csv")
    with open(results_path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(_RESULT_COLS) + "\n")
        for row in rows:
            cells = []
            for col in _RESULT_COLS:
                val = row[col]
                if isinstance(val, float):
                    cells.append(repr(val))
                else:
                    cells.append("" if val is None else str(val))
            fh.write(",".join(cells) + "\n")
    summary = {"family": family, "scenarios": letters, "seeds": seeds,
               "rows": len(rows),
               "failed": sum(r["status"] != "ok" for r in rows),
               "flags": _bench_summary(rows, letters, seeds)}
    _write_json(os.path.join(args.out, "summary.json"), summary)
    print(json.dumps(summary, sort_keys=True, indent=1))
    _write_manifest(args.out, "bench", args.config, text, None, t0)
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pidreg",
        description="Gaussian partial information decomposition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic benchmark datasets")
    p.add_argument("--config", help="flat JSON generator config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--family",
                   help="gaussian | chi2 | rademacher | mixture")
    p.add_argument("--scenarios",
                   help="comma-separated letters a..i; one dataset each")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="two-stage training on a dataset")
    p.add_argument("--config", help="flat JSON training config")
    p.add_argument("--data", required=True, help="dataset CSV from synth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stage2-only", action="store_true",
                   help="require the resumed checkpoint to be frozen")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pid", help="decompose exported [y, z1_*, z2_*] columns")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="shrinkage / solver_* overrides")
    p.add_argument("--modalities", type=int, choices=(2, 3))
    p.set_defaults(func=cmd_pid)

    p = sub.add_parser("estimate", help="standalone estimator checks")
    p.add_argument("mode", choices=("cs", "cmi", "sw"))
    p.add_argument("--a", help="sample file (cs, sw)")
    p.add_argument("--b", help="second sample file (cs); defaults to --a")
    p.add_argument("--z", help="latent sample file (cmi)")
    p.add_argument("--own", help="own-modality file (cmi)")
    p.add_argument("--other", help="other-modality file (cmi)")
    p.add_argument("--sigma", type=float, help="fixed kernel width")
    p.add_argument("--out", help="optional artifact directory")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="train over the scenario grid")
    p.add_argument("--config", help="flat JSON train config plus "
                                    "generator sizes and a seeds list")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="replace the seeds list")
    p.add_argument("--scenarios", help="comma-separated letters; default all")
    p.add_argument("--family",
                   help="gaussian | chi2 | rademacher | mixture")
    p.set_defaults(func=cmd_bench)
    return parser


def _exit_code(exc):
    import numpy as np
    if isinstance(exc, np.linalg.LinAlgError):
        return 1
    if isinstance(exc, (ConfigError, ValueError, KeyError, TypeError,
                        FileNotFoundError, IsADirectoryError,
                        NotADirectoryError)):
        return 2
    if isinstance(exc, (RuntimeError, ArithmeticError, OSError)):
        return 1
    return None


def main(argv=None):
    try:
        _apply_thread_cap()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
