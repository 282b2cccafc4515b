"""Command-line front end: dataset generation, training, evaluation.

Usage: koopman gen|train|eval --config FILE [--seed N] [--out DIR] plus
eval --mode predict|track|bias-mc|compare.  Every command is deterministic
given the config and seeds; timing columns (solve_ms, train/solve sidecars)
are the only outputs outside that guarantee.

Exit codes: 0 success, 2 configuration/schema error, 3 numeric failure
(rank deficiency, singularity, missing principal root, non-finite
gradient), 4 divergence while simulating, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_DIVERGED = 4


class ConfigError(Exception):
    """Configuration file is missing, malformed or inconsistent."""


_NUMBER = {"type": "number"}
_NULL_OR_NUMBER = {"type": ["number", "null"]}
_NUMBER_LIST = {"type": "array", "items": _NUMBER, "minItems": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "system", "dataset", "seed"],
    "properties": {
        "schema_version": {"const": 1},
        "seed": {"type": "integer"},
        "out_dir": {"type": "string"},
        "system": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["vdp", "arm", "linear"]},
                "mu": _NUMBER,
                "links": {"type": "integer", "minimum": 1},
                "mass": _NUMBER,
                "length": _NUMBER,
                "inertia": _NUMBER,
                "gravity": _NUMBER,
                "a": {"type": "array", "items": _NUMBER_LIST},
                "b": {"type": "array", "items": _NUMBER_LIST},
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_traj", "n_snap", "dt"],
            "properties": {
                "n_traj": {"type": "integer", "minimum": 3},
                "n_snap": {"type": "integer", "minimum": 3},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "snr_db": _NULL_OR_NUMBER,
                "corrupt_inputs": {"type": "boolean"},
                "x0_low": _NUMBER_LIST,
                "x0_high": _NUMBER_LIST,
                "u_low": _NUMBER_LIST,
                "u_high": _NUMBER_LIST,
            },
        },
        "encoder": {
            "type": "object",
            "additionalProperties": False,
            "required": ["hidden", "output"],
            "properties": {
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "output": {"type": "integer", "minimum": 1},
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha1": _NUMBER, "alpha2": _NUMBER, "alpha3": _NUMBER,
                "gamma1": _NUMBER, "gamma2": _NUMBER,
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "lr_decay": {"type": "number", "exclusiveMinimum": 0},
                "lr_decay_every": {"type": "integer", "minimum": 1},
                "clip_norm": _NULL_OR_NUMBER,
            },
        },
        "mpc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "horizon": {"type": "integer", "minimum": 1},
                "q_x": _NUMBER_LIST,
                "r_u": _NUMBER_LIST,
                "u_min": _NUMBER_LIST,
                "u_max": _NUMBER_LIST,
                "x_min": {"oneOf": [_NUMBER_LIST, {"type": "null"}]},
                "x_max": {"oneOf": [_NUMBER_LIST, {"type": "null"}]},
                "rho": _NUMBER,
                "feedback_snr_db": _NULL_OR_NUMBER,
                "duration": {"type": "number", "exclusiveMinimum": 0},
                "reference": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "amplitude": _NUMBER,
                        "frequency": _NUMBER,
                        "phase_step": _NUMBER,
                    },
                },
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_rollouts": {"type": "integer", "minimum": 1},
                "rollout_steps": {"type": "integer", "minimum": 1},
                "snr_grid": {"type": "array", "items": _NULL_OR_NUMBER, "minItems": 1},
                "compare_tracking": {"type": "boolean"},
                "bias_mc": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "s": {"type": "integer", "minimum": 10},
                        "n_draws": {"type": "integer", "minimum": 100},
                        "snr_db": _NUMBER,
                        "system_seed": {"type": "integer"},
                    },
                },
            },
        },
    },
}


def load_config(path) -> dict:
    import jsonschema

    try:
        with Path(path).open() as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config rejected: {exc.message} (at {list(exc.absolute_path)})") from exc
    return cfg


# ---------------------------------------------------------------------------
# config -> library objects
# ---------------------------------------------------------------------------

def build_system(cfg):
    from .systems import ArmParams, LinearParams, SystemSpec, VdpParams

    sc = cfg["system"]
    kind = sc["kind"]
    if kind == "vdp":
        return SystemSpec("vdp", VdpParams(mu=sc.get("mu", 1.0)))
    if kind == "arm":
        params = ArmParams.uniform(
            n_links=sc.get("links", 2), mass=sc.get("mass", 0.1),
            length=sc.get("length", 0.33), inertia=sc.get("inertia", 1.5),
            gravity=sc.get("gravity", 9.81))
        return SystemSpec("arm", params)
    if "a" not in sc or "b" not in sc:
        raise ConfigError("linear system needs matrices 'a' and 'b'")
    return SystemSpec("linear", LinearParams(
        a=tuple(tuple(row) for row in sc["a"]),
        b=tuple(tuple(row) for row in sc["b"])))


def build_excitation(cfg, spec):
    from .datagen import Excitation

    ds = cfg["dataset"]
    base = Excitation.default_for(spec)
    exc = Excitation(
        x0_low=tuple(ds.get("x0_low", base.x0_low)),
        x0_high=tuple(ds.get("x0_high", base.x0_high)),
        u_low=tuple(ds.get("u_low", base.u_low)),
        u_high=tuple(ds.get("u_high", base.u_high)),
    )
    if len(exc.x0_low) != spec.state_dim or len(exc.u_low) != spec.input_dim:
        raise ConfigError("excitation box dimensions do not match the system")
    return exc


def encoder_dims(cfg, spec) -> list:
    enc = cfg.get("encoder", {"hidden": [20, 20, 20], "output": 10})
    return [spec.state_dim] + list(enc["hidden"]) + [enc["output"]]


def build_train_config(cfg, seed):
    from .training import LossWeights, TrainConfig

    loss = cfg.get("loss", {})
    weights = LossWeights(
        alpha1=loss.get("alpha1", 1.0), alpha2=loss.get("alpha2", 0.5),
        alpha3=loss.get("alpha3", 0.01), gamma1=loss.get("gamma1", 0.0),
        gamma2=loss.get("gamma2", 0.0))
    tr = cfg.get("training", {})
    return TrainConfig(
        epochs=tr.get("epochs", 600), batch_size=tr.get("batch_size", 256),
        lr=tr.get("lr", 1e-3), lr_decay=tr.get("lr_decay", 0.5),
        lr_decay_every=tr.get("lr_decay_every", 200),
        clip_norm=tr.get("clip_norm", 10.0), weights=weights, seed=seed)


def build_mpc_config(cfg, spec):
    import numpy as np

    from .datagen import NoiseSpec
    from .mpc import MpcConfig

    mc = cfg.get("mpc", {})
    n, m = spec.state_dim, spec.input_dim
    if "q_x" in mc:
        q_x = tuple(mc["q_x"])
    elif spec.kind == "arm":
        k = spec.params.n_links
        q_x = (1.0,) * k + (0.0,) * k  # track joint positions only
    else:
        q_x = (1.0,) * n
    r_u = tuple(mc.get("r_u", [0.01] * m))
    if spec.kind == "arm":
        default_u = 2.0
    else:
        default_u = 1.0
    u_min = tuple(mc.get("u_min", [-default_u] * m))
    u_max = tuple(mc.get("u_max", [default_u] * m))
    feedback = None
    if mc.get("feedback_snr_db") is not None:
        feedback = NoiseSpec(snr_db=mc["feedback_snr_db"])
    if len(q_x) != n or len(r_u) != m or len(u_min) != m or len(u_max) != m:
        raise ConfigError("MPC weight/bound dimensions do not match the system")
    return MpcConfig(
        horizon=mc.get("horizon", 20), q_x=q_x, r_u=r_u,
        u_min=u_min, u_max=u_max,
        x_min=tuple(mc["x_min"]) if mc.get("x_min") is not None else None,
        x_max=tuple(mc["x_max"]) if mc.get("x_max") is not None else None,
        rho=mc.get("rho", 1e3), feedback=feedback)


def build_reference(cfg, spec):
    """Tracking reference for the configured system."""
    import numpy as np

    from .mpc import sinusoid_joint_reference

    mc = cfg.get("mpc", {})
    rc = mc.get("reference", {})
    amplitude = rc.get("amplitude", 0.5)
    frequency = rc.get("frequency", 0.2)
    duration = mc.get("duration", 10.0)
    dt = cfg["dataset"]["dt"]
    if spec.kind == "arm":
        return sinusoid_joint_reference(
            spec.params.n_links, dt, duration, amplitude=amplitude,
            frequency=frequency, phase_step=rc.get("phase_step", np.pi / 2))
    t = np.arange(0.0, duration + 0.5 * dt, dt)
    w = 2.0 * np.pi * frequency
    ref = np.zeros((len(t), spec.state_dim))
    ref[:, 0] = amplitude * np.sin(w * t)
    if spec.kind == "vdp":
        ref[:, 1] = -amplitude * w * np.cos(w * t)  # consistent with x1' = -x2
    return ref


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def sample_eval_trajectories(spec, excitation, count, steps, dt, seed):
    """Held-out clean rollouts for prediction scoring (divergers resampled)."""
    from .datagen import MAX_RESAMPLE
    from .seeding import stream
    from .systems import Diverged, simulate

    trajs = []
    for i in range(count):
        for retry in range(MAX_RESAMPLE + 1):
            rng = stream(seed, f"eval-rollout:{i}", retry)
            x0 = rng.uniform(excitation.x0_low, excitation.x0_high)
            inputs = rng.uniform(excitation.u_low, excitation.u_high,
                                 size=(steps, spec.input_dim))
            try:
                trajs.append(simulate(spec, x0, inputs, dt))
                break
            except Diverged:
                continue
        else:
            raise Diverged(f"evaluation rollout {i} kept diverging")
    return trajs


def fit_method_suite(cfg, spec, snr_db, seed):
    """Generate one noisy dataset and fit all three estimators on it.

    Returns a list of bench.CompareEntry; per-method failures are recorded
    instead of raised.
    """
    from .bench import CompareEntry
    from .datagen import NoiseSpec, build_triplets, gen_dataset
    from .lifting import EncoderLifting, MonomialLifting
    from .operator import fb_edmd_fit, fb_net_model, nominal_fit
    from .seeding import derive_seed
    from .training import train

    ds = cfg["dataset"]
    excitation = build_excitation(cfg, spec)
    data_seed = derive_seed(seed, f"dataset@{snr_db}")
    noisy, _ = gen_dataset(
        spec, ds["n_traj"], ds["n_snap"], ds["dt"], excitation,
        NoiseSpec(snr_db=snr_db, corrupt_inputs=ds.get("corrupt_inputs", True)),
        seed=data_seed)
    batch = build_triplets(noisy)
    entries = []
    t0 = time.perf_counter()
    st, _ = train(batch, spec.state_dim, spec.input_dim, encoder_dims(cfg, spec),
                  build_train_config(cfg, derive_seed(seed, f"train@{snr_db}")))
    train_time = time.perf_counter() - t0
    try:
        entries.append(CompareEntry(snr_db, "fb_net", fb_net_model(st, ds["dt"]),
                                    train_time=train_time))
    except Exception as exc:
        entries.append(CompareEntry(snr_db, "fb_net", None, train_time, str(exc)))
    shared_lifting = EncoderLifting(st.encoder, st.standardizer)
    try:
        entries.append(CompareEntry(snr_db, "nominal_ls",
                                    nominal_fit(batch, shared_lifting)))
    except Exception as exc:
        entries.append(CompareEntry(snr_db, "nominal_ls", None, None, str(exc)))
    try:
        entries.append(CompareEntry(snr_db, "fb_edmd",
                                    fb_edmd_fit(batch, MonomialLifting(spec.state_dim, 2))))
    except Exception as exc:
        entries.append(CompareEntry(snr_db, "fb_edmd", None, None, str(exc)))
    return entries


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(cfg, seed, out_dir) -> int:
    from .datagen import NoiseSpec, gen_dataset, save_dataset

    spec = build_system(cfg)
    ds = cfg["dataset"]
    excitation = build_excitation(cfg, spec)
    noise = NoiseSpec(snr_db=ds.get("snr_db"),
                      corrupt_inputs=ds.get("corrupt_inputs", True))
    noisy, clean = gen_dataset(spec, ds["n_traj"], ds["n_snap"], ds["dt"],
                               excitation, noise, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "system": cfg["system"], "dt": ds["dt"], "snr_db": ds.get("snr_db"),
        "corrupt_inputs": ds.get("corrupt_inputs", True),
        "n_snap": ds["n_snap"], "seed": seed,
    }
    save_dataset(out_dir, noisy, clean, meta)
    print(f"gen: wrote {len(noisy)} trajectories to {out_dir}")
    return EXIT_OK


def cmd_train(cfg, seed, out_dir, dataset_dir) -> int:
    from .datagen import build_triplets, load_dataset
    from .operator import fb_net_model, save_model
    from .training import train

    spec = build_system(cfg)
    noisy, _, meta = load_dataset(dataset_dir)
    batch = build_triplets(noisy)
    st, history = train(batch, spec.state_dim, spec.input_dim,
                        encoder_dims(cfg, spec), build_train_config(cfg, seed))
    model = fb_net_model(st, meta["dt"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(out_dir / "checkpoint.json", model)
    keys = ["epoch", "lr", "l_fpred", "l_flift", "l_bpred", "l_blift",
            "l_con", "reg", "total"]
    _write_csv(out_dir / "loss_history.csv", keys,
               [[row[k] for k in keys] for row in history])
    print(f"train: lifted dim {model.lifted_dim}, "
          f"final total loss {history[-1]['total']:.3e}; checkpoint in {out_dir}")
    return EXIT_OK


def _eval_predict(cfg, seed, out_dir, model) -> int:
    import numpy as np

    from .bench import pred_error
    from .operator import rollout

    spec = build_system(cfg)
    ev = cfg.get("eval", {})
    excitation = build_excitation(cfg, spec)
    trajs = sample_eval_trajectories(
        spec, excitation, ev.get("n_rollouts", 20), ev.get("rollout_steps", 200),
        cfg["dataset"]["dt"], seed)
    errs = [pred_error(t, rollout(model, t.states[0], t.inputs)) for t in trajs]
    rows = [[i, float(e)] for i, e in enumerate(errs)]
    rows.append(["mean", float(np.mean(errs))])
    _write_csv(out_dir / "predict.csv", ["rollout", "e_pred"], rows)
    print(f"predict: mean e_pred = {np.mean(errs):.6f} over {len(errs)} rollouts")
    return EXIT_OK


def _eval_track(cfg, seed, out_dir, model) -> int:
    from .bench import control_effort, track_error
    from .mpc import track

    spec = build_system(cfg)
    mpc_cfg = build_mpc_config(cfg, spec)
    ref = build_reference(cfg, spec)
    result = track(spec, model, ref, mpc_cfg, seed=seed)
    n, m = spec.state_dim, spec.input_dim
    header = (["t"] + [f"ref_{i}" for i in range(n)] + [f"x_{i}" for i in range(n)]
              + [f"u_{j}" for j in range(m)] + ["solve_ms", "cost"])
    rows = []
    for k in range(len(result.inputs)):
        rows.append([float(k * result.dt)] + [float(v) for v in result.reference[k]]
                    + [float(v) for v in result.actual[k]]
                    + [float(v) for v in result.inputs[k]]
                    + [float(result.solve_times[k] * 1e3), float(result.stage_costs[k])])
    _write_csv(out_dir / "track.csv", header, rows)
    if result.diverged:
        print("track: closed loop diverged (recorded in track.csv)")
        return EXIT_OK
    channels = (range(spec.params.n_links) if spec.kind == "arm"
                else range(spec.state_dim))
    e_track = track_error(result, channels)
    mean_norm, norm_dt = control_effort(result)
    print(f"track: e_track = {e_track:.4f}, effort per step = {mean_norm:.4f}, "
          f"effort * dt = {norm_dt:.4f}, mean solve = {result.solve_times.mean()*1e3:.2f} ms")
    return EXIT_OK


def _eval_bias_mc(cfg, seed, out_dir) -> int:
    from .bench import bias_benchmark_system, bias_mc

    bc = cfg.get("eval", {}).get("bias_mc", {})
    A, B = bias_benchmark_system(bc.get("system_seed", 0))
    diag = bias_mc(A, B, s=bc.get("s", 2000), n_draws=bc.get("n_draws", 500),
                   seed=seed, snr_db=bc.get("snr_db", 40.0))
    record = {
        "n_draws": diag.n_draws,
        "sigma_states": diag.sigma_states.tolist(),
        "sigma_inputs": diag.sigma_inputs.tolist(),
        "dev_fm": diag.dev_fm, "dev_prop": diag.dev_prop, "ratio": diag.ratio,
        "wins": diag.wins, "p_value": diag.p_value,
        "assumption_violations": diag.assumption_violations,
        "zero_noise": diag.zero_noise,
    }
    with (out_dir / "bias_mc.json").open("w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"bias-mc: ratio = {diag.ratio:.3f} "
          f"(dev_prop {diag.dev_prop:.3e} / dev_fm {diag.dev_fm:.3e}), "
          f"wins {diag.wins}/{diag.n_draws}, p = {diag.p_value:.2e}")
    return EXIT_OK


def _eval_compare(cfg, seed, out_dir) -> int:
    from .bench import compare

    spec = build_system(cfg)
    ev = cfg.get("eval", {})
    snr_grid = ev.get("snr_grid", [20.0, 25.0, 30.0, 35.0, 40.0])
    excitation = build_excitation(cfg, spec)
    eval_trajs = sample_eval_trajectories(
        spec, excitation, ev.get("n_rollouts", 20), ev.get("rollout_steps", 200),
        cfg["dataset"]["dt"], seed)
    entries = []
    for snr in snr_grid:
        entries.extend(fit_method_suite(cfg, spec, snr, seed))
    kwargs = {}
    if ev.get("compare_tracking", False):
        kwargs = dict(spec=spec, mpc_cfg=build_mpc_config(cfg, spec),
                      reference=build_reference(cfg, spec),
                      tracked_channels=(range(spec.params.n_links)
                                        if spec.kind == "arm" else None),
                      seed=seed)
    report = compare(entries, eval_trajs, **kwargs)
    value_cols = ["e_pred", "e_track", "effort_mean_norm", "effort_norm_dt", "failed"]
    rows = []
    timing_rows = []
    for row in report.to_rows():
        rows.append([row["snr_db"], row["method"]]
                    + [row[c] if row[c] is not None else "" for c in value_cols])
        timing_rows.append([row["snr_db"], row["method"],
                            row["train_time"] if row["train_time"] is not None else "",
                            row["solve_time"] if row["solve_time"] is not None else ""])
    _write_csv(out_dir / "compare.csv", ["snr_db", "method"] + value_cols, rows)
    _write_csv(out_dir / "compare_timings.csv",
               ["snr_db", "method", "train_s", "solve_s"], timing_rows)
    text = report.to_text()
    (out_dir / "compare.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_eval(cfg, seed, out_dir, mode, checkpoint) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    if mode in ("predict", "track"):
        if checkpoint is None:
            raise ConfigError(f"eval --mode {mode} needs --checkpoint")
        from .operator import load_model

        try:
            model = load_model(checkpoint)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load checkpoint: {exc}") from exc
        return _eval_predict(cfg, seed, out_dir, model) if mode == "predict" \
            else _eval_track(cfg, seed, out_dir, model)
    if mode == "bias-mc":
        return _eval_bias_mc(cfg, seed, out_dir)
    return _eval_compare(cfg, seed, out_dir)


def main(argv=None) -> int:
    # honor the thread-count env var before numpy gets imported anywhere
    threads = os.environ.get("KOOPMAN_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)

    parser = argparse.ArgumentParser(
        prog="koopman",
        description="Learn noise-robust linear models of controlled systems "
                    "and evaluate them in prediction and MPC tracking.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override config out_dir")
    sub.choices["train"].add_argument("--dataset", required=True,
                                      help="dataset directory from `koopman gen`")
    sub.choices["eval"].add_argument("--mode", required=True,
                                     choices=["predict", "track", "bias-mc", "compare"])
    sub.choices["eval"].add_argument("--checkpoint", default=None,
                                     help="model checkpoint (predict/track modes)")
    args = parser.parse_args(argv)

    from .numerics import NoPrincipalRoot, RankDeficient, Singular
    from .systems import Diverged
    from .training import NonFiniteGradient

    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg["seed"]
        out = args.out or cfg.get("out_dir")
        if out is None:
            raise ConfigError("no output directory: set out_dir in the config or pass --out")
        out_dir = Path(out)
        if args.command == "gen":
            return cmd_gen(cfg, seed, out_dir)
        if args.command == "train":
            return cmd_train(cfg, seed, out_dir, Path(args.dataset))
        return cmd_eval(cfg, seed, out_dir, args.mode, args.checkpoint)
    except ConfigError as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RankDeficient, Singular, NoPrincipalRoot, NonFiniteGradient) as exc:
        print(f"error (numeric): {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Diverged as exc:
        print(f"error (divergence): {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:  # pragma: no cover - last-resort reporting
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
