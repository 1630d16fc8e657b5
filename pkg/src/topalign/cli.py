"""Command-line entry point: gen, train, eval, probe, sweep-layers, check-grad.

Every command reads one JSON config (``--config``); any top-level scalar field can be
overridden by a flag of the same name (``--lam 0.25``), and the ``TORA_SEED`` environment
variable overrides ``seed`` last. Precedence: TORA_SEED > flag > config file > default.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .align import OBJECTIVES, AlignConfig
from .errors import (ConfigError, DegenerateBatch, DegenerateConfiguration, DegenerateFeature,
                     DivergedError, FormatError, InvalidArgument, NonFiniteGradient)
from .evalharness import PROTOCOLS, evaluate, speedup
from .flow import NetConfig, VelocityNet
from .teacher import TeacherConfig, geometric_teacher, load_teacher_features

log = logging.getLogger("topalign")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_AUDIT = 0, 2, 3, 4, 5
AUDIT_TOLERANCE = 1e-4


class DataError(ValueError):
    """Input files exist but do not fit together."""

DEFAULTS = {
    "seed": 0,
    "data_dir": "data",
    "out_dir": "runs",
    "kinds": ["sphere", "cube"],
    "k_min": 2,
    "k_max": 3,
    "points_per_part": 128,
    "n_train": 256,
    "n_val": 64,
    "teacher": "procedural",
    "objective": "cka",
    "lam": 0.5,
    "temperature": 0.07,
    "cka_n": 256,
    "layer": 5,
    "lr": 5e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "weight_decay": 0.01,
    "eps": 1e-8,
    "batch_size": 16,
    "steps": 2000,
    "eval_every": 100,
    "sampler_steps": 20,
    "halve_after": None,
    "halve_every": 200,
    "protocol": "anchor_fixed",
    "precision": "float32",
    "hidden": 64,
    "layers": 6,
    "time_bins": 32,
    "part_pool": True,
    "probe_t": 0.5,
    "probe_k": 6,
    "probe_samples": 16,
    "checkpoint": None,
    "baseline_curve": None,
    "resume": None,
    "oracle": False,
    "audit_objectives": ["none", "cos_dist", "ntxent", "cka"],
    "audit_lams": [0.0, 0.5, 2.0],
}

SCALAR_TYPES = {}
for _key, _value in DEFAULTS.items():
    if isinstance(_value, bool):
        SCALAR_TYPES[_key] = "bool"
    elif isinstance(_value, int):
        SCALAR_TYPES[_key] = int
    elif isinstance(_value, float):
        SCALAR_TYPES[_key] = float
    elif _value is None or isinstance(_value, str):
        SCALAR_TYPES[_key] = str
SCALAR_TYPES["halve_after"] = int


# --------------------------------------------------------------------------- config

def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _check_type(key, value):
    want = DEFAULTS[key]
    if value is None:
        if want is not None and key not in ("halve_after",):
            raise ConfigError(f"{key} may not be null")
        return value
    if isinstance(want, bool):
        ok = isinstance(value, bool)
    elif isinstance(want, int) or key == "halve_after":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(want, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(want, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{key} has the wrong type: {value!r}")
    return value


def validate(cfg):
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    need(cfg["lam"] >= 0, "lam", "must be >= 0")
    need(cfg["temperature"] > 0, "temperature", "must be > 0")
    need(cfg["cka_n"] >= 2, "cka_n", "must be >= 2")
    need(cfg["layers"] >= 2, "layers", "must be >= 2")
    need(1 <= cfg["layer"] <= cfg["layers"], "layer", f"must lie in [1, {cfg['layers']}]")
    need(cfg["objective"] in OBJECTIVES, "objective", f"must be one of {OBJECTIVES}")
    need(cfg["protocol"] in PROTOCOLS, "protocol", f"must be one of {PROTOCOLS}")
    need(cfg["precision"] in ("float32", "float64"), "precision", "must be float32 or float64")
    need(cfg["lr"] > 0, "lr", "must be > 0")
    need(cfg["batch_size"] >= 1, "batch_size", "must be >= 1")
    need(cfg["steps"] >= 0, "steps", "must be >= 0")
    need(cfg["eval_every"] >= 1, "eval_every", "must be >= 1")
    need(cfg["sampler_steps"] >= 1, "sampler_steps", "must be >= 1")
    need(cfg["n_train"] >= 0 and cfg["n_val"] >= 0, "n_train", "counts must be >= 0")
    need(2 <= cfg["k_min"] <= cfg["k_max"], "k_min", "need 2 <= k_min <= k_max")
    need(cfg["k_max"] <= 8, "k_max", "at most 8 parts supported")
    need(cfg["points_per_part"] >= data_mod.MIN_PART_POINTS, "points_per_part",
         f"must be >= {data_mod.MIN_PART_POINTS}")
    need(cfg["hidden"] >= 1, "hidden", "must be >= 1")
    need(cfg["time_bins"] >= 2 and cfg["time_bins"] % 2 == 0, "time_bins", "must be even")
    need(all(k in data_mod.SHAPE_KINDS for k in cfg["kinds"]) and cfg["kinds"], "kinds",
         f"entries must be among {data_mod.SHAPE_KINDS}")
    need(0.0 <= cfg["probe_t"] <= 1.0, "probe_t", "must lie in [0, 1]")
    need(cfg["probe_k"] >= 1, "probe_k", "must be >= 1")
    need(all(o in OBJECTIVES for o in cfg["audit_objectives"]), "audit_objectives",
         f"entries must be among {OBJECTIVES}")
    return cfg


def load_config(path=None, overrides=None, environ=None):
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in raw.items():
            cfg[key] = _check_type(key, value)
    for key, value in (overrides or {}).items():
        cfg[key] = value
    env = os.environ if environ is None else environ
    if env.get("TORA_SEED") not in (None, ""):
        try:
            cfg["seed"] = int(env["TORA_SEED"])
        except ValueError:
            raise ConfigError(f"TORA_SEED must be an integer, got {env['TORA_SEED']!r}") from None
    return validate(cfg)


def align_config(cfg, objective=None, lam=None):
    return AlignConfig(objective=cfg["objective"] if objective is None else objective,
                       lam=cfg["lam"] if lam is None else lam, temperature=cfg["temperature"],
                       cka_n=cfg["cka_n"], layer=cfg["layer"])


def net_config(cfg, teacher_dim=16):
    return NetConfig(hidden=cfg["hidden"], layers=cfg["layers"], time_bins=cfg["time_bins"],
                     max_parts=8, teacher_dim=teacher_dim, part_pool=cfg["part_pool"])


def train_config(cfg, teacher_dim=16):
    from .train import TrainConfig

    return TrainConfig(lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"],
                       weight_decay=cfg["weight_decay"], eps=cfg["eps"],
                       batch_size=cfg["batch_size"], steps=cfg["steps"], seed=cfg["seed"],
                       eval_every=cfg["eval_every"], sampler_steps=cfg["sampler_steps"],
                       protocol="anchor_fixed", halve_after=cfg["halve_after"],
                       halve_every=cfg["halve_every"], precision=cfg["precision"],
                       align=align_config(cfg),
                       net=net_config(cfg, teacher_dim))


# --------------------------------------------------------------------------- dataset files

SPLITS = ("train", "val")


def _sample_name(i):
    return f"sample_{i:05d}"


def split_seed(seed, split):
    return seed * 2 + SPLITS.index(split)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen(cfg):
    root = Path(cfg["data_dir"])
    manifest = {"seed": cfg["seed"], "kinds": list(cfg["kinds"]), "k_min": cfg["k_min"],
                "k_max": cfg["k_max"], "points_per_part": cfg["points_per_part"],
                "teacher": "procedural" if cfg["teacher"] == "procedural" else "external",
                "splits": {}}
    for split, count in (("train", cfg["n_train"]), ("val", cfg["n_val"])):
        sdir = root / split
        tdir = root / "teacher" / split
        sdir.mkdir(parents=True, exist_ok=True)
        if cfg["teacher"] == "procedural":
            tdir.mkdir(parents=True, exist_ok=True)
        samples = data_mod.make_dataset(split_seed(cfg["seed"], split), count,
                                        kinds=tuple(cfg["kinds"]),
                                        k_range=(cfg["k_min"], cfg["k_max"]),
                                        points_per_part=cfg["points_per_part"])
        names = []
        for i, s in enumerate(samples):
            name = _sample_name(i)
            data_mod.write_sample(sdir / f"{name}.tors", s)
            if cfg["teacher"] == "procedural":
                data_mod.write_features(tdir / f"{name}.torf", geometric_teacher(s))
            names.append(name)
        manifest["splits"][split] = {"count": count, "seed": split_seed(cfg["seed"], split),
                                     "samples": names}
    write_json(root / "manifest.json", manifest)
    print(f"wrote {cfg['n_train']} train and {cfg['n_val']} val samples to {root}")
    return EXIT_OK


def load_split(cfg, split):
    root = Path(cfg["data_dir"])
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"dataset manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    names = manifest["splits"][split]["samples"]
    return [data_mod.read_sample(root / split / f"{n}.tors") for n in names], names


def load_teacher(cfg, split, samples, names):
    if cfg["teacher"] == "procedural":
        tdir = Path(cfg["data_dir"]) / "teacher" / split
    else:
        tdir = Path(cfg["teacher"]) / split
    try:
        return [load_teacher_features(tdir / f"{n}.torf", s.num_points)
                for s, n in zip(samples, names)]
    except InvalidArgument as exc:
        raise DataError(f"teacher features in {tdir}: {exc}") from None


# --------------------------------------------------------------------------- commands

def cmd_train(cfg):
    from .train import TrainingCurve, load_state, save_state, train

    train_set, train_names = load_split(cfg, "train")
    val_set, val_names = load_split(cfg, "val")
    align_on = cfg["objective"] != "none" and cfg["lam"] > 0
    tt = load_teacher(cfg, "train", train_set, train_names) if align_on else None
    vt = load_teacher(cfg, "val", val_set, val_names) if align_on else None
    dim = tt[0].shape[1] if tt else 16
    tcfg = train_config(cfg, dim)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    resume, start, curve = None, 0, None
    if cfg["resume"]:
        resume, start = load_state(cfg["resume"])
        curve_path = Path(cfg["resume"]).parent / "curve.csv"
        full = TrainingCurve.read_csv(curve_path)
        curve = TrainingCurve([p for p in full.points if p.step <= start])

    def on_eval(step, state, curve_):
        save_state(out / "state.torw", state, step)
        curve_.write_csv(out / "curve.csv")

    result = train(train_set, val_set, tcfg, tt, vt, resume=resume, start_step=start,
                   curve=curve, on_eval=on_eval)
    from .flow import save_checkpoint

    save_checkpoint(out / "checkpoint.torw", result.params)
    save_checkpoint(out / "best.torw", result.best_params)
    result.curve.write_csv(out / "curve.csv")
    report = {"final_pa": result.curve.points[-1].pa, "best_pa": result.curve.max_pa(),
              "steps": tcfg.steps, "objective": tcfg.align.objective if align_on else "none"}
    if cfg["baseline_curve"]:
        ratio = speedup(TrainingCurve.read_csv(cfg["baseline_curve"]), result.curve)
        report["speedup"] = ratio
        print(f"speedup vs baseline: {ratio}")
    write_json(out / "train_report.json", report)
    print(f"final validation PA {report['final_pa']:.4f} (best {report['best_pa']:.4f})")
    return EXIT_OK


def _load_model(cfg):
    from .flow import load_checkpoint
    from .train import infer_net_config

    if not cfg["checkpoint"]:
        raise ConfigError("checkpoint: a checkpoint path is required")
    params = load_checkpoint(cfg["checkpoint"])
    params = {k: v for k, v in params.items() if not k.startswith(("adam.", "best.", "meta."))}
    return params, infer_net_config(params)


def cmd_eval(cfg):
    val_set, _ = load_split(cfg, "val")
    if cfg["oracle"]:
        model = "oracle"
    else:
        params, ncfg = _load_model(cfg)
        model = VelocityNet(params, ncfg)
    report = evaluate(model, val_set, cfg["protocol"], cfg["sampler_steps"], seed=cfg["seed"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / f"metrics_{cfg['protocol']}.json", report.to_dict())
    report.write_csv(out / f"metrics_{cfg['protocol']}.csv")
    print(report.to_json())
    return EXIT_OK


def cmd_probe(cfg):
    from .probes import (ProbeReport, feature_report, layer_hidden, linear_probe, mating_rows,
                         pool_objects)

    train_set, train_names = load_split(cfg, "train")
    val_set, val_names = load_split(cfg, "val")
    if cfg["checkpoint"]:
        params, ncfg = _load_model(cfg)
        layer = cfg["layer"] - 1

        def feats(samples):
            hidden, _ = layer_hidden(params, ncfg, samples, cfg["probe_t"], cfg["seed"])
            return [h[layer] for h in hidden]

        ftr, fva = feats(train_set), feats(val_set)
        _, deformed = layer_hidden(params, ncfg, val_set[:cfg["probe_samples"]],
                                   cfg["probe_t"], cfg["seed"])
        deformed = [h[layer] for h in deformed]
    else:
        ftr = load_teacher(cfg, "train", train_set, train_names)
        fva = load_teacher(cfg, "val", val_set, val_names)
        deformed = None
    sub = val_set[:cfg["probe_samples"]]
    report = feature_report(sub, fva[:len(sub)], deformed, cfg["probe_k"])
    cats_tr = np.array([s.category for s in train_set])
    cats_va = np.array([s.category for s in val_set])
    if len(np.unique(cats_tr)) >= 2:
        report.cls_acc = linear_probe(pool_objects(ftr), cats_tr, pool_objects(fva), cats_va,
                                      "classification", seed=cfg["seed"])
    xtr, ytr = mating_rows(train_set, ftr)
    xva, yva = mating_rows(val_set, fva)
    report.mating_f1 = linear_probe(xtr, ytr, xva, yva, "mating", seed=cfg["seed"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    Path(out / "probe.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK


def cmd_sweep_layers(cfg):
    from .probes import SPATIAL_METRICS, layer_sweep

    val_set, _ = load_split(cfg, "val")
    params, ncfg = _load_model(cfg)
    per_layer = layer_sweep(params, ncfg, val_set[:cfg["probe_samples"]], cfg["probe_t"],
                            cfg["seed"], cfg["probe_k"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "layers.json", {"per_layer": per_layer})
    with open(out / "layers.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", *SPATIAL_METRICS])
        for l in range(ncfg.layers):
            w.writerow([l + 1, *("" if per_layer[m][l] is None else repr(per_layer[m][l])
                                 for m in SPATIAL_METRICS)])
    print(json.dumps({"per_layer": per_layer}, indent=2, sort_keys=True))
    return EXIT_OK


def audit_instance(seed=0):
    """The toy audit problem: a 2-part, 16-point sample and its teacher features."""
    rng = np.random.default_rng([seed, 7])
    s = data_mod.make_sample(rng, "sphere", 2, points_per_part=8)
    return s, geometric_teacher(s)


def run_audit(cfg, corrupt=False):
    from .flow import init_params
    from .train import AUDIT_NET, audit_batch, finite_diff_audit

    s, y = audit_instance(cfg["seed"])
    net = NetConfig(hidden=AUDIT_NET.hidden, layers=cfg["layers"], teacher_dim=y.shape[1],
                    part_pool=cfg["part_pool"])
    if not 1 <= cfg["layer"] <= net.layers:
        raise ConfigError("layer: outside the audit network's depth")
    params = init_params(net, np.random.default_rng([cfg["seed"], 8]))
    # a zero output head would hide the upstream gradients from the check
    rng = np.random.default_rng([cfg["seed"], 9])
    params["out.w"] = rng.uniform(-0.3, 0.3, params["out.w"].shape)
    params["out.b"] = rng.uniform(-0.3, 0.3, params["out.b"].shape)
    batch = audit_batch(s, y, cfg["seed"])
    results = {}
    for objective in cfg["audit_objectives"]:
        lams = [0.0] if objective == "none" else [l for l in cfg["audit_lams"] if l > 0] or [0.5]
        for lam in lams:
            acfg = align_config(cfg, objective, lam)
            report = finite_diff_audit(params, net, acfg, batch, _corrupt=corrupt)
            results[f"{objective}@{lam}"] = report
    return results


def cmd_check_grad(cfg, corrupt=False):
    results = run_audit(cfg, corrupt)
    worst = max(max(r.values()) for r in results.values())
    summary = {"tolerance": AUDIT_TOLERANCE, "max_rel_error": worst,
               "passed": bool(worst < AUDIT_TOLERANCE), "runs": results}
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "grad_audit.json", summary)
    for name, rep in results.items():
        print(f"{name:16s} max rel err {max(rep.values()):.3e}")
    print("PASS" if summary["passed"] else "FAIL")
    return EXIT_OK if summary["passed"] else EXIT_AUDIT


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
            "sweep-layers": cmd_sweep_layers, "check-grad": cmd_check_grad}


def build_parser():
    parser = argparse.ArgumentParser(prog="topalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, kind in SCALAR_TYPES.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                           type=str if kind == "bool" else kind)
        if name == "check-grad":
            p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        for key, kind in SCALAR_TYPES.items():
            value = getattr(args, key)
            if value is not None:
                overrides[key] = _parse_bool(value) if kind == "bool" else value
        cfg = load_config(args.config, overrides)
        if args.command == "check-grad":
            return cmd_check_grad(cfg, corrupt=args.corrupt_backward)
        return COMMANDS[args.command](cfg)
    except (ConfigError, InvalidArgument) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError, KeyError, DegenerateFeature, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergedError, NonFiniteGradient, DegenerateConfiguration, DegenerateBatch) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
