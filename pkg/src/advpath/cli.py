"""Command-line entry point: ``advpath <command> [options]``.

Every command reads an optional config file (JSON object or ``key=value``
lines), applies command-line overrides, validates everything, and only then
touches the filesystem.  Outputs are staged in a scratch directory and moved
into ``--out`` on success.  Exit codes: 0 ok, 1 usage/config error, 2
runtime error.
"""

import argparse
import csv
import io as _io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as An
from . import attack as A
from . import data as D
from .exceptions import AdvPathError, ConfigError
from .io import atomic_write_text, dumps_json, load_checkpoint, read_tensor, save_checkpoint, staged_dir, write_tensor
from .model import ModelSpec, TrainConfig, build_model, predict, predict_proba, train
from .model_selection import cross_validate
from .metrics import accuracy, auc_roc


# ----------------------------------------------------------------------------
# config schema
# ----------------------------------------------------------------------------


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v):
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    if isinstance(v, (int, float)):
        return [float(v)]
    return [float(x) for x in str(v).split(",") if x.strip()]


def _strs(v):
    if isinstance(v, (list, tuple)):
        return [str(x) for x in v]
    return [x.strip() for x in str(v).split(",") if x.strip()]


def _int(v):
    if isinstance(v, float) and not v.is_integer():
        raise ValueError(f"not an integer: {v!r}")
    return int(v)


REQUIRED = object()

COMMON = {"seed": (_int, 0), "threads": (_int, 1), "out": (str, None)}

TRAIN_KEYS = {
    "data": (str, REQUIRED),
    "optimizer": (str, "adadelta"),
    "lr": (float, 0.01),
    "epochs": (_int, 25),
    "batch_size": (_int, 16),
    "snapshot_every": (_int, 1),
}

ATTACK_KEYS = {
    "step_size": (float, 1.0),
    "max_steps": (_int, 500),
    "confidence": (float, 0.9),
}

SCHEMAS = {
    "generate": {
        "size": (_int, 32),
        "n_positive": (_int, 240),
        "n_negative": (_int, 180),
        "radius_min": (float, 1.5),
        "radius_max": (float, 2.8),
        "tumour_min": (_int, 5),
        "tumour_max": (_int, 8),
        "distractor_min": (_int, 2),
        "distractor_max": (_int, 6),
        "noise": (float, 10.0),
        "test_fraction": (float, 0.3),
        "format": (str, "quantized-8bit"),
    },
    "train": dict(TRAIN_KEYS),
    "crossval": {**TRAIN_KEYS, "runs": (_int, 5), "k": (_int, 3)},
    "attack": {
        "model": (str, REQUIRED),
        "data": (str, REQUIRED),
        "kind": (str, "none"),
        "budgets": (_floats, [0.0]),
        **ATTACK_KEYS,
        "limit": (_int, 0),
        "only_correct": (_bool, True),
        "save_perturbations": (_bool, True),
    },
    "universal": {
        "model": (str, REQUIRED),
        "train_data": (str, REQUIRED),
        "test_data": (str, REQUIRED),
        "step_size": (float, 0.2),
        "epochs": (_int, 2),
        "confidence": (float, 0.9),
        "kind": (str, "none"),
        "budget": (float, 0.0),
        "positives_only": (_bool, True),
    },
    "analyze": {
        "model": (str, REQUIRED),
        "data": (str, REQUIRED),
        "train_data": (str, ""),
        "snapshots": (str, ""),
        "kinds": (_strs, ["L0", "L1", "L2", "Linf"]),
        "budgets_L0": (_floats, [0.02, 0.05, 0.1, 0.2, 0.5, 1.0]),
        "budgets_L1": (_floats, [0.0, 1.0, 2.0, 4.0, 8.0, 16.0]),
        "budgets_L2": (_floats, [0.0, 1.0, 2.0, 4.0, 8.0, 16.0]),
        "budgets_Linf": (_floats, [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0]),
        **ATTACK_KEYS,
        "max_steps": (_int, 200),
        "limit": (_int, 30),
        "n_saliency": (_int, 5),
        "grid_n": (_int, 11),
        "grid_radius": (float, 0.0),
        "study_n": (_int, 20),
        "copies": (_int, 2),
    },
    "export-study": {
        "model": (str, REQUIRED),
        "data": (str, REQUIRED),
        "n": (_int, 20),
        "copies": (_int, 2),
        "label": (_int, 1),
        "kind": (str, "none"),
        "budget": (float, 0.0),
        **ATTACK_KEYS,
    },
}


def read_config_file(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return dict(obj)
    out = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            problems.append(f"{path}:{lineno}: expected key=value")
            continue
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    if problems:
        raise ConfigError(problems)
    return out


def resolve_config(command, file_values=None, overrides=None):
    """Merge defaults, file values and overrides; report every problem at once."""
    schema = {**SCHEMAS[command], **COMMON}
    raw = dict(file_values or {})
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    problems = [f"unknown key {k!r} for command {command!r}" for k in sorted(set(raw) - set(schema))]
    cfg = {}
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                cfg[key] = conv(raw[key])
            except (TypeError, ValueError) as exc:
                problems.append(f"{key}: {exc}")
        elif default is REQUIRED:
            problems.append(f"{key}: required")
        else:
            cfg[key] = default
    if not problems:
        problems.extend(_semantic_problems(command, cfg))
    if problems:
        raise ConfigError(problems)
    if cfg.get("out") is None:
        cfg["out"] = f"{command}-out"
    return cfg


def _collect(fn):
    try:
        fn()
    except ConfigError as exc:
        return exc.violations
    return []


def _semantic_problems(command, cfg):
    p = []
    if cfg["threads"] < 1:
        p.append(f"threads must be >= 1, got {cfg['threads']}")
    if command == "generate":
        p += _collect(lambda: _synth_config(cfg).validate())
        if not 0 <= cfg["test_fraction"] < 1:
            p.append(f"test_fraction must lie in [0, 1), got {cfg['test_fraction']}")
        if cfg["format"] not in D.FORMATS:
            p.append(f"format must be one of {D.FORMATS}, got {cfg['format']!r}")
    if command in ("train", "crossval"):
        p += _collect(lambda: _train_config(cfg).validate())
    if command == "crossval":
        if cfg["runs"] < 1:
            p.append(f"runs must be >= 1, got {cfg['runs']}")
        if cfg["k"] < 2:
            p.append(f"k must be >= 2, got {cfg['k']}")
    if command in ("attack", "analyze", "export-study"):
        p += _collect(lambda: A.AttackConfig(step_size=cfg["step_size"], max_steps=cfg["max_steps"],
                                             confidence=cfg["confidence"]).validate())
    if command == "attack":
        if not cfg["budgets"]:
            p.append("budgets: at least one budget is required")
        for b in cfg["budgets"]:
            p += _collect(lambda b=b: A.ConstraintSpec(cfg["kind"], b))
        if any(b2 <= b1 for b1, b2 in zip(cfg["budgets"], cfg["budgets"][1:])):
            p.append("budgets must be strictly increasing")
        if cfg["limit"] < 0:
            p.append("limit must be >= 0")
    if command == "universal":
        p += _collect(lambda: A.AttackConfig(step_size=cfg["step_size"], epochs=cfg["epochs"],
                                             confidence=cfg["confidence"]).validate())
        if cfg["kind"] != "none":
            p += _collect(lambda: A.ConstraintSpec(cfg["kind"], cfg["budget"]))
    if command == "analyze":
        for kind in cfg["kinds"]:
            key = f"budgets_{A.ConstraintSpec(kind, 1.0).kind}" if kind.lower() in A._ALIASES else None
            if key is None or key not in cfg:
                p.append(f"kinds: unsupported constraint {kind!r}")
                continue
            for b in cfg[key]:
                p += _collect(lambda b=b: A.ConstraintSpec(kind, b))
        if cfg["grid_n"] < 3 or cfg["grid_n"] % 2 == 0:
            p.append(f"grid_n must be odd and >= 3, got {cfg['grid_n']}")
        if cfg["grid_radius"] < 0:
            p.append("grid_radius must be >= 0 (0 picks it automatically)")
        if cfg["copies"] < 1:
            p.append("copies must be >= 1")
    if command == "export-study":
        if cfg["copies"] < 1:
            p.append("copies must be >= 1")
        if cfg["label"] not in (0, 1):
            p.append("label must be 0 or 1")
        if cfg["kind"] != "none":
            p += _collect(lambda: A.ConstraintSpec(cfg["kind"], cfg["budget"]))
    return p


def _synth_config(cfg):
    return D.SynthConfig(
        size=cfg["size"],
        n_positive=cfg["n_positive"],
        n_negative=cfg["n_negative"],
        radius_range=(cfg["radius_min"], cfg["radius_max"]),
        tumour_count_range=(cfg["tumour_min"], cfg["tumour_max"]),
        distractor_count_range=(cfg["distractor_min"], cfg["distractor_max"]),
        noise=cfg["noise"],
        seed=cfg["seed"],
    )


def _train_config(cfg):
    return TrainConfig(optimizer=cfg["optimizer"], lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                       seed=cfg["seed"], snapshot_every=cfg["snapshot_every"])


def _attack_config(cfg, **extra):
    return A.AttackConfig(step_size=cfg["step_size"], max_steps=cfg.get("max_steps", 500),
                          confidence=cfg["confidence"], seed=cfg["seed"], **extra)


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


def _csv_text(header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _pmap(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _load_dataset(path):
    return D.load_dir(path)


def _write_report(stage, out, command, cfg, metrics):
    files = sorted(str(p.relative_to(stage)) for p in stage.rglob("*") if p.is_file())
    report = {
        "toolkit_version": __version__,
        "command": command,
        "config": cfg,
        "metrics": metrics,
        "files": files + ["report.json"],
    }
    for f in files:
        if not (stage / f).is_file():
            raise AdvPathError(f"report references missing file {f}")
    atomic_write_text(stage / "report.json", dumps_json(report))
    return report


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_generate(cfg):
    ds = D.generate(_synth_config(cfg))
    with staged_dir(cfg["out"]) as stage:
        if cfg["test_fraction"] > 0:
            tr, te = D.split(ds, 1 - cfg["test_fraction"], cfg["seed"])
            D.save_dir(tr, stage / "train", cfg["format"])
            D.save_dir(te, stage / "test", cfg["format"])
            counts = {"train": _counts(tr), "test": _counts(te)}
        else:
            D.save_dir(ds, stage / "all", cfg["format"])
            counts = {"all": _counts(ds)}
        return _write_report(stage, cfg["out"], "generate", cfg, {"counts": counts})


def _counts(ds):
    y = ds.labels
    return {"n": int(len(y)), "positive": int((y == 1).sum()), "negative": int((y == 0).sum())}


def cmd_train(cfg):
    ds = _load_dataset(cfg["data"])
    model = build_model(ModelSpec(), cfg["seed"])
    model, snaps, losses = train(model, ds, _train_config(cfg))
    X, y = ds.arrays()
    proba = predict_proba(model, X)
    metrics = {
        "train_accuracy": accuracy(proba.argmax(axis=1), y),
        "train_auc": auc_roc(proba[:, 1], y),
        "loss_curve": losses,
        "n_snapshots": int(len(snaps)),
    }
    with staged_dir(cfg["out"]) as stage:
        save_checkpoint(stage / "model.advp", model)
        write_tensor(stage / "snapshots.advt", snaps)
        atomic_write_text(stage / "loss_curve.csv",
                          _csv_text(["epoch", "loss"], [{"epoch": i + 1, "loss": l} for i, l in enumerate(losses)]))
        return _write_report(stage, cfg["out"], "train", cfg, metrics)


def cmd_crossval(cfg):
    ds = _load_dataset(cfg["data"])
    metrics = cross_validate(ModelSpec(), ds, runs=cfg["runs"], k=cfg["k"], cfg=_train_config(cfg), seed=cfg["seed"])
    folds = [f.to_dict() for f in metrics.folds]
    with staged_dir(cfg["out"]) as stage:
        atomic_write_text(stage / "folds.csv", _csv_text(["run", "fold", "n_train", "n_test", "accuracy", "auc_roc"], folds))
        atomic_write_text(stage / "crossval.json", dumps_json(metrics.to_dict()))
        return _write_report(stage, cfg["out"], "crossval", cfg, metrics.summary())


ATTACK_COLUMNS = ["id", "true_label", "pred_before", "constraint", "budget", "success", "steps", "confidence",
                  "mad", "rmsd", "linf", "l0_fraction"]


def _need_checkpoint(path):
    if not Path(path).is_file():
        raise AdvPathError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_attack(cfg):
    model = _need_checkpoint(cfg["model"])
    ds = _load_dataset(cfg["data"])
    acfg = _attack_config(cfg)
    patches = list(ds)
    if cfg["limit"]:
        patches = patches[: cfg["limit"]]
    before = [predict(model, p.image)[1] for p in patches]
    targets = [(p, pb) for p, pb in zip(patches, before) if pb == p.label or not cfg["only_correct"]]
    rows, perts = [], []
    for b in cfg["budgets"]:
        constraint = A.ConstraintSpec(cfg["kind"], b)
        results = _pmap(lambda t: A.single_instance_attack(model, t[0].image, t[0].label, constraint, acfg), targets,
                        cfg["threads"])
        for (p, pb), res in zip(targets, results):
            rows.append(An._attack_record(p.id, p.label, pb, constraint, res))
            perts.append((f"{p.id}_{constraint.kind}_{b:g}", res.perturbation))
    tallies = {}
    for r in rows:
        t = tallies.setdefault(repr(r["budget"]), {"attempts": 0, "successes": 0})
        t["attempts"] += 1
        t["successes"] += r["success"]
    with staged_dir(cfg["out"]) as stage:
        atomic_write_text(stage / "attacks.csv", _csv_text(ATTACK_COLUMNS, rows))
        if cfg["save_perturbations"]:
            for name, pert in perts:
                pert.save(stage / "perturbations" / f"{name}.advt")
        return _write_report(stage, cfg["out"], "attack", cfg, {"attacked": len(targets), "per_budget": tallies})


def cmd_universal(cfg):
    model = _need_checkpoint(cfg["model"])
    tr, te = _load_dataset(cfg["train_data"]), _load_dataset(cfg["test_data"])
    if cfg["positives_only"]:
        tr, te = tr.positives(), te.positives()
    constraint = None if A._ALIASES.get(cfg["kind"].lower()) == "none" else A.ConstraintSpec(cfg["kind"], cfg["budget"])
    acfg = A.AttackConfig(step_size=cfg["step_size"], epochs=cfg["epochs"], confidence=cfg["confidence"], seed=cfg["seed"])
    pert = A.universal_attack(model, tr, acfg, constraint)
    noise = A.random_like(pert.delta, pert.energies["rmsd"], cfg["seed"])

    def tally(ds, delta):
        X, y = ds.arrays()
        s, n = A.fooling_counts(model, X, y, delta, cfg["confidence"])
        return {"successes": s, "attempts": n, "fraction": s / n if n else 0.0}

    metrics = {
        "train": tally(tr, pert.delta),
        "test": tally(te, pert.delta),
        "test_random_noise": tally(te, noise),
        "energies": pert.energies,
    }
    with staged_dir(cfg["out"]) as stage:
        pert.save(stage / "universal.advt")
        return _write_report(stage, cfg["out"], "universal", cfg, metrics)


def cmd_analyze(cfg):
    model = _need_checkpoint(cfg["model"])
    ds = _load_dataset(cfg["data"])
    if cfg["limit"]:
        ds = ds.subset(range(min(cfg["limit"], len(ds))))
    acfg = _attack_config(cfg)
    metrics = {}
    with staged_dir(cfg["out"]) as stage:
        # success-rate curves
        curve_rows, raw = [], []
        for kind in cfg["kinds"]:
            kind = A.ConstraintSpec(kind, 1.0).kind
            curve = An.success_curve(model, ds, kind, cfg[f"budgets_{kind}"], acfg)
            curve_rows += curve.rows()
            raw += curve.records
        atomic_write_text(stage / "curves.csv", _csv_text(["kind", "budget", "attempts", "successes", "rate"], curve_rows))
        atomic_write_text(stage / "curve_attacks.csv", _csv_text(ATTACK_COLUMNS, raw))
        metrics["curves"] = curve_rows

        # unconstrained attacks feed saliency and embedding
        unconstrained = A.AttackConfig(step_size=cfg["step_size"], max_steps=500, confidence=cfg["confidence"], seed=cfg["seed"])
        correct = [p for p in ds if predict(model, p.image)[1] == p.label]
        attacked = []
        for j, p in enumerate(correct):
            res = A.single_instance_attack(model, p.image, p.label, None, unconstrained, track=(j == 0))
            if res.success:
                attacked.append((p, res))
        sal_rows = []
        for p, res in attacked[: cfg["n_saliency"]]:
            adv = A.apply(p.image, res.perturbation.delta)
            s0, s1 = An.saliency(model, p.image, source_id=p.id), An.saliency(model, adv, source_id=p.id)
            write_tensor(stage / "saliency" / f"{p.id}_original.advt", s0.values)
            write_tensor(stage / "saliency" / f"{p.id}_perturbed.advt", s1.values)
            cmp = An.compare_saliency(s0, s1)
            sal_rows.append({"id": p.id, "label": p.label, "target_original": s0.target, "target_perturbed": s1.target,
                             **cmp})
        atomic_write_text(stage / "saliency.csv", _csv_text(
            ["id", "label", "target_original", "target_perturbed", "rank_correlation", "top_overlap", "degenerate"], sal_rows))

        images, groups, ids = [], [], []
        for p in ds:
            cls = predict(model, p.image)[1]
            images.append(p.image)
            groups.append("true-pos" if cls == 1 else "true-neg")
            ids.append(p.id)
        for p, res in attacked:
            adv = A.apply(p.image, res.perturbation.delta)
            images.append(adv)
            groups.append("adv-pos" if res.predicted == 1 else "adv-neg")
            ids.append(f"{p.id}-adv")
        track = None
        if attacked and attacked[0][1].track:
            p0, r0 = attacked[0]
            track = np.stack([A.apply(p0.image, d) for d in r0.track])
        if len(images) >= 3:
            emb = An.embed_features(model, np.stack(images), groups, ids, track)
            atomic_write_text(stage / "embedding.csv", _csv_text(["id", "x", "y", "group", "step"], emb.rows()))

        # loss landscape
        if cfg["snapshots"]:
            snaps = read_tensor(cfg["snapshots"])
            ref = _load_dataset(cfg["train_data"]) if cfg["train_data"] else ds
            surf = An.loss_surface(model, snaps, ref, cfg["grid_radius"] or None, cfg["grid_n"])
            atomic_write_text(stage / "loss_surface.csv", _csv_text(["alpha", "beta", "loss"], surf.grid_rows()))
            atomic_write_text(stage / "trajectory.csv", _csv_text(["snapshot", "alpha", "beta", "loss"], surf.trajectory_rows()))
            half = cfg["grid_n"] // 2
            metrics["loss_surface"] = {"center_loss": float(surf.losses[half, half]),
                                       "trajectory_start_loss": float(surf.trajectory_losses[0]),
                                       "trajectory_end_loss": float(surf.trajectory_losses[-1])}

        # blinded study material
        pairs = [(p.id, p.image, A.apply(p.image, r.perturbation.delta)) for p, r in attacked if p.label == 1][: cfg["study_n"]]
        if pairs:
            man = An.blinded_export(pairs, cfg["copies"], cfg["seed"], stage / "study")
            metrics["study_images"] = len(man["entries"])
        metrics["attacked_unconstrained"] = {"attempts": len(correct), "successes": len(attacked)}
        return _write_report(stage, cfg["out"], "analyze", cfg, metrics)


def cmd_export_study(cfg):
    model = _need_checkpoint(cfg["model"])
    ds = _load_dataset(cfg["data"])
    constraint = None if A._ALIASES.get(cfg["kind"].lower()) == "none" else A.ConstraintSpec(cfg["kind"], cfg["budget"])
    pairs = An.study_pairs(model, ds, _attack_config(cfg), n=cfg["n"], label=cfg["label"], constraint=constraint)
    with staged_dir(cfg["out"]) as stage:
        man = An.blinded_export(pairs, cfg["copies"], cfg["seed"], stage)
        return _write_report(stage, cfg["out"], "export-study", cfg, {"pairs": len(pairs), "images": len(man["entries"])})


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "attack": cmd_attack,
    "universal": cmd_universal,
    "analyze": cmd_analyze,
    "export-study": cmd_export_study,
}


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="advpath", description="Adversarial robustness evaluation for patch classifiers.")
    parser.add_argument("--version", action="version", version=f"advpath {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON object or key=value file")
        p.add_argument("--seed", type=str, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--threads", type=str, default=None)
        for key in schema:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=str, default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config") and v is not None}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(command, file_values, overrides)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"advpath {command}: config error: {v}", file=sys.stderr)
        return 1
    try:
        report = COMMANDS[command](cfg)
    except (AdvPathError, OSError, ValueError) as exc:
        print(f"advpath {command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": command, "out": cfg["out"], "metrics": report["metrics"]}, default=str)[:2000])
    return 0


if __name__ == "__main__":
    sys.exit(main())
