"""``ichseg`` command line: synth | split | train | cross-validate | predict | ensemble | evaluate | report.

Every subcommand reads an optional JSON/YAML pipeline config (``--config``);
explicit flags override config values. Outputs land under ``--out`` together with
a ``run_manifest.json`` describing the run. Subcommands hand data to each other
only through files, so any stage can be re-run on its own.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import yaml

from . import __version__
from .inference import binarize, cached_prediction, ensemble_mean, predict_with_checkpoint, save_probability
from .metrics import MetricReport, evaluate_case, write_metrics_report
from .preprocessing import InputStrategy
from .training import TrainConfig, run_cross_validation, train_fold
from .volume_io import (FoldAssignment, SyntheticSpec, load_manifest, load_mask, load_volume, make_folds,
                        save_mask, write_synthetic_dataset)

log = logging.getLogger("ichseg")


class UsageError(Exception):
    """Bad arguments or malformed config (exit code 2)."""


DEFAULTS = {
    "manifest": None,
    "folds": {"k": 5, "seed": 0},
    "train": {},
    "strategies": None,
    "inference": {"threshold": 0.5, "cache_dir": None},
    "metrics": {"tau_mm": 1.0, "hd_percentile": 100.0},
    "output_dir": None,
}


def load_config(path) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        text = path.read_text()
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must be a mapping")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for key, value in raw.items():
        if isinstance(cfg.get(key), dict) and isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    if cfg["manifest"] is not None and not Path(cfg["manifest"]).is_absolute():
        cfg["manifest"] = str(path.parent / cfg["manifest"])
    return cfg


def _train_config(cfg: dict, out: Path, strategy=None) -> TrainConfig:
    d = dict(cfg["train"])
    if strategy is not None:
        d["strategy"] = strategy
    d["checkpoint_dir"] = str(out)
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None


def _require(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required (flag or config)")
    return value


def _split_list(value):
    if value is None:
        return None
    items = []
    for v in value:
        items += [s for s in v.split(",") if s]
    return items


def _write_run_manifest(out: Path, command: str, argv, cfg: dict, artifacts) -> None:
    canonical = json.dumps(cfg, sort_keys=True, default=str)
    seeds = {"folds": cfg["folds"].get("seed"), "train": cfg["train"].get("seed", 0)}
    out.mkdir(parents=True, exist_ok=True)
    rel = []
    for a in artifacts:
        try:
            rel.append(str(Path(a).resolve().relative_to(out.resolve())))
        except ValueError:
            rel.append(str(a))
    (out / "run_manifest.json").write_text(json.dumps({
        "command": command, "argv": list(argv), "version": __version__,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "config": cfg, "seeds": seeds, "artifacts": sorted(rel)}, indent=2, default=str) + "\n")


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args, cfg, out):
    n = _require(args.cases, "--cases")
    spec_kwargs = {}
    if args.shape:
        spec_kwargs["shape"] = tuple(args.shape)
    if args.n_lesions is not None:
        spec_kwargs["n_lesions"] = args.n_lesions
    manifest = write_synthetic_dataset(out, n, SyntheticSpec(**spec_kwargs), seed=args.seed or 0)
    return [manifest, *sorted(out.glob("images/*.nii.gz")), *sorted(out.glob("labels/*.nii.gz"))]


def _manifest(args, cfg):
    path = args.manifest or cfg["manifest"]
    path = _require(path, "--manifest")
    if not Path(path).exists():
        raise UsageError(f"manifest not found: {path}")
    return load_manifest(path)


def cmd_split(args, cfg, out):
    manifest = _manifest(args, cfg)
    folds = make_folds(list(manifest), cfg["folds"]["k"], cfg["folds"]["seed"])
    folds.save(out / "folds.json")
    return [out / "folds.json"]


def _folds(args, cfg, manifest):
    if args.folds:
        return FoldAssignment.load(args.folds)
    return make_folds(list(manifest), cfg["folds"]["k"], cfg["folds"]["seed"])


def cmd_train(args, cfg, out):
    manifest = _manifest(args, cfg)
    folds = _folds(args, cfg, manifest)
    fold = _require(args.fold, "--fold")
    if not 0 <= fold < folds.k:
        raise UsageError(f"--fold must be in [0, {folds.k})")
    result = train_fold(manifest, folds, fold, _train_config(cfg, out))
    path = out / f"fold_{fold}" / "fold_result.json"
    path.write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    return [path, result.checkpoint_path, *result.snapshots]


def cmd_cross_validate(args, cfg, out):
    manifest = _manifest(args, cfg)
    folds = _folds(args, cfg, manifest)
    strategies = cfg["strategies"] or [None]
    artifacts, reports = [], {}
    for strategy in strategies:
        sub = out if len(strategies) == 1 else out / InputStrategy.from_dict(strategy).kind.value
        report = run_cross_validation(manifest, folds.k, _train_config(cfg, sub, strategy), folds=folds)
        reports[sub.name] = report.to_dict(sub)
        artifacts += [sub / "cv_report.json", sub / "folds.json"]
        artifacts += [r.checkpoint_path for r in report.fold_results]
    if len(strategies) > 1:
        means = {name: r["mean_dice"] for name, r in reports.items()}
        (out / "cv_report.json").write_text(json.dumps({"strategies": reports, "mean_dice": means},
                                                       indent=2) + "\n")
    return artifacts


def _case_selection(args, manifest):
    ids = _split_list(args.case) or sorted(manifest)
    missing = [c for c in ids if c not in manifest]
    if missing:
        raise UsageError(f"cases not in manifest: {missing}")
    return ids


def _predict_cases(checkpoints, ids, manifest, cfg, out, workers):
    threshold = cfg["inference"]["threshold"]
    cache = cfg["inference"].get("cache_dir")

    def one(cid):
        volume = load_volume(manifest[cid]["image"], cid)
        members = [cached_prediction(c, volume, cache) for c in checkpoints]
        pv = ensemble_mean(members)
        prob_path, mask_path = out / "probs" / f"{cid}.nii.gz", out / "masks" / f"{cid}.nii.gz"
        save_probability(pv, prob_path)
        save_mask(binarize(pv, threshold), volume, mask_path)
        return [prob_path, mask_path]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return [p for paths in pool.map(one, ids) for p in paths]


def cmd_predict(args, cfg, out):
    checkpoint = _require(args.checkpoint, "--checkpoint")
    if args.image:
        volume = load_volume(args.image)
        pv = predict_with_checkpoint(checkpoint, volume)
        prob_path = out / "probs" / f"{volume.case_id}.nii.gz"
        mask_path = out / "masks" / f"{volume.case_id}.nii.gz"
        save_probability(pv, prob_path)
        save_mask(binarize(pv, cfg["inference"]["threshold"]), volume, mask_path)
        return [prob_path, mask_path]
    manifest = _manifest(args, cfg)
    return _predict_cases([checkpoint], _case_selection(args, manifest), manifest, cfg, out, args.workers)


def cmd_ensemble(args, cfg, out):
    checkpoints = _split_list(args.checkpoints)
    if not checkpoints:
        raise UsageError("--checkpoints is required")
    for c in checkpoints:
        if not Path(c).exists():
            raise UsageError(f"checkpoint not found: {c}")
    manifest = _manifest(args, cfg)
    return _predict_cases(checkpoints, _case_selection(args, manifest), manifest, cfg, out, args.workers)


def _nifti_files(directory):
    files = {}
    for p in sorted(Path(directory).glob("*.nii*")):
        name = p.name
        files[name[:-7] if name.endswith(".nii.gz") else name[:-4]] = p
    return files


def cmd_evaluate(args, cfg, out):
    pred_dir, gt_dir = _require(args.pred, "--pred"), _require(args.gt, "--gt")
    for d in (pred_dir, gt_dir):
        if not Path(d).is_dir():
            raise UsageError(f"not a directory: {d}")
    preds, gts = _nifti_files(pred_dir), _nifti_files(gt_dir)
    if args.case:
        unknown = sorted(set(args.case) - set(gts))
        if unknown:
            raise UsageError(f"no ground truth for --case {unknown}")
        gts = {cid: gts[cid] for cid in args.case}
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise RuntimeError(f"no prediction for cases {missing}")
    tau, pct = cfg["metrics"]["tau_mm"], cfg["metrics"]["hd_percentile"]

    def one(cid):
        gt = load_mask(gts[cid], cid)
        return evaluate_case(load_mask(preds[cid], cid), gt, gt.spacing, tau, cid, pct)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        reports = list(pool.map(one, sorted(gts)))
    return list(write_metrics_report(reports, out, tau, pct))


def _fmt(x):
    return x if isinstance(x, str) else f"{x:.4f}"


def cmd_report(args, cfg, out):
    lines, summary = [], {}
    for path in args.cv or []:
        data = json.loads(Path(path).read_text())
        summary[str(path)] = {"mean_dice": data.get("mean_dice"), "fold_dice": data.get("fold_dice")}
        lines.append(f"## cross-validation: {path}")
        if "fold_dice" in data:
            lines.append("| " + " | ".join(f"fold {i}" for i in range(len(data["fold_dice"]))) + " | mean |")
            lines.append("|" + "---|" * (len(data["fold_dice"]) + 1))
            lines.append("| " + " | ".join(_fmt(d) for d in data["fold_dice"]) + f" | {_fmt(data['mean_dice'])} |")
        else:
            for name, mean in data["mean_dice"].items():
                lines.append(f"- {name}: mean Dice {_fmt(mean)}")
    for path in args.metrics or []:
        data = json.loads(Path(path).read_text())
        summary[str(path)] = data["mean"]
        lines.append(f"## metrics: {path} (NSD tolerance {data['header']['nsd_tolerance_mm']} mm)")
        lines.append("| case | Dice | RVD | NSD | HD (mm) |")
        lines.append("|---|---|---|---|---|")
        for row in data["cases"] + [dict(data["mean"], case_id="mean")]:
            lines.append(f"| {row['case_id']} | " + " | ".join(_fmt(row[k]) for k in ("dice", "rvd", "nsd", "hd")) + " |")
    if not lines:
        raise UsageError("report needs --cv and/or --metrics inputs")
    text = "\n".join(lines) + "\n"
    (out / "report.md").write_text(text)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    sys.stdout.write(text)
    return [out / "report.md", out / "summary.json"]


COMMANDS = {
    "synth": cmd_synth, "split": cmd_split, "train": cmd_train, "cross-validate": cmd_cross_validate,
    "predict": cmd_predict, "ensemble": cmd_ensemble, "evaluate": cmd_evaluate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ichseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config (JSON or YAML)")
    common.add_argument("--out", help="output directory (overrides config output_dir)")
    common.add_argument("--workers", type=int, default=1, help="per-case parallelism (predict/evaluate)")
    common.add_argument("--log-level", default="INFO")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest")
    data.add_argument("--k", type=int)
    data.add_argument("--seed", type=int, help="fold-split seed")

    p = sub.add_parser("synth", parents=[common], help="write synthetic cases + manifest")
    p.add_argument("--cases", type=int)
    p.add_argument("--shape", type=int, nargs=3, metavar=("H", "W", "S"))
    p.add_argument("--n-lesions", type=int)
    p.add_argument("--seed", type=int)

    sub.add_parser("split", parents=[common, data], help="deterministic k-fold split")

    for name in ("train", "cross-validate"):
        p = sub.add_parser(name, parents=[common, data])
        p.add_argument("--folds", help="folds.json from `split`")
        p.add_argument("--epochs", type=int)
        p.add_argument("--train-seed", type=int)
        if name == "train":
            p.add_argument("--fold", type=int)

    p = sub.add_parser("predict", parents=[common], help="probability + mask per case")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--image", help="single NIfTI volume instead of a manifest")
    p.add_argument("--case", action="append")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("ensemble", parents=[common], help="mean ensemble of checkpoints")
    p.add_argument("--checkpoints", action="append", help="comma-separated checkpoint paths")
    p.add_argument("--manifest")
    p.add_argument("--case", action="append")
    p.add_argument("--threshold", type=float)
    p.add_argument("--cache-dir")

    p = sub.add_parser("evaluate", parents=[common], help="Dice/RVD/NSD/HD per case")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--case", action="append", help="restrict to these case ids (default: every gt file)")
    p.add_argument("--tau-mm", type=float)
    p.add_argument("--hd-percentile", type=float)

    p = sub.add_parser("report", parents=[common], help="summarise cv/metrics reports")
    p.add_argument("--cv", action="append")
    p.add_argument("--metrics", action="append")
    return parser


def _apply_overrides(args, cfg):
    if getattr(args, "manifest", None):
        cfg["manifest"] = args.manifest
    if getattr(args, "k", None) is not None:
        cfg["folds"]["k"] = args.k
    if args.command != "synth" and getattr(args, "seed", None) is not None:
        cfg["folds"]["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["epochs"] = args.epochs
    if getattr(args, "train_seed", None) is not None:
        cfg["train"]["seed"] = args.train_seed
    if getattr(args, "threshold", None) is not None:
        cfg["inference"]["threshold"] = args.threshold
    if getattr(args, "cache_dir", None):
        cfg["inference"]["cache_dir"] = args.cache_dir
    if getattr(args, "tau_mm", None) is not None:
        cfg["metrics"]["tau_mm"] = args.tau_mm
    if getattr(args, "hd_percentile", None) is not None:
        cfg["metrics"]["hd_percentile"] = args.hd_percentile
    if args.out:
        cfg["output_dir"] = args.out
    if int(cfg["folds"]["k"]) < 2:
        raise UsageError("k must be >= 2")
    if not 0 < float(cfg["inference"]["threshold"]) < 1:
        raise UsageError("threshold must be in (0, 1)")
    if not float(cfg["metrics"]["tau_mm"]) > 0:
        raise UsageError("tau_mm must be > 0")
    return cfg


def dispatch(argv) -> int:
    """Run one subcommand; returns 0 on success, 2 on usage errors, 1 on runtime failures."""
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _apply_overrides(args, load_config(args.config))
        out = Path(_require(cfg["output_dir"], "--out"))
        out.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](args, cfg, out)
        _write_run_manifest(out, args.command, argv, cfg, artifacts)
    except UsageError as exc:
        print(f"ichseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"ichseg {args.command}: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> None:
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
