"""derm-foundry: one executable, one subcommand per pipeline.

Every run writes ``<out>/config.resolved.json``, ``<out>/logs/run.log`` and
its artifacts under ``<out>/outputs``. Exit codes: 0 ok, 2 validation error,
3 runtime failure, 64 unknown subcommand.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from . import adapt, change, mil, seg, seqprep, survival, tbp
from .config import load_config_file, resolve_hyperparameters
from .core import (
    DermFoundryError,
    Manifest,
    ValidationError,
    config_hash,
    derive_seed,
    load_image,
    load_manifest,
    read_csv,
    save_checkpoint,
    save_image,
    seed_all,
    write_csv,
    write_json,
)
from .evalstat import metric_reports, seg_metrics
from .pretrain import (
    PretrainModel,
    Pretrainer,
    PretrainSettings,
    arch_from_hyperparameters,
    build_teacher,
    run_pretraining,
)
from .pretrain.model import build_encoder, freeze

log = logging.getLogger("dermfoundry")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_USAGE = 64


class MissingOutputsError(DermFoundryError):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 2, except an unknown subcommand which exits 64."""

    is_root = False

    def error(self, message):
        self.print_usage(sys.stderr)
        code = EXIT_USAGE if self.is_root and ("invalid choice" in message or "required" in message) else EXIT_VALIDATION
        self.exit(code, f"{self.prog}: error: {message}\n")


@dataclass
class Run:
    task: str
    seed: int
    hp: dict[str, Any]
    root: Path

    @property
    def outputs(self) -> Path:
        return self.root / "outputs"


def _parse_sets(items: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


# data inputs each subcommand needs, from flags or the config file's "inputs" object
REQUIRED_INPUTS = {
    "probe": ("manifest",),
    "finetune": ("manifest",),
    "oof": ("manifest",),
    "seg-train": ("manifest",),
    "seg-predict": ("manifest", "checkpoint"),
    "seqprep": ("pairs",),
    "change-train": ("pairs",),
    "change-eval": ("pairs", "checkpoint"),
    "tbp-screen": ("lesions",),
    "mil-train": ("bags",),
    "survival": ("table",),
}
PATH_INPUTS = ("manifest", "checkpoint", "pairs", "lesions", "bags", "table", "features", "risk_checkpoint", "run_dir")


def _merge_inputs(task: str, args, file_values: dict[str, Any]) -> None:
    """Fill unset input flags from ``inputs`` in the config file; paths resolve against the file."""
    inputs = file_values.pop("inputs", {}) or {}
    if not isinstance(inputs, dict):
        raise ValidationError("config 'inputs' must be a JSON object")
    base = Path(args.config).parent if args.config else Path(".")
    for key, value in inputs.items():
        if not hasattr(args, key) or key in ("func", "command"):
            raise ValidationError(f"unknown input {key!r} for subcommand {task!r}")
        if getattr(args, key) in (None, []):
            if key in PATH_INPUTS and isinstance(value, str):
                value = str(base / value)
            elif key == "predictions" and isinstance(value, list):
                value = [str(base / v) for v in value]
            setattr(args, key, value)
    missing = [k for k in REQUIRED_INPUTS.get(task, ()) if getattr(args, k, None) in (None, "")]
    if missing:
        raise ValidationError(f"{task}: missing required input(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")


def _setup(task: str, args) -> Run:
    file_values = load_config_file(args.config)
    _merge_inputs(task, args, file_values)
    hp = resolve_hyperparameters(task, file_values, os.environ, _parse_sets(args.set))
    root = Path(args.out) if args.out else Path("runs") / task
    if task == "report" and not args.out and getattr(args, "run_dir", None):
        root = Path(args.run_dir) / "report"
    (root / "outputs").mkdir(parents=True, exist_ok=True)
    (root / "logs").mkdir(parents=True, exist_ok=True)
    inputs = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "seed", "out", "log_level", "set")}
    resolved = {"task": task, "seed": args.seed, "hyperparameters": hp, "inputs": inputs}
    resolved["config_hash"] = config_hash({"task": task, "seed": args.seed, "hyperparameters": hp})
    write_json(root / "config.resolved.json", resolved)
    seed_all(args.seed)
    return Run(task, args.seed, hp, root)


def _configure_logging(level: str, logfile: Path | None) -> list[logging.Handler]:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if logfile is not None:
        handlers.append(logging.FileHandler(logfile, mode="w"))
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    root = logging.getLogger()
    for h in handlers:
        h.setFormatter(fmt)
        root.addHandler(h)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))
    return handlers


# ---------------------------------------------------------------------------
# shared loaders


def _encoder(run: Run, checkpoint: str | None):
    ckpt = checkpoint or run.hp.get("checkpoint")
    if ckpt:
        return adapt.load_encoder(ckpt)
    torch.manual_seed(derive_seed(run.seed, "encoder-init") % (2**31))
    return freeze(build_encoder(arch_from_hyperparameters(run.hp)))


def _load_images(manifest: Manifest, rows, side: int | None = None) -> torch.Tensor:
    out = []
    for r in rows:
        t = load_image(manifest.resolve(r.image_ref)).to_tensor()[None]
        out.append(adapt.fit_side(t, side)[0] if side else t[0])
    if not out:
        return torch.zeros((0, 3, side or 1, side or 1))
    return torch.stack(out)


def _load_mask(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def _load_rgb(path: Path) -> np.ndarray:
    return load_image(path).to_uint8()


def _write_metric_reports(path: Path, reports) -> Path:
    rows = [r.row() for r in reports]
    cols = list(dict.fromkeys(k for r in rows for k in r))
    return write_csv(path, cols, ([r.get(c) for c in cols] for r in rows))


def _prediction_rows(ids, labels, probs, fold):
    for i, y, p in zip(ids, labels, probs):
        yield [i, int(y), *[float(v) for v in p], fold]


def _write_predictions(path: Path, ids, labels, probs, fold) -> Path:
    header = ["id", "true_label", *[f"prob_{c}" for c in range(probs.shape[1])], "fold"]
    return write_csv(path, header, _prediction_rows(ids, labels, probs, fold))


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(run: Run, args) -> int:
    hp = run.hp
    arch = arch_from_hyperparameters(hp)
    if args.manifest:
        m = load_manifest(args.manifest)
        images = _load_images(m, m.rows, arch.image_side)
    else:
        from .synth import class_images, to_float_chw

        imgs, _ = class_images(args.synthetic, arch.image_side, np.random.default_rng(derive_seed(run.seed, "corpus")))
        images = torch.from_numpy(to_float_chw(imgs))
    model = PretrainModel(arch)
    teacher = build_teacher(arch, hp["teacher_model"])
    settings = PretrainSettings.from_hyperparameters(hp, arch)
    trainer = Pretrainer(model, teacher, settings, np.random.default_rng(derive_seed(run.seed, "mask")))
    history = run_pretraining(trainer, images, int(hp["batch_size"]), settings.total_steps, run.outputs)
    cols = ["step", "masked_align", "visible_align", "total", "lr"]
    write_csv(run.outputs / "loss_history.csv", cols, ([h[c] for c in cols] for h in history))
    k = min(5, len(history))
    first = float(np.mean([h["masked_align"] for h in history[:k]]))
    last = float(np.mean([h["masked_align"] for h in history[-k:]]))
    write_csv(
        run.outputs / "metrics.csv",
        ["metric", "value"],
        [["masked_align_first5", first], ["masked_align_last5", last], ["relative_drop", 1 - last / first]],
    )
    sidecar = {"arch": arch.to_dict(), "step": trainer.step_count, "config": {"seed": run.seed, "hyperparameters": hp}}
    save_checkpoint(run.outputs / "checkpoint", model.state_dict(), sidecar)
    return EXIT_OK


def cmd_probe(run: Run, args) -> int:
    m = load_manifest(args.manifest)
    enc = _encoder(run, args.checkpoint)
    side = enc.arch.image_side
    tr, te = m.split("train"), m.split("test") or m.split("val")
    if not tr or not te:
        raise ValidationError("probe needs train rows and test (or val) rows in the manifest")
    f_tr = adapt.extract_features(_load_images(m, tr, side), enc, [r.label for r in tr], [r.image_ref for r in tr])
    f_te = adapt.extract_features(_load_images(m, te, side), enc, [r.label for r in te], [r.image_ref for r in te])
    lam = run.hp["lambda_override"]
    model = adapt.linear_probe_fit(f_tr, m.num_classes, lam, int(run.hp["max_iter"]), float(run.hp["tol"]))
    prob = adapt.linear_probe_predict(model, f_te)
    _write_predictions(run.outputs / "predictions.csv", f_te.ids, f_te.labels, prob, te[0].group)
    _write_metric_reports(run.outputs / "metrics.csv", metric_reports(f_te.labels, prob, seed=run.seed))
    write_json(run.outputs / "probe.json", {"lambda": model.lam, "iterations": model.n_iter, "gradient_norm": model.grad_norm})
    return EXIT_OK


def cmd_finetune(run: Run, args) -> int:
    m = load_manifest(args.manifest)
    enc = _encoder(run, args.checkpoint)
    side = enc.arch.image_side
    tr, va, te = m.split("train"), m.split("val"), m.split("test")
    s = adapt.FinetuneSettings.from_hyperparameters(run.hp, seed=run.seed)
    res = adapt.finetune(
        enc,
        _load_images(m, tr, side),
        [r.label for r in tr],
        _load_images(m, va, side),
        [r.label for r in va],
        m.num_classes,
        s,
        run.outputs,
        {"config_hash": config_hash({"seed": run.seed, "hyperparameters": run.hp})},
    )
    write_json(run.outputs / "val_metrics.json", {"best_epoch": res.best_epoch, **res.val_metrics})
    if te:
        prob = adapt.predict_proba(res.model, _load_images(m, te, side))
        labels = np.array([r.label for r in te])
        _write_predictions(run.outputs / "predictions.csv", [r.image_ref for r in te], labels, prob, "test")
        _write_metric_reports(run.outputs / "metrics.csv", metric_reports(labels, prob, seed=run.seed))
    return EXIT_OK


def cmd_oof(run: Run, args) -> int:
    m = load_manifest(args.manifest)
    enc = _encoder(run, args.checkpoint)
    rows = [r for r in m.rows if r.label is not None]
    feats = adapt.extract_features(
        _load_images(m, rows, enc.arch.image_side), enc, [r.label for r in rows], [r.image_ref for r in rows]
    )
    key = run.hp["stratify_by"]
    strata = feats.labels if key == "label" else [r.extras.get(key, "") for r in rows]
    res = adapt.out_of_fold_predict(
        feats,
        int(run.hp["folds"]),
        strata,
        [r.patient_id for r in rows],
        run.seed,
        m.num_classes,
        adapt.probe_fit_predict(m.num_classes, run.hp["lambda_override"], int(run.hp["max_iter"]), float(run.hp["tol"])),
    )
    res.write(run.outputs / "oof_predictions.csv")
    _write_metric_reports(run.outputs / "metrics.csv", metric_reports(res.true_labels, res.probs, seed=run.seed))
    return EXIT_OK


def _seg_arrays(m: Manifest, rows):
    x = _load_images(m, rows).numpy()
    masks = []
    for r in rows:
        if "mask_ref" not in r.extras or not r.extras["mask_ref"]:
            raise ValidationError(f"row {r.image_ref!r} has no mask_ref")
        masks.append(_load_mask(m.resolve(r.extras["mask_ref"])))
    masks = np.stack(masks)
    if masks.shape[-2:] != x.shape[-2:]:
        raise ValidationError(f"mask size {masks.shape[-2:]} differs from image size {x.shape[-2:]}")
    return x, masks


def cmd_seg_train(run: Run, args) -> int:
    m = load_manifest(args.manifest)
    enc = _encoder(run, args.checkpoint)
    xt, mt = _seg_arrays(m, m.split("train"))
    xv, mv = _seg_arrays(m, m.split("val"))
    s = seg.SegSettings.from_hyperparameters(run.hp, seed=run.seed)
    res = seg.train_seg(enc, xt, mt, xv, mv, s, run.outputs)
    te = m.split("test")
    if te:
        xs, ms = _seg_arrays(m, te)
        pred = seg.predict_mask(xs, res.model)
        _write_seg_metrics(run.outputs, [r.image_ref for r in te], pred, ms)
    return EXIT_OK


def _write_seg_metrics(out: Path, ids, pred, true):
    per = [seg_metrics(p, t) for p, t in zip(pred, true)]
    write_csv(out / "seg_metrics.csv", ["id", "dsc", "jac"], ([i, d["dsc"], d["jac"]] for i, d in zip(ids, per)))
    write_csv(
        out / "metrics.csv",
        ["metric", "value"],
        [["dsc", float(np.mean([d["dsc"] for d in per]))], ["jac", float(np.mean([d["jac"] for d in per]))]],
    )


def cmd_seg_predict(run: Run, args) -> int:
    m = load_manifest(args.manifest)
    model = seg.load_seg_model(args.checkpoint)
    rows = m.split(args.group) if args.group != "all" else list(m.rows)
    x = _load_images(m, rows).numpy()
    pred = seg.predict_mask(x, model, float(run.hp["threshold"]))
    (run.outputs / "masks").mkdir(exist_ok=True)
    from PIL import Image

    for r, p in zip(rows, pred):
        Image.fromarray(p.astype(np.uint8) * 255).convert("1").save(run.outputs / "masks" / (Path(r.image_ref).stem + "_mask.png"))
    if rows and all(r.extras.get("mask_ref") for r in rows):
        _, true = _seg_arrays(m, rows)
        _write_seg_metrics(run.outputs, [r.image_ref for r in rows], pred, true)
    return EXIT_OK


def _read_pairs(path: str) -> tuple[Path, list[dict[str, str]]]:
    p = Path(path)
    rows = read_csv(p)
    for c in ("pair_id", "t0_ref", "t1_ref"):
        if rows and c not in rows[0]:
            raise ValidationError(f"{p}: missing column {c!r}")
    return p.parent, rows


def cmd_seqprep(run: Run, args) -> int:
    root, rows = _read_pairs(args.pairs)
    stages = seqprep.parse_stages(args.stages or run.hp["stages"])
    (run.outputs / "pairs").mkdir(exist_ok=True)
    report_rows = []
    for i, r in enumerate(rows):
        a, b = _load_rgb(root / r["t0_ref"]), _load_rgb(root / r["t1_ref"])
        pa, pb, rep = seqprep.preprocess_pair(a, b, stages, seed=derive_seed(run.seed, r["pair_id"]) % (2**31), params=run.hp)
        save_image(run.outputs / "pairs" / f"{r['pair_id']}_t0.png", pa)
        save_image(run.outputs / "pairs" / f"{r['pair_id']}_t1.png", pb)
        report_rows.append([r["pair_id"], *rep.row()])
    write_csv(run.outputs / "report.csv", ["pair_id", *seqprep.PreprocessReport.COLUMNS], report_rows)
    return EXIT_OK


def _pair_examples(root: Path, rows, group: str | None = None) -> list[change.PairExample]:
    out = []
    for r in rows:
        if group is not None and r.get("group", "") != group:
            continue
        ch = str(r.get("changed", "")).strip()
        if ch not in ("0", "1"):
            raise ValidationError(f"pair {r['pair_id']}: changed must be 0 or 1, got {ch!r}")
        out.append(change.PairExample(_load_rgb(root / r["t0_ref"]), _load_rgb(root / r["t1_ref"]), ch == "1", pair_id=r["pair_id"]))
    return out


def cmd_change_train(run: Run, args) -> int:
    root, rows = _read_pairs(args.pairs)
    arm = run.hp["preproc"]
    train = change.preprocess_pairs(_pair_examples(root, rows, "train"), arm, run.seed)
    val = change.preprocess_pairs(_pair_examples(root, rows, "val"), arm, run.seed)
    enc = _encoder(run, args.checkpoint)
    s = change.ChangeSettings.from_hyperparameters(run.hp, seed=run.seed)
    res = change.train_change(train, val, enc, s, run.outputs)
    test = _pair_examples(root, rows, "test")
    if test:
        metrics = change.evaluate_change(res.model, change.preprocess_pairs(test, arm, run.seed))
        write_csv(run.outputs / "metrics.csv", ["arm", *metrics], [[arm, *metrics.values()]])
    return EXIT_OK


def cmd_change_eval(run: Run, args) -> int:
    root, rows = _read_pairs(args.pairs)
    model = change.load_change_model(args.checkpoint)
    pairs = _pair_examples(root, rows, None if args.group == "all" else args.group)
    arms = list(seqprep.ARMS) if args.preproc == "all" else [args.preproc or run.hp["preproc"]]
    out_rows = []
    pred_rows = []
    for arm in arms:
        proc = change.preprocess_pairs(pairs, arm, run.seed)
        x0, x1, y = change.pairs_to_tensors(proc)
        prob = change.predict_change(model, x0, x1)
        metrics = change.evaluate_change(model, proc)
        out_rows.append([arm, *metrics.values()])
        pred_rows += [[arm, p.pair_id, int(p.changed), float(q)] for p, q in zip(proc, prob)]
    write_csv(run.outputs / "arm_metrics.csv", ["arm", "auroc", "sensitivity", "specificity", "bacc"], out_rows)
    write_csv(run.outputs / "predictions.csv", ["arm", "pair_id", "changed", "prob_change"], pred_rows)
    return EXIT_OK


def _standardized_measurements(records) -> np.ndarray:
    names = [k for k in tbp.MEASUREMENTS if k not in tbp.CATEGORICAL]
    X = np.array([[np.nan if r.measurements[k] is None else float(r.measurements[k]) for k in names] for r in records])
    mu = np.nanmean(X, axis=0)
    sd = np.nanstd(X, axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    return np.nan_to_num(Z, nan=0.0)


def cmd_tbp_screen(run: Run, args) -> int:
    hp = run.hp
    rows = read_csv(args.lesions)
    records = tbp.records_from_rows(rows)
    groups = {r["lesion_id"]: r.get("group", "test") or "test" for r in rows}
    scores = {r["lesion_id"]: r.get("risk_score", "") for r in rows}
    reasons = [(r.lesion_id, tbp.filter_reason(r) or "") for r in records]
    write_csv(run.outputs / "filter_log.csv", ["lesion_id", "drop_reason"], reasons)
    kept = tbp.filter_lesions(records)
    train = [r for r in kept if groups[r.lesion_id] == "train" and r.label_malignant is not None]
    test = [r for r in kept if groups[r.lesion_id] != "train"] if train else kept
    if not test:
        raise ValidationError("no lesions left to screen after filtering")
    ids = [r.lesion_id for r in test]
    modules = [m.strip() for m in str(hp["modules"]).split(",") if m.strip()]
    # risk head: fine-tuned classifier over tiles, or a precomputed score column
    feats = None
    if args.risk_checkpoint:
        clf = adapt.load_classifier(args.risk_checkpoint)
        root = Path(args.lesions).parent
        x = torch.stack([load_image(root / r.tile_ref).to_tensor() for r in test])
        risk_p = adapt.predict_proba(clf, x)[:, 1]
        with torch.no_grad():
            feats = clf.fc_norm(clf.encoder(adapt.fit_side(x, clf.encoder.arch.image_side)).mean(1)).double().numpy()
    else:
        if any(scores[i] in ("", None) for i in ids):
            raise ValidationError("risk module needs --risk-checkpoint or a risk_score column")
        risk_p = np.array([float(scores[i]) for i in ids])
    if args.features:
        table = np.load(args.features, allow_pickle=False)
        index = {str(k): j for j, k in enumerate(np.load(args.features.replace(".npy", "_ids.npy"), allow_pickle=False))}
        feats = table[[index[i] for i in ids]]
    if feats is None:
        feats = _standardized_measurements(test)
    risk = {i: bool(p > hp["risk_threshold"]) for i, p in zip(ids, risk_p)}
    ud_res = tbp.ud_outliers(feats, ids, [r.patient_id for r in test], hp["iqr_multiplier"], int(hp["min_lesions_per_patient"]))
    ud = {i: i in ud_res.positives for i in ids}
    ml = None
    if "ml" in modules:
        model = tbp.fit_metadata_model(train or kept, n_trees=int(hp["n_trees"]), max_depth=hp["max_depth"], seed=run.seed)
        ml_p = tbp.predict_metadata(model, test)
        ml = {i: bool(p > hp["ml_threshold"]) for i, p in zip(ids, ml_p)}
    arms = {"full": (risk if "risk" in modules else None, ud if "ud" in modules else None, ml)}
    arms["image_only"] = (risk, ud, None)
    report = {}
    for name, (r_, u_, m_) in arms.items():
        decisions = tbp.combine(r_, u_, m_)
        report[name] = tbp.screen_report(decisions, test)
        if name == "full":
            write_csv(run.outputs / "decisions.csv", tbp.DECISION_COLUMNS, (d.row() for d in decisions))
    report["ud_patients_below_minimum"] = sorted(ud_res.too_few)
    write_json(run.outputs / "report.json", report)
    return EXIT_OK


def cmd_mil_train(run: Run, args) -> int:
    p = Path(args.bags)
    rows = read_csv(p)
    bags = []
    for r in rows:
        try:
            feats = np.load(p.parent / r["feature_path"], allow_pickle=False)
            bags.append(mil.SlideBag(r["slide_id"], feats, int(r["label"]), r["case_id"]))
        except KeyError as exc:
            raise ValidationError(f"{p}: missing column {exc.args[0]!r}") from None
    s = mil.MILSettings.from_hyperparameters(run.hp, seed=run.seed)
    k = int(args.folds or run.hp["folds"])
    res = mil.train_mil_cv(bags, k, s)
    write_csv(
        run.outputs / "fold_metrics.csv",
        ["fold", "auroc", "w_f1", "bacc", "epochs_run", "best_epoch"],
        ([f.fold, f.metrics["auroc"], f.metrics["w_f1"], f.metrics["bacc"], f.epochs_run, f.best_epoch] for f in res.folds),
    )
    header = ["id", "true_label", *[f"prob_{c}" for c in range(res.oof_probs.shape[1])], "fold"]
    write_csv(
        run.outputs / "oof_predictions.csv",
        header,
        ([i, int(y), *[float(v) for v in pr], int(f)] for i, y, pr, f in zip(res.slide_ids, res.labels, res.oof_probs, res.fold_of)),
    )
    aucs = [f.metrics["auroc"] for f in res.folds if f.metrics["auroc"] is not None]
    summary = {"mean_auroc": res.mean_auroc}
    if len(aucs) >= 2:
        from .evalstat import fold_ci

        summary["auroc_fold_ci"] = list(fold_ci(aucs))
    write_json(run.outputs / "summary.json", summary)
    return EXIT_OK


STANDARD_SURVIVAL_COLUMNS = ("patient_id", "time_months", "event", "score")


def cmd_survival(run: Run, args) -> int:
    rows = read_csv(args.table)
    if not rows:
        raise ValidationError(f"{args.table}: empty survival table")
    covs = [c.strip() for c in str(run.hp["covariates"]).split(",") if c.strip()]
    if not covs:
        covs = [c for c in rows[0] if c not in STANDARD_SURVIVAL_COLUMNS]
    records = survival.records_from_rows(rows, covs)
    km = survival.km_estimate(records)
    write_csv(run.outputs / "km_curve.csv", ["t", "S", "at_risk", "events"], km.rows())
    low, high = survival.stratify_median(records)
    group_rows = []
    for name, grp in (("low", low), ("high", high)):
        if grp:
            group_rows += [[name, *r] for r in survival.km_estimate(grp).rows()]
    write_csv(run.outputs / "km_groups.csv", ["group", "t", "S", "at_risk", "events"], group_rows)
    lr = survival.logrank_test(low, high)
    write_json(run.outputs / "logrank.json", {"statistic": lr.statistic, "p": lr.p, "n_low": len(low), "n_high": len(high)})
    terms = ["score", *covs]
    cox_records = [
        survival.SurvivalRecord(r.patient_id, r.time, r.event, r.score, {**r.covariates, "score": r.score}) for r in records
    ]
    cox = survival.cox_fit(cox_records, terms)
    write_csv(run.outputs / "cox_forest.csv", ["term", "HR", "lo", "hi", "p"], (t.row() for t in cox.terms))
    write_json(
        run.outputs / "cox_summary.json",
        {"loglik": cox.loglik, "iterations": cox.iterations, "separated": cox.separated, "reference_levels": dict(cox.reference_levels)},
    )
    horizons = [float(h) for h in str(run.hp["horizons"]).split(",") if h.strip()]
    tauc = survival.time_dependent_auc(records, horizons, bool(run.hp["ipcw"]))
    write_csv(run.outputs / "tauc.csv", ["horizon", "auc", "n_cases", "n_controls", "reason"], (h.row() for h in tauc))
    emit_report(run.root)
    return EXIT_OK


# ---------------------------------------------------------------------------
# reports


REPORT_INPUTS = ("metrics.csv", "km_curve.csv", "km_groups.csv", "cox_forest.csv", "tauc.csv", "fold_metrics.csv", "arm_metrics.csv")


def emit_report(run_dir: str | Path, dest: str | Path | None = None) -> dict[str, Any]:
    """Render static plots and a report.json for whatever known outputs a run holds."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    out = run_dir / "outputs"
    present = [f for f in REPORT_INPUTS if (out / f).is_file()]
    if not present:
        raise MissingOutputsError(f"{run_dir}: no report inputs found; expected one of outputs/{{{', '.join(REPORT_INPUTS)}}}")
    rep_dir = Path(dest) if dest is not None else out / "report"
    rep_dir.mkdir(parents=True, exist_ok=True)
    figures = []

    def save(fig, name):
        fig.tight_layout()
        fig.savefig(rep_dir / name, dpi=100, metadata={"Software": None})
        plt.close(fig)
        figures.append(name)

    if "km_groups.csv" in present or "km_curve.csv" in present:
        fig, ax = plt.subplots(figsize=(5, 4))
        src = "km_groups.csv" if "km_groups.csv" in present else "km_curve.csv"
        rows = read_csv(out / src)
        groups = sorted({r.get("group", "all") for r in rows})
        for g in groups:
            pts = [r for r in rows if r.get("group", "all") == g]
            t = [0.0] + [float(r["t"]) for r in pts]
            s = [1.0] + [float(r["S"]) for r in pts]
            ax.step(t, s, where="post", label=g)
        ax.set_xlabel("months")
        ax.set_ylabel("recurrence-free probability")
        ax.set_ylim(0, 1.02)
        ax.legend()
        save(fig, "km.png")
    if "cox_forest.csv" in present:
        rows = read_csv(out / "cox_forest.csv")
        fig, ax = plt.subplots(figsize=(5, 0.5 + 0.4 * len(rows)))
        for i, r in enumerate(rows):
            hr = float(r["HR"])
            lo = float(r["lo"]) if r["lo"] else hr
            hi = float(r["hi"]) if r["hi"] else hr
            ax.plot([lo, hi], [i, i], color="k")
            ax.plot([hr], [i], "s", color="k")
        ax.axvline(1.0, ls="--", color="grey")
        ax.set_xscale("log")
        ax.set_yticks(range(len(rows)), [r["term"] for r in rows])
        ax.set_xlabel("hazard ratio")
        save(fig, "forest.png")
    if "tauc.csv" in present:
        rows = [r for r in read_csv(out / "tauc.csv") if r["auc"]]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar([r["horizon"] for r in rows], [float(r["auc"]) for r in rows])
        ax.set_ylim(0, 1)
        ax.set_xlabel("horizon (months)")
        ax.set_ylabel("AUC")
        save(fig, "tauc.png")
    if "metrics.csv" in present:
        rows = read_csv(out / "metrics.csv")
        key = "point" if rows and "point" in rows[0] else "value"
        rows = [r for r in rows if r.get(key)]
        if rows:
            fig, ax = plt.subplots(figsize=(5, 3))
            ax.bar([r.get("metric", "") for r in rows], [float(r[key]) for r in rows])
            ax.set_ylabel("value")
            save(fig, "metrics.png")
    if "fold_metrics.csv" in present:
        rows = [r for r in read_csv(out / "fold_metrics.csv") if r["auroc"]]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar([r["fold"] for r in rows], [float(r["auroc"]) for r in rows])
        ax.set_ylim(0, 1)
        ax.set_xlabel("fold")
        ax.set_ylabel("AUROC")
        save(fig, "folds.png")
    if "arm_metrics.csv" in present:
        rows = [r for r in read_csv(out / "arm_metrics.csv") if r["auroc"]]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar([r["arm"] for r in rows], [float(r["auroc"]) for r in rows])
        ax.set_ylim(0, 1)
        ax.set_ylabel("AUROC")
        save(fig, "arms.png")
    summary = {"inputs": present, "figures": figures}
    write_json(rep_dir / "report.json", summary)
    return summary


def _read_predictions(path: str | Path):
    rows = read_csv(path)
    if not rows:
        raise ValidationError(f"{path}: empty predictions file")
    pcols = sorted((c for c in rows[0] if c.startswith("prob_")), key=lambda c: int(c.split("_")[1]))
    if "id" not in rows[0] or "true_label" not in rows[0] or not pcols:
        raise ValidationError(f"{path}: predictions need id, true_label and prob_* columns")
    ids = [r["id"] for r in rows]
    y = np.array([int(r["true_label"]) for r in rows])
    p = np.array([[float(r[c]) for c in pcols] for r in rows])
    return ids, y, p


def cmd_report(run: Run, args) -> int:
    hp = run.hp
    if args.predictions:
        names = args.names or [Path(p).stem for p in args.predictions]
        if len(names) != len(args.predictions) or len(set(names)) != len(names):
            raise ValidationError("--names must give one distinct name per predictions file")
        loaded = {n: _read_predictions(p) for n, p in zip(names, args.predictions)}
        ref_ids, ref_y, _ = loaded[names[0]]
        aligned = {}
        for n, (ids, y, p) in loaded.items():
            pos = {i: k for k, i in enumerate(ids)}
            if set(pos) != set(ref_ids):
                raise ValidationError(f"predictions for {n!r} cover different ids than {names[0]!r}")
            order = [pos[i] for i in ref_ids]
            if not np.array_equal(y[order], ref_y):
                raise ValidationError(f"true labels for {n!r} disagree with {names[0]!r}")
            aligned[n] = p[order]
        table = []
        for n in names:
            rivals = {o: aligned[o] for o in names if o != n}
            reps = metric_reports(
                ref_y,
                aligned[n],
                rivals,
                n_bootstrap=int(hp["n_bootstrap"]),
                n_permutations=int(hp["n_permutations"]),
                level=float(hp["level"]),
                seed=run.seed,
            )
            table += [{"model": n, **r.row()} for r in reps]
        cols = list(dict.fromkeys(k for r in table for k in r))
        write_csv(run.outputs / "comparison.csv", cols, ([r.get(c) for c in cols] for r in table))
        write_json(run.outputs / "comparison.json", table)
    if args.run_dir:
        emit_report(args.run_dir, run.outputs)
    if not args.predictions and not args.run_dir:
        raise ValidationError("report needs --predictions and/or --run-dir")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of hyperparameters")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="run directory (default runs/<subcommand>)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="hyperparameter override (repeatable)")

    ap = _Parser(prog="derm-foundry", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.is_root = True
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", required=True, parser_class=_Parser)

    def add(name: str, func: Callable, help_: str):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("pretrain", cmd_pretrain, "masked latent alignment pretraining")
    p.add_argument("--manifest", "--data", dest="manifest")
    p.add_argument("--synthetic", type=int, default=64, help="synthetic corpus size when no manifest is given")
    for name, func, help_ in (("probe", cmd_probe, "linear probe on frozen features"), ("finetune", cmd_finetune, "full fine-tuning"), ("oof", cmd_oof, "out-of-fold probe predictions")):
        p = add(name, func, help_)
        p.add_argument("--manifest", "--data", dest="manifest")
        p.add_argument("--checkpoint")
    p = add("seg-train", cmd_seg_train, "train the segmentation head")
    p.add_argument("--manifest", "--data", dest="manifest")
    p.add_argument("--checkpoint")
    p = add("seg-predict", cmd_seg_predict, "predict lesion masks")
    p.add_argument("--manifest", "--data", dest="manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--group", default="test", choices=["train", "val", "test", "all"])
    p = add("seqprep", cmd_seqprep, "preprocess sequential image pairs")
    p.add_argument("--pairs")
    p.add_argument("--stages", help="comma list from corner,hair,warp,mask")
    p = add("change-train", cmd_change_train, "train the siamese change detector")
    p.add_argument("--pairs")
    p.add_argument("--checkpoint")
    p = add("change-eval", cmd_change_eval, "evaluate a change detector per preprocessing arm")
    p.add_argument("--pairs")
    p.add_argument("--checkpoint")
    p.add_argument("--preproc", choices=[*seqprep.ARMS, "all"])
    p.add_argument("--group", default="test", choices=["train", "val", "test", "all"])
    p = add("tbp-screen", cmd_tbp_screen, "TBP lesion screening ensemble")
    p.add_argument("--lesions")
    p.add_argument("--risk-checkpoint")
    p.add_argument("--features", help=".npy deep features; ids in the sibling *_ids.npy")
    p = add("mil-train", cmd_mil_train, "cross-validated gated attention MIL")
    p.add_argument("--bags")
    p.add_argument("--folds", type=int)
    p = add("survival", cmd_survival, "KM, log-rank, Cox and time-dependent AUC")
    p.add_argument("--table")
    p = add("report", cmd_report, "comparison tables and static plots")
    p.add_argument("--predictions", nargs="+")
    p.add_argument("--names", nargs="+")
    p.add_argument("--run-dir")
    return ap


def _report_error(handlers, message: str) -> None:
    # once logging is up the stderr handler carries the message; before that, print it
    if handlers:
        log.error(message)
    else:
        print(message, file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    handlers: list[logging.Handler] = []
    try:
        run = _setup(args.command, args)
        handlers = _configure_logging(args.log_level, run.root / "logs" / "run.log")
        log.info("run %s seed %d -> %s", args.command, args.seed, run.root)
        return args.func(run, args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        _report_error(handlers, f"derm-foundry {args.command}: error: {exc}")
        return EXIT_VALIDATION
    except MissingOutputsError as exc:
        _report_error(handlers, f"derm-foundry {args.command}: {exc}")
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        if handlers:
            log.exception("runtime failure: %s", exc)
        else:
            print(f"derm-foundry {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        root = logging.getLogger()
        for h in handlers:
            root.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
