"""Write small synthetic datasets in the on-disk formats the CLI consumes.

    python3 -m dermfoundry.fixtures {images,seg,pairs,lesions,bags,survival,all} OUT_DIR
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import synth
from .core import ManifestRow, save_image, write_csv, write_manifest
from .mil import synthetic_bags
from .tbp import MEASUREMENTS, synthetic_lesions


def _group(i: int, n: int) -> str:
    # 60/20/20 split in deterministic order
    f = i / n
    return "train" if f < 0.6 else ("val" if f < 0.8 else "test")


def write_images(out: str | Path, n: int = 60, side: int = 32, n_classes: int = 2, seed: int = 0) -> Path:
    out = Path(out)
    (out / "img").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    imgs, labels = synth.class_images(n, side, rng, n_classes)
    rows = []
    for i, (im, y) in enumerate(zip(imgs, labels)):
        ref = f"img/{i:04d}.png"
        save_image(out / ref, im)
        rows.append(ManifestRow(ref, int(y), f"pt{i // 2:03d}", _group(i, n)))
    write_manifest(out / "manifest.csv", rows)
    return out / "manifest.csv"


def write_seg(out: str | Path, n: int = 60, side: int = 32, seed: int = 0) -> Path:
    out = Path(out)
    (out / "seg").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        img, mask = synth.disk_on_noise(side, rng)
        ref, mref = f"seg/{i:04d}.png", f"seg/{i:04d}_mask.png"
        save_image(out / ref, np.round(img * 255).astype(np.uint8))
        save_image(out / mref, mask.astype(np.uint8) * 255)
        rows.append(ManifestRow(ref, None, f"pt{i:03d}", _group(i, n), {"mask_ref": mref}))
    write_manifest(out / "seg_manifest.csv", rows)
    return out / "seg_manifest.csv"


def write_pairs(out: str | Path, n: int = 80, side: int = 128, seed: int = 0, jitter: float = 2.0) -> Path:
    out = Path(out)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2 == 1
    rng.shuffle(labels)
    rows = []
    for i, ch in enumerate(labels):
        t0, t1 = synth.change_pair(side, rng, bool(ch), disk_radius=max(4, side // 5), jitter=jitter)
        a, b = f"pairs/{i:04d}_t0.png", f"pairs/{i:04d}_t1.png"
        save_image(out / a, t0)
        save_image(out / b, t1)
        rows.append([f"pair{i:04d}", a, b, int(ch), _group(i, n)])
    return write_csv(out / "pairs.csv", ["pair_id", "t0_ref", "t1_ref", "changed", "group"], rows)


def write_lesions(out: str | Path, n_patients: int = 30, per_patient: int = 12, seed: int = 0) -> Path:
    out = Path(out)
    rng = np.random.default_rng(seed)
    recs = synthetic_lesions(n_patients, per_patient, rng)
    header = ["lesion_id", "patient_id", "group", "label_risk", "label_malignant", "risk_score", "out_of_bounds_fraction", *MEASUREMENTS]
    rows = []
    n_train = int(n_patients * 0.6)
    for r in recs:
        pnum = int(r.patient_id[1:])
        group = "train" if pnum < n_train else "test"
        # a noisy image-risk score standing in for the fine-tuned risk head
        risk = float(np.clip(0.6 * r.label_malignant + rng.normal(0.2, 0.15), 0, 1))
        rows.append(
            [r.lesion_id, r.patient_id, group, int(r.label_risk), int(r.label_malignant), risk, r.extras["out_of_bounds_fraction"]]
            + [r.measurements[k] for k in MEASUREMENTS]
        )
    return write_csv(out / "lesions.csv", header, rows)


def write_bags(out: str | Path, n: int = 20, seed: int = 0) -> Path:
    out = Path(out)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    bags = synthetic_bags(n, np.random.default_rng(seed))
    rows = []
    for b in bags:
        ref = f"bags/{b.slide_id}.npy"
        np.save(out / ref, b.features)
        rows.append([b.slide_id, b.case_id, b.label, ref])
    return write_csv(out / "bags.csv", ["slide_id", "case_id", "label", "feature_path"], rows)


def survival_table(n: int, rng: np.random.Generator):
    """Exponential times with hazard rising in score and thickness; uniform censoring."""
    rows = []
    subtypes = ["SSM", "NM", "LMM"]
    for i in range(n):
        score = float(rng.random())
        thick = float(rng.gamma(2.0, 1.0))
        age = float(rng.normal(60, 12))
        sub = subtypes[rng.choice(3, p=[0.6, 0.25, 0.15])]
        hazard = 0.01 * np.exp(1.5 * score + 0.2 * thick)
        t_event = rng.exponential(1 / hazard)
        t_cens = rng.uniform(24, 120)
        t = max(0.5, min(t_event, t_cens))
        rows.append([f"pt{i:04d}", round(t, 3), int(t_event <= t_cens), round(score, 6), round(age, 2), round(thick, 3), sub])
    return ["patient_id", "time_months", "event", "score", "age", "breslow", "subtype"], rows


def write_survival(out: str | Path, n: int = 200, seed: int = 0) -> Path:
    header, rows = survival_table(n, np.random.default_rng(seed))
    return write_csv(Path(out) / "survival.csv", header, rows)


WRITERS = {
    "images": write_images,
    "seg": write_seg,
    "pairs": write_pairs,
    "lesions": write_lesions,
    "bags": write_bags,
    "survival": write_survival,
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python3 -m dermfoundry.fixtures", description=__doc__)
    ap.add_argument("kind", choices=[*WRITERS, "all"])
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    kinds = list(WRITERS) if args.kind == "all" else [args.kind]
    for k in kinds:
        print(WRITERS[k](args.out, seed=args.seed))
    return 0


if __name__ == "__main__":
    sys.exit(main())
