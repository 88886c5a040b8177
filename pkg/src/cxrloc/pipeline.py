"""End-to-end orchestration: data generation, parsing, box-mask
construction, both training stages, and the evaluation report with
figures. Every run writes a RunManifest that pins config, seeds, dataset
hashes, and every emitted metric."""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from .atlas import rasterize_mask
from .gain import (CLASSES, GainHyper, gradcam, load_classifier, train_baseline,
                   train_gain, truth_box_lookup, _load_split, _score_split)
from .lexicon import load_lexicon
from .metrics import ScoredSet, attention_in_box, auroc, pr_curve
from .parser import parse_report
from .synth import generate_dataset, load_image, load_manifest, manifest_sha256
from .text2box import (T2BHyper, eval_text2box, load_text2box, predict_box,
                       train_text2box)
from . import viz


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


DEFAULT_CONFIG = {
    "seed": 7,
    "data": {"n": 300, "size": 64, "noise": 0.02, "split_counts": None},
    "t2b": {"epochs": 30, "lr": 3e-3, "batch_size": 32},
    "baseline": {"epochs": 40, "lr": 0.001, "batch_size": 32},
    "gain": {"epochs": 20, "lr": 3e-4, "lam": 1.0, "alpha": 0.5, "omega": 100.0,
             "batch_size": 32},
    "overlays": 8,
    "cam_dump": 8,
}


def _merged_config(user: dict) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    for key, val in user.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def predicted_box_lookup(manifest_path, t2b_ckpt) -> dict:
    """Stage-1 output: text2box predictions per sample and side, keyed for
    the classifier's target masks."""
    model = load_text2box(t2b_ckpt)
    root = Path(manifest_path).parent
    out = {}
    for rec in load_manifest(manifest_path):
        entry = {}
        for side, zone in sorted(rec["zones"].items()):
            image = load_image(root, rec["image"])
            entry[f"{side}_opacity"] = predict_box(model, image, side, [zone])
        out[rec["sample_id"]] = entry
    return out


def parse_manifest_reports(manifest_path, out_path, lexicon=None):
    """Run the report parser over every manifest report; JSONL output."""
    lexicon = lexicon or load_lexicon()
    n = 0
    with open(out_path, "w") as fh:
        for rec in load_manifest(manifest_path):
            parse = parse_report(rec["report"], lexicon, report_id=rec["sample_id"])
            fh.write(parse.to_json() + "\n")
            n += 1
    return n


def eval_classifier(ckpt_path, manifest_path, split: str, out_dir,
                    tag: str = "model"):
    """Scores a split: per-class AUROC and AUPR, mean attention-in-box
    against truth-box masks, metrics CSV, and ROC/PR figure PNGs."""
    model = load_classifier(ckpt_path)
    samples = _load_split(manifest_path, split)
    if not samples:
        raise ValueError(f"split '{split}' is empty")
    scores = _score_split(model, samples)
    labels = np.stack([s["labels"] for s in samples])
    boxes = truth_box_lookup(manifest_path)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    curves = {}
    att_fractions = []
    for c, cname in enumerate(CLASSES):
        sset = ScoredSet(scores[:, c], labels[:, c], cname)
        auc = auroc(sset)
        points, aupr = pr_curve(sset)
        results[cname] = {"auroc": auc, "aupr": aupr}
        curves[cname] = {"pr_points": points, "aupr": aupr,
                         "roc_points": viz.roc_points(scores[:, c], labels[:, c]),
                         "auroc": auc}
        for s, lab in zip(samples, labels[:, c]):
            if lab != 1 or cname not in boxes.get(s["sample_id"], {}):
                continue
            cam = gradcam(model, s["image"], c)
            target = rasterize_mask(boxes[s["sample_id"]][cname], model.grid, model.grid)
            att_fractions.append(attention_in_box(cam.normalized, target))

    mean_att = float(np.mean(att_fractions)) if att_fractions else 0.0
    csv_path = out_dir / f"{tag}_metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "auroc", "aupr", "mean_attention_in_box"])
        for cname, r in results.items():
            writer.writerow([cname, f"{r['auroc']:.6f}", f"{r['aupr']:.6f}",
                             f"{mean_att:.6f}"])
    fig_paths = viz.save_pr_roc_curves(out_dir, curves)
    return {"per_class": results, "mean_attention_in_box": mean_att,
            "metrics_csv": str(csv_path),
            "figures": [str(p) for p in fig_paths]}


def cam_dump(gain_ckpt, baseline_ckpt, manifest_path, split, out_dir, limit=8):
    """Per-sample triptych PNGs: guided map, original, baseline map."""
    gain_model = load_classifier(gain_ckpt)
    base_model = load_classifier(baseline_ckpt)
    samples = _load_split(manifest_path, split)[:limit]
    boxes = truth_box_lookup(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        for c, cname in enumerate(CLASSES):
            if s["labels"][c] != 1:
                continue
            g = gradcam(gain_model, s["image"], c)
            b = gradcam(base_model, s["image"], c)
            truth = boxes.get(s["sample_id"], {}).get(cname)
            path = out_dir / f"cam_{s['sample_id']}_{cname}.png"
            viz.save_cam_triptych(path, g.upsampled, s["image"], b.upsampled, truth)
            written.append(str(path))
    return written


def dump_overlays(t2b_ckpt, manifest_path, split, out_dir, limit=8):
    miou, per_sample = eval_text2box(t2b_ckpt, manifest_path, split)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for p in per_sample[:limit]:
        path = out_dir / f"overlay_{p['sample_id']}_{p['side']}.png"
        viz.save_box_overlay(path, p["image"], p["truth"], p["pred"], p["iou"])
        written.append(str(path))
    return miou, written


def run_pipeline(config: dict, out_dir=None) -> dict:
    """gen-data -> parse -> text2box -> box masks -> baseline + guided
    training -> evaluation report. Returns the RunManifest dict (also
    written to run_manifest.json)."""
    cfg = _merged_config(config)
    out = Path(out_dir or cfg.get("out_dir", "runs/run"))
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    manifest_doc = {"config": cfg, "seed": seed, "stages": {}, "metrics": {}}
    t0 = time.time()

    def stage(name, fn):
        try:
            start = time.time()
            result = fn()
            manifest_doc["stages"][name] = {"seconds": round(time.time() - start, 3)}
            return result
        except Exception as exc:
            raise PipelineError(name, exc) from exc

    data_cfg = cfg["data"]
    manifest_path = stage("gen-data", lambda: generate_dataset(
        int(data_cfg["n"]), seed, out / "data", size=int(data_cfg["size"]),
        noise=float(data_cfg["noise"]),
        split_counts=data_cfg.get("split_counts")))
    manifest_doc["dataset"] = {"manifest": str(manifest_path),
                               "sha256": manifest_sha256(manifest_path)}

    stage("parse", lambda: parse_manifest_reports(manifest_path, out / "parses.jsonl"))
    manifest_doc["parses"] = str(out / "parses.jsonl")

    t2b_ckpt = out / "text2box.npz"
    t2b_cfg = cfg["t2b"]
    stage("train-t2b", lambda: train_text2box(
        manifest_path,
        T2BHyper(epochs=int(t2b_cfg["epochs"]), lr=float(t2b_cfg["lr"]),
                 batch_size=int(t2b_cfg["batch_size"]), seed=seed),
        t2b_ckpt, out / "t2b_metrics.csv"))
    val_miou, overlay_paths = stage("eval-t2b", lambda: dump_overlays(
        t2b_ckpt, manifest_path, "val", out / "overlays", limit=int(cfg["overlays"])))
    manifest_doc["metrics"]["t2b_val_miou"] = val_miou
    manifest_doc["checkpoints"] = {"text2box": str(t2b_ckpt)}

    box_lookup = stage("box-masks", lambda: predicted_box_lookup(manifest_path, t2b_ckpt))

    base_ckpt = out / "baseline.npz"
    b_cfg = cfg["baseline"]
    stage("train-baseline", lambda: train_baseline(
        manifest_path,
        GainHyper(lr=float(b_cfg["lr"]), epochs=int(b_cfg["epochs"]),
                  batch_size=int(b_cfg["batch_size"]), seed=seed),
        base_ckpt, out / "baseline_metrics.csv"))
    manifest_doc["checkpoints"]["baseline"] = str(base_ckpt)

    gain_ckpt = out / "gain.npz"
    g_cfg = cfg["gain"]
    stage("train-gain", lambda: train_gain(
        manifest_path,
        GainHyper(lam=float(g_cfg["lam"]), alpha=float(g_cfg["alpha"]),
                  omega=float(g_cfg["omega"]), lr=float(g_cfg["lr"]),
                  epochs=int(g_cfg["epochs"]), batch_size=int(g_cfg["batch_size"]),
                  seed=seed),
        gain_ckpt, out / "gain_metrics.csv",
        box_lookup=box_lookup, init_ckpt=base_ckpt))
    manifest_doc["checkpoints"]["gain"] = str(gain_ckpt)

    base_eval = stage("eval-baseline", lambda: eval_classifier(
        base_ckpt, manifest_path, "test", out / "eval", tag="baseline"))
    gain_eval = stage("eval-gain", lambda: eval_classifier(
        gain_ckpt, manifest_path, "test", out / "eval", tag="gain"))
    manifest_doc["metrics"]["baseline"] = base_eval
    manifest_doc["metrics"]["gain"] = gain_eval

    stage("cam-dump", lambda: cam_dump(gain_ckpt, base_ckpt, manifest_path, "test",
                                       out / "cams", limit=int(cfg["cam_dump"])))

    manifest_doc["total_seconds"] = round(time.time() - t0, 3)
    with open(out / "run_manifest.json", "w") as fh:
        json.dump(manifest_doc, fh, indent=2, sort_keys=True)
    return manifest_doc
