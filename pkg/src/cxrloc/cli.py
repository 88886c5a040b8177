"""Command-line interface tying the pipeline stages together."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .gain import GainHyper, train_baseline, train_gain, truth_box_lookup
from .lexicon import LexiconError, load_lexicon
from .parser import parse_report
from .pipeline import (cam_dump, dump_overlays, eval_classifier, parse_manifest_reports,
                       predicted_box_lookup, run_pipeline)
from .synth import generate_dataset
from .text2box import T2BHyper, eval_text2box, train_text2box


@click.group()
def main():
    """Location-aware chest phantom classification toolkit."""


@main.command("gen-data")
@click.option("--n", type=int, required=True, help="number of samples")
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--noise", type=float, default=0.02, show_default=True)
@click.option("--split-counts", type=str, default=None,
              help="explicit train,val,test counts, e.g. 2000,643,400")
def gen_data(n, seed, out_dir, size, noise, split_counts):
    """Generate phantom images, reports, and the manifest."""
    counts = tuple(int(v) for v in split_counts.split(",")) if split_counts else None
    manifest = generate_dataset(n, seed, out_dir, size=size, noise=noise,
                                split_counts=counts)
    click.echo(f"wrote {manifest}")


@main.command("parse")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True,
              help="plain-text report, JSONL of {id, text}, or a dataset manifest")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--lexicon", "lexicon_path", type=click.Path(exists=True), default=None)
def parse_cmd(in_path, out_path, lexicon_path):
    """Parse reports to JSONL finding records."""
    lexicon = load_lexicon(lexicon_path)
    text = Path(in_path).read_text()
    first_line = text.splitlines()[0] if text.strip() else ""
    if first_line.lstrip().startswith("{"):
        docs = [json.loads(line) for line in text.splitlines() if line.strip()]
        if docs and "report" in docs[0]:  # dataset manifest
            n = parse_manifest_reports(in_path, out_path, lexicon)
            click.echo(f"parsed {n} reports -> {out_path}")
            return
        with open(out_path, "w") as fh:
            for doc in docs:
                parse = parse_report(doc["text"], lexicon, report_id=str(doc.get("id", "")))
                fh.write(parse.to_json() + "\n")
        click.echo(f"parsed {len(docs)} reports -> {out_path}")
    else:
        parse = parse_report(text, lexicon)
        Path(out_path).write_text(parse.to_json() + "\n")
        click.echo(f"parsed 1 report -> {out_path}")


@main.command("lexicon-check")
@click.argument("path", type=click.Path(exists=True))
def lexicon_check(path):
    """Validate a lexicon file against the schema and invariants."""
    try:
        lex = load_lexicon(path)
    except LexiconError as exc:
        click.echo(f"INVALID: {exc}", err=True)
        sys.exit(1)
    click.echo(f"OK: {len(lex.finding_variants)} finding variants, "
               f"{len(lex.location_variants)} location variants, "
               f"{len(lex.children())} child findings")


@main.command("train-t2b")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--lr", type=float, default=3e-3, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ckpt", type=click.Path(), required=True)
@click.option("--metrics", type=click.Path(), default="t2b_metrics.csv", show_default=True)
def train_t2b(manifest, epochs, lr, batch_size, seed, ckpt, metrics):
    """Train the image+text box regressor."""
    history = train_text2box(manifest, T2BHyper(epochs=epochs, lr=lr,
                                                batch_size=batch_size, seed=seed),
                             ckpt, metrics)
    best = max(h["val_miou"] for h in history)
    click.echo(f"best val mIOU {best:.4f}; checkpoint {ckpt}")


@main.command("eval-t2b")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--split", default="val", show_default=True)
@click.option("--overlays", "overlay_dir", type=click.Path(), default=None,
              help="write per-sample overlay PNGs here")
@click.option("--limit", type=int, default=16, show_default=True)
def eval_t2b(ckpt, manifest, split, overlay_dir, limit):
    """Evaluate box predictions: mIOU plus optional overlay figures."""
    if overlay_dir:
        miou, written = dump_overlays(ckpt, manifest, split, overlay_dir, limit=limit)
        click.echo(f"mIOU({split}) = {miou:.4f}; wrote {len(written)} overlays")
    else:
        miou, _ = eval_text2box(ckpt, manifest, split)
        click.echo(f"mIOU({split}) = {miou:.4f}")


@main.command("train-baseline")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--epochs", type=int, default=40, show_default=True)
@click.option("--lr", type=float, default=0.001, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ckpt", type=click.Path(), required=True)
@click.option("--metrics", type=click.Path(), default="baseline_metrics.csv", show_default=True)
def train_baseline_cmd(manifest, epochs, lr, batch_size, seed, ckpt, metrics):
    """Train the unguided classifier (pure BCE)."""
    history = train_baseline(manifest, GainHyper(lr=lr, epochs=epochs,
                                                 batch_size=batch_size, seed=seed),
                             ckpt, metrics)
    best = max(h["val_auroc"] for h in history)
    click.echo(f"best val AUROC {best:.4f}; checkpoint {ckpt}")


@main.command("train-gain")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--lambda", "lam", type=float, default=1.0, show_default=True)
@click.option("--alpha", type=float, default=0.5, show_default=True)
@click.option("--omega", type=float, default=100.0, show_default=True)
@click.option("--lr", type=float, default=3e-4, show_default=True)
@click.option("--epochs", type=int, default=20, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--init-ckpt", type=click.Path(exists=True), default=None,
              help="baseline checkpoint to fine-tune from")
@click.option("--t2b-ckpt", type=click.Path(exists=True), default=None,
              help="stage-1 regressor; predicted boxes become target masks")
@click.option("--truth-masks", is_flag=True,
              help="use ground-truth boxes for the target masks instead")
@click.option("--ckpt", type=click.Path(), required=True)
@click.option("--metrics", type=click.Path(), default="gain_metrics.csv", show_default=True)
def train_gain_cmd(manifest, lam, alpha, omega, lr, epochs, batch_size, seed,
                   init_ckpt, t2b_ckpt, truth_masks, ckpt, metrics):
    """Train the attention-guided classifier."""
    if t2b_ckpt:
        box_lookup = predicted_box_lookup(manifest, t2b_ckpt)
    elif truth_masks:
        box_lookup = truth_box_lookup(manifest)
    else:
        box_lookup = None
        if omega > 0:
            raise click.UsageError("omega > 0 needs --t2b-ckpt or --truth-masks")
    hyper = GainHyper(lam=lam, alpha=alpha, omega=omega, lr=lr, epochs=epochs,
                      batch_size=batch_size, seed=seed)
    history = train_gain(manifest, hyper, ckpt, metrics,
                         box_lookup=box_lookup, init_ckpt=init_ckpt)
    best = max(h["val_auroc"] for h in history)
    click.echo(f"best val AUROC {best:.4f}; checkpoint {ckpt}")


@main.command("eval")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--tag", default="model", show_default=True)
def eval_cmd(ckpt, manifest, split, out_dir, tag):
    """Classifier metrics: AUROC, AUPR, attention-in-box, curve figures."""
    result = eval_classifier(ckpt, manifest, split, out_dir, tag=tag)
    for cname, r in result["per_class"].items():
        click.echo(f"{cname}: AUROC {r['auroc']:.4f}  AUPR {r['aupr']:.4f}")
    click.echo(f"mean attention-in-box: {result['mean_attention_in_box']:.4f}")
    click.echo(f"metrics: {result['metrics_csv']}")


@main.command("cam-dump")
@click.option("--ckpt", "gain_ckpt", type=click.Path(exists=True), required=True)
@click.option("--baseline-ckpt", type=click.Path(exists=True), required=True)
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--limit", type=int, default=8, show_default=True)
def cam_dump_cmd(gain_ckpt, baseline_ckpt, manifest, split, out_dir, limit):
    """Per-sample attention triptychs (guided map, image, baseline map)."""
    written = cam_dump(gain_ckpt, baseline_ckpt, manifest, split, out_dir, limit=limit)
    click.echo(f"wrote {len(written)} triptychs to {out_dir}")


@main.command("run-all")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def run_all(config_path, out_dir):
    """Run the full pipeline from a JSON config file."""
    config = json.loads(Path(config_path).read_text())
    manifest = run_pipeline(config, out_dir=out_dir)
    click.echo(json.dumps(manifest["metrics"], indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
