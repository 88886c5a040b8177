"""Procedural phantom chest images with zone-placed opacities, templated
reports, and ground-truth boxes; the desk-scale stand-in dataset.

Per-sample RNG is derived from (seed, index) so generation order and worker
count cannot change the output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .atlas import Atlas, NormalizedBox, default_atlas, dilate, zone_box
from .lexicon import Lexicon, load_lexicon
from .parser import parse_report

SIDES = ("Right", "Left", "Both", "None")
SIDE_ZONES = {
    "Right": ("right upper lung zone", "right mid lung zone", "right lower lung zone"),
    "Left": ("left upper lung zone", "left mid lung zone", "left lower lung zone"),
}


class SynthError(ValueError):
    pass


@dataclass
class PhantomSpec:
    size: int = 64
    side: str = "Right"                      # Left | Right | Both
    zones: tuple[str, ...] = ("right lower lung zone",)
    intensity: float = 0.7
    sigma_range: tuple[float, float] = (0.04, 0.06)
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.side not in SIDES:
            raise SynthError(f"bad side {self.side}")
        if not (0.0 < self.intensity <= 1.0):
            raise SynthError("intensity must lie in (0, 1]")
        for z in self.zones:
            want = "left " if z.startswith("left") else "right "
            have = {"Left": "left ", "Right": "right "}.get(self.side)
            if have is not None and not z.startswith(have):
                raise SynthError(f"zone '{z}' contradicts side {self.side}")
        if self.side == "Both" and len(self.zones) != 2:
            raise SynthError("side Both requires one zone per side")
        if self.side == "None" and self.zones:
            raise SynthError("side None cannot carry zones")


def _background(size: int) -> np.ndarray:
    """Dark thorax, two darker elliptical lung fields, brighter mediastinal
    band. Deterministic."""
    yy, xx = np.meshgrid((np.arange(size) + 0.5) / size,
                         (np.arange(size) + 0.5) / size, indexing="ij")
    img = np.full((size, size), 0.35)
    for cx in (0.28, 0.72):
        ellipse = ((xx - cx) / 0.20) ** 2 + ((yy - 0.48) / 0.38) ** 2 <= 1.0
        img[ellipse] = 0.15
    band = (np.abs(xx - 0.5) < 0.10) & (yy < 0.55)
    img[band] = 0.55
    return img


def generate_phantom(spec: PhantomSpec, atlas: Atlas | None = None):
    """Render one phantom; returns (image [H,W] in [0,1], truth boxes dict
    zone -> NormalizedBox)."""
    atlas = atlas or default_atlas()
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    img = _background(size)
    yy, xx = np.meshgrid((np.arange(size) + 0.5) / size,
                         (np.arange(size) + 0.5) / size, indexing="ij")

    truth: dict[str, NormalizedBox] = {}
    for zone in spec.zones:
        zb = dilate(zone_box(zone, atlas), 0.10)
        lo, hi = spec.sigma_range
        sigma = rng.uniform(lo, hi)
        # keep the 2-sigma truth box inside the dilated zone
        sigma = min(sigma, zb.w / 4.0 - 1e-6, zb.h / 4.0 - 1e-6)
        cx = rng.uniform(zb.x + 2 * sigma, zb.x + zb.w - 2 * sigma)
        cy = rng.uniform(zb.y + 2 * sigma, zb.y + zb.h - 2 * sigma)
        blob = spec.intensity * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
        img = img + blob
        x0 = max(0.0, cx - 2 * sigma)
        y0 = max(0.0, cy - 2 * sigma)
        x1 = min(1.0, cx + 2 * sigma)
        y1 = min(1.0, cy + 2 * sigma)
        truth[zone] = NormalizedBox(x0, y0, x1 - x0, y1 - y0)

    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0), truth


def load_templates(path=None) -> dict:
    if path is None:
        raw = resources.files("cxrloc.data").joinpath("templates.json").read_text()
    else:
        raw = Path(path).read_text()
    return json.loads(raw)


def generate_report(spec: PhantomSpec, templates: dict, lexicon: Lexicon,
                    rng: np.random.Generator) -> str:
    """Sample a report matching the PhantomSpec; the parse of the output is
    checked against it before returning."""
    sentences = []
    if spec.side == "Both":
        lower_pair = {"left lower lung zone", "right lower lung zone"}
        if set(spec.zones) == lower_pair:
            sentences.append(str(rng.choice(templates["positive_both_lower"])))
        else:
            for zone in spec.zones:
                tpl = str(rng.choice(templates["positive_single"]))
                sentences.append(tpl.format(zone=zone))
    elif spec.side in ("Left", "Right"):
        for zone in spec.zones:
            tpl = str(rng.choice(templates["positive_single"]))
            sentences.append(tpl.format(zone=zone))

    n_neg = int(rng.integers(1, 3))
    negs = list(rng.choice(templates["negative"], size=n_neg, replace=False))
    sentences.extend(str(s) for s in negs)
    text = " ".join(sentences)

    _check_round_trip(text, spec, lexicon)
    return text


def _expected_labels(spec: PhantomSpec) -> tuple[str, frozenset]:
    lat = "Bilateral" if spec.side == "Both" else spec.side
    return lat, frozenset(spec.zones)


def _check_round_trip(text: str, spec: PhantomSpec, lexicon: Lexicon) -> None:
    parse = parse_report(text, lexicon)
    pos = [p for p in parse.parents if p.parent_finding == "opacity" and p.context == "Positive"]
    if spec.side == "None":
        if pos:
            raise SynthError(f"round-trip failed: positive opacity in negative report {text!r}")
        return
    lat, zones = _expected_labels(spec)
    if not pos:
        raise SynthError(f"round-trip failed: no positive opacity parent in {text!r}")
    got = pos[0]
    if got.laterality != lat or set(got.locations) != set(zones):
        raise SynthError(
            f"round-trip failed for {text!r}: got ({got.laterality}, {got.locations}), "
            f"want ({lat}, {sorted(zones)})")


@dataclass
class SampleRecord:
    sample_id: str
    image: str
    report: str
    right_opacity: int
    left_opacity: int
    zones: dict = field(default_factory=dict)       # side -> zone label
    boxes: dict = field(default_factory=dict)       # side -> [x, y, w, h]
    split: str = "train"

    def to_dict(self):
        return {
            "sample_id": self.sample_id, "image": self.image, "report": self.report,
            "right_opacity": self.right_opacity, "left_opacity": self.left_opacity,
            "zones": self.zones, "boxes": self.boxes, "split": self.split,
        }


def _sample_spec(index: int, seed: int, size: int, noise: float) -> PhantomSpec:
    side = "Right" if index % 2 == 0 else "Left"
    rng = np.random.default_rng((seed, index, 0xA11CE))
    zone = str(rng.choice(SIDE_ZONES[side]))
    intensity = float(rng.uniform(0.55, 0.85))
    sample_seed = int(np.random.SeedSequence(entropy=(seed, index)).generate_state(1)[0])
    return PhantomSpec(size=size, side=side, zones=(zone,), intensity=intensity,
                       noise=noise, seed=sample_seed)


def generate_dataset(n: int, seed: int, out_dir, size: int = 64, noise: float = 0.02,
                     split_fracs=(0.7, 0.1, 0.2), split_counts=None,
                     atlas: Atlas | None = None, lexicon: Lexicon | None = None,
                     templates: dict | None = None) -> Path:
    """Write n phantom samples (PNG + report) and a manifest JSONL; returns
    the manifest path. Splits are deterministic by index; sides alternate so
    left/right stay balanced overall and within splits."""
    if n < 10:
        raise SynthError("need n >= 10")
    atlas = atlas or default_atlas()
    lexicon = lexicon or load_lexicon()
    templates = templates or load_templates()
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    if split_counts is not None:
        n_train, n_val, n_test = split_counts
        if n_train + n_val + n_test != n:
            raise SynthError("split_counts must sum to n")
    else:
        n_train = round(n * split_fracs[0])
        n_val = round(n * split_fracs[1])
        n_test = n - n_train - n_val

    records = []
    for i in range(n):
        spec = _sample_spec(i, seed, size, noise)
        img, truth = generate_phantom(spec, atlas)
        report_rng = np.random.default_rng((seed, i, 0xBEEF))
        report = generate_report(spec, templates, lexicon, report_rng)

        name = f"sample_{i:05d}.png"
        Image.fromarray((img * 255).round().astype(np.uint8), mode="L").save(img_dir / name)

        if i < n_train:
            split = "train"
        elif i < n_train + n_val:
            split = "val"
        else:
            split = "test"

        zones = {}
        boxes = {}
        for zone, box in truth.items():
            side = "left" if zone.startswith("left") else "right"
            zones[side] = zone
            boxes[side] = [round(v, 10) for v in box.as_tuple()]
        records.append(SampleRecord(
            sample_id=f"{i:05d}", image=f"images/{name}", report=report,
            right_opacity=int(spec.side in ("Right", "Both")),
            left_opacity=int(spec.side in ("Left", "Both")),
            zones=zones, boxes=boxes, split=split,
        ))

    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def manifest_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_image(root, rel_path) -> np.ndarray:
    arr = np.asarray(Image.open(Path(root) / rel_path), dtype=np.float64)
    return arr / 255.0
