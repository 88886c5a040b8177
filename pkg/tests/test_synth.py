"""Phantom data generator: determinism, labels, splits, and report round-trip."""

import json

import numpy as np
import pytest

from cxrloc.atlas import NormalizedBox, default_atlas, dilate, iou, zone_box
from cxrloc.lexicon import load_lexicon
from cxrloc.parser import parse_report
from cxrloc.synth import (PhantomSpec, SynthError, _background, generate_dataset,
                          generate_phantom, load_image, load_manifest,
                          manifest_sha256)


class TestPhantomSpec:
    def test_defaults_valid(self):
        PhantomSpec()

    def test_bad_side(self):
        with pytest.raises(SynthError):
            PhantomSpec(side="Up")

    def test_zone_contradicting_side(self):
        with pytest.raises(SynthError):
            PhantomSpec(side="Left", zones=("right lower lung zone",))

    def test_none_side_with_zone(self):
        with pytest.raises(SynthError):
            PhantomSpec(side="None", zones=("left lower lung zone",))

    def test_bad_intensity(self):
        with pytest.raises(SynthError):
            PhantomSpec(intensity=0.0)


class TestPhantomImage:
    def test_background_deterministic(self):
        np.testing.assert_array_equal(_background(64), _background(64))

    def test_image_range_and_shape(self):
        img, truth = generate_phantom(PhantomSpec(seed=1))
        assert img.shape == (64, 64)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert set(truth) == {"right lower lung zone"}

    def test_same_seed_same_image(self):
        a, _ = generate_phantom(PhantomSpec(seed=5))
        b, _ = generate_phantom(PhantomSpec(seed=5))
        np.testing.assert_array_equal(a, b)

    def test_different_seed_different_image(self):
        a, _ = generate_phantom(PhantomSpec(seed=5))
        b, _ = generate_phantom(PhantomSpec(seed=6))
        assert not np.array_equal(a, b)

    def test_truth_box_inside_dilated_zone(self):
        atlas = default_atlas()
        for seed in range(10):
            spec = PhantomSpec(side="Left", zones=("left mid lung zone",), seed=seed)
            _, truth = generate_phantom(spec, atlas)
            box = truth["left mid lung zone"]
            zb = dilate(zone_box("left mid lung zone", atlas), 0.10)
            assert box.x >= zb.x - 1e-9 and box.y >= zb.y - 1e-9
            assert box.x + box.w <= zb.x + zb.w + 1e-9
            assert box.y + box.h <= zb.y + zb.h + 1e-9

    def test_blob_brightens_its_zone(self):
        spec = PhantomSpec(noise=0.0, seed=2)
        img, truth = generate_phantom(spec)
        box = truth["right lower lung zone"]
        H = W = spec.size
        ys = slice(int(box.y * H), max(int(box.y * H) + 1, int((box.y + box.h) * H)))
        xs = slice(int(box.x * W), max(int(box.x * W) + 1, int((box.x + box.w) * W)))
        bg = _background(spec.size)
        assert img[ys, xs].max() > bg[ys, xs].max() + 0.3


class TestDataset:
    @pytest.fixture(scope="class")
    @staticmethod
    def dataset(tmp_path_factory):
        out = tmp_path_factory.mktemp("synth")
        manifest = generate_dataset(20, seed=3, out_dir=out)
        return out, manifest

    def test_manifest_shape(self, dataset):
        out, manifest = dataset
        records = load_manifest(manifest)
        assert len(records) == 20
        for r in records:
            assert (out / r["image"]).exists()
            assert r["right_opacity"] + r["left_opacity"] == 1

    def test_side_balance(self, dataset):
        _, manifest = dataset
        records = load_manifest(manifest)
        n_right = sum(r["right_opacity"] for r in records)
        n_left = sum(r["left_opacity"] for r in records)
        assert abs(n_right - n_left) <= 2

    def test_split_fractions(self, dataset):
        _, manifest = dataset
        records = load_manifest(manifest)
        counts = {s: sum(1 for r in records if r["split"] == s)
                  for s in ("train", "val", "test")}
        assert counts == {"train": 14, "val": 2, "test": 4}

    def test_determinism(self, dataset, tmp_path):
        _, manifest = dataset
        manifest2 = generate_dataset(20, seed=3, out_dir=tmp_path)
        assert manifest_sha256(manifest) == manifest_sha256(manifest2)

    def test_report_round_trip(self, dataset):
        _, manifest = dataset
        lexicon = load_lexicon()
        for r in load_manifest(manifest):
            parse = parse_report(r["report"], lexicon)
            pos = [p for p in parse.parents
                   if p.parent_finding == "opacity" and p.context == "Positive"]
            assert len(pos) == 1
            side = "Right" if r["right_opacity"] else "Left"
            assert pos[0].laterality == side
            assert set(pos[0].locations) == set(r["zones"].values())

    def test_truth_box_overlaps_named_zone(self, dataset):
        _, manifest = dataset
        atlas = default_atlas()
        for r in load_manifest(manifest):
            for side, zone in r["zones"].items():
                box = NormalizedBox(*r["boxes"][side])
                assert iou(box, dilate(zone_box(zone, atlas), 0.10)) > 0.0
                # box must sit on the correct half of the image
                cx = box.x + box.w / 2
                assert (cx < 0.5) == zone.startswith("right")

    def test_image_round_trip(self, dataset):
        out, manifest = dataset
        r = load_manifest(manifest)[0]
        img = load_image(out, r["image"])
        assert img.shape == (64, 64)
        assert 0.0 <= img.min() and img.max() <= 1.0

    def test_explicit_split_counts(self, tmp_path):
        manifest = generate_dataset(12, seed=0, out_dir=tmp_path,
                                    split_counts=(8, 2, 2))
        records = load_manifest(manifest)
        assert sum(1 for r in records if r["split"] == "train") == 8

    def test_split_counts_must_sum(self, tmp_path):
        with pytest.raises(SynthError):
            generate_dataset(12, seed=0, out_dir=tmp_path, split_counts=(8, 2, 3))

    def test_too_small_n_rejected(self, tmp_path):
        with pytest.raises(SynthError):
            generate_dataset(9, seed=0, out_dir=tmp_path)
