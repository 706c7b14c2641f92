import filecmp
import os

import numpy as np
import pytest

from mmfusion.clinical import FIELDS, ClinicalVocabulary
from mmfusion.metrics import auc_mann_whitney
from mmfusion.model import FusionConfig, FusionModel
from mmfusion.pnm import read_pnm, read_pgm, write_pgm, write_ppm
from mmfusion.synth import (SynthConfig, _z_clin_distribution, bayes_ceilings, category_codes,
                            generate, label_probability, load_dataset, render_blob, simulate, split)
from mmfusion.train import TrainConfig, train

VOCAB = ClinicalVocabulary()


def quadrature_bayes_auc(cfg, grid=4001):
    """Bayes AUC by midpoint quadrature over z_img and exact enumeration of z_clin.

    z_clin's law is rebuilt here from scratch by enumerating every category
    combination, independent of the generator's own convolution.
    """
    codes = category_codes(VOCAB)
    vals = np.zeros(1)
    for f in FIELDS:
        vals = (vals[:, None] + codes[f][None, :]).ravel()
    vals = vals / len(FIELDS)
    zc, counts = np.unique(np.round(vals, 12), return_counts=True)
    wc = counts / counts.sum()
    zi = -1.0 + (np.arange(grid) + 0.5) * (2.0 / grid)
    p = label_probability(cfg, zi[:, None], zc[None, :]).ravel()
    w = np.broadcast_to(wc[None, :] / grid, (grid, zc.size)).ravel()
    order = np.argsort(p)
    p, w = p[order], w[order]
    pos, neg = w * p, w * (1.0 - p)
    # P(score_pos > score_neg); quadrature points are almost surely distinct
    neg_below = np.cumsum(neg) - neg
    return float(np.sum(pos * neg_below) / (pos.sum() * neg.sum()))


class TestConfig:
    def test_weights_normalised(self):
        c = SynthConfig(interaction_weight=2, image_weight=1, clinical_weight=1)
        assert (c.interaction_weight, c.image_weight, c.clinical_weight) == (0.5, 0.25, 0.25)

    def test_invalid(self):
        with pytest.raises(ValueError):
            SynthConfig(interaction_weight=0, image_weight=0, clinical_weight=0)
        with pytest.raises(ValueError):
            SynthConfig(missing_clinical_rate=1.5)
        with pytest.raises(ValueError, match="unknown"):
            SynthConfig.from_dict({"samples": 3})

    def test_round_trip(self):
        c = SynthConfig(seed=4, n_samples=10)
        assert SynthConfig.from_dict(c.to_dict()) == c


class TestLatents:
    def test_codes_balanced(self):
        codes = category_codes(VOCAB)
        for f in FIELDS:
            assert abs(codes[f].sum()) <= 0.0 + 1e-12
            assert set(codes[f]) <= {-1.0, 0.0, 1.0}

    def test_z_clin_distribution_sums_to_one(self):
        support, probs = _z_clin_distribution(VOCAB)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert support.min() >= -1 and support.max() <= 1
        assert float(support @ probs) == pytest.approx(0.0, abs=1e-12)

    def test_blob_sharpness(self):
        sharp = render_blob(1.0, 32, (16, 16), 0.0)
        diffuse = render_blob(-1.0, 32, (16, 16), 0.0)
        assert sharp[16, 16] == pytest.approx(0.9)
        assert sharp[16, 20] < diffuse[16, 20]
        assert render_blob(0.0, 32, (16, 16), np.full((32, 32), 5.0)).max() == 1.0


class TestBayes:
    @pytest.mark.parametrize("weights", [(0.7, 0.15, 0.15), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)])
    def test_monte_carlo_matches_quadrature(self, weights):
        cfg = SynthConfig(interaction_weight=weights[0], image_weight=weights[1],
                          clinical_weight=weights[2])
        mc = bayes_ceilings(cfg, VOCAB, draws=1_000_000)["auc"]
        assert mc == pytest.approx(quadrature_bayes_auc(cfg), abs=3e-3)

    def test_pure_interaction(self):
        cfg = SynthConfig(interaction_weight=1.0, image_weight=0.0, clinical_weight=0.0)
        b = bayes_ceilings(cfg, VOCAB, draws=400_000)
        assert b["auc"] > 0.9
        assert abs(b["auc_image_only"] - 0.5) < 0.01
        assert abs(b["auc_clinical_only"] - 0.5) < 0.01

    def test_image_only_process(self):
        cfg = SynthConfig(interaction_weight=0.0, image_weight=1.0, clinical_weight=0.0)
        b = bayes_ceilings(cfg, VOCAB, draws=200_000)
        assert abs(b["auc_clinical_only"] - 0.5) < 0.01
        assert b["auc_image_only"] == pytest.approx(b["auc"], abs=1e-12)

    def test_missing_clinical_lowers_ceiling(self):
        full = bayes_ceilings(SynthConfig(), VOCAB, draws=200_000)
        half = bayes_ceilings(SynthConfig(missing_clinical_rate=0.5), VOCAB, draws=200_000)
        assert half["auc"] < full["auc"]


class TestSplit:
    def test_all_train(self):
        s = split(np.arange(20) % 2, (1.0, 0.0))
        assert s["train"].size == 20 and s["val"].size == 0 and s["test"].size == 0

    def test_partition_and_stratification(self):
        rng = np.random.default_rng(0)
        y = (rng.random(2000) < 0.37).astype(int)
        s = split(y, (0.64, 0.16), seed=3)
        allidx = np.concatenate(list(s.values()))
        assert np.array_equal(np.sort(allidx), np.arange(2000))
        for part in s.values():
            assert abs(y[part].mean() - y.mean()) <= 0.02
        assert s["train"].size == pytest.approx(1280, abs=2)

    def test_seeded(self):
        y = np.arange(100) % 2
        a, b = split(y, seed=1), split(y, seed=1)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not np.array_equal(a["train"], split(y, seed=2)["train"])

    def test_errors(self):
        with pytest.raises(ValueError, match="fewer than 2"):
            split([0, 0, 0, 1])
        with pytest.raises(ValueError):
            split([0, 1, 0, 1], (0.9, 0.2))


class TestGenerate:
    def test_byte_identical(self, tmp_path):
        cfg = SynthConfig(n_samples=30, seed=11, bayes_draws=1000)
        generate(cfg, tmp_path / "a")
        generate(cfg, tmp_path / "b")
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        names = sorted(os.listdir(tmp_path / "a" / "images"))
        assert len(names) == 30
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / "images", tmp_path / "b" / "images",
                                               names, shallow=False)
        assert not mismatch and not errors
        for f in ("manifest.json", "clinical.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert not cmp.left_only and not cmp.right_only

    def test_different_seed_differs(self):
        a = simulate(SynthConfig(n_samples=20, seed=0, bayes_draws=1000))
        b = simulate(SynthConfig(n_samples=20, seed=1, bayes_draws=1000))
        assert not np.array_equal(a.images, b.images)

    def test_load_round_trip(self, tmp_path):
        cfg = SynthConfig(n_samples=25, seed=2, missing_clinical_rate=0.3, bayes_draws=1000)
        ds = generate(cfg, tmp_path)
        back = load_dataset(tmp_path / "manifest.json")
        assert back.ids == ds.ids
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.clinical, ds.clinical)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.meta["config"]["seed"] == 2
        assert set(back.meta["bayes"]) >= {"auc", "auc_image_only", "auc_clinical_only"}

    def test_missing_rows_are_blank(self):
        ds = simulate(SynthConfig(n_samples=200, seed=0, missing_clinical_rate=1.0, bayes_draws=1000))
        assert not np.any(ds.clinical)

    def test_labels_follow_probabilities(self):
        ds = simulate(SynthConfig(n_samples=3000, seed=5, bayes_draws=1000))
        p = np.array(ds.meta["latents"]["p_malignant"])
        assert abs(ds.labels.mean() - p.mean()) < 0.03
        assert auc_mann_whitney(p, ds.labels) > 0.85

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError, match="manifest"):
            load_dataset(tmp_path / "m.json")

    def test_clinical_only_model_is_at_chance_without_clinical_signal(self):
        cfg_m = FusionConfig(fusion_kind="clinical_only", d=16, classifier_hidden=16)
        aucs = []
        for seed in range(3):
            ds = simulate(SynthConfig(n_samples=2000, seed=seed, interaction_weight=0.0,
                                      clinical_weight=0.0, image_weight=1.0, bayes_draws=1000))
            tr, va, te = ds.split("train"), ds.split("val"), ds.split("test")
            m, _ = train(FusionModel(cfg_m, seed=seed), tr, va,
                         TrainConfig(lr=1e-2, max_epochs=5, seed=seed, hflip=False,
                                     rotation_deg=0.0, random_crop=False))
            aucs.append(auc_mann_whitney(m.predict_proba(te.images, te.clinical), te.labels))
        assert abs(np.mean(aucs) - 0.5) <= 0.05, aucs


class TestPnm:
    def test_pgm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(5, 7)).astype(np.uint8)
        write_pgm(tmp_path / "x.pgm", img)
        raw = (tmp_path / "x.pgm").read_bytes()
        assert raw.startswith(b"P5\n7 5\n255\n") and len(raw) == 11 + 35
        np.testing.assert_array_equal(read_pnm(tmp_path / "x.pgm"), img)
        assert read_pgm(tmp_path / "x.pgm").max() <= 1.0

    def test_ppm_round_trip(self, tmp_path):
        rgb = np.random.default_rng(1).uniform(size=(4, 3, 3))
        write_ppm(tmp_path / "x.ppm", rgb)
        back = read_pnm(tmp_path / "x.ppm")
        assert back.shape == (4, 3, 3)
        assert np.max(np.abs(back / 255.0 - rgb)) <= 0.5 / 255 + 1e-12

    def test_truncated(self, tmp_path):
        (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(10))
        with pytest.raises(ValueError, match="expected 16"):
            read_pnm(tmp_path / "t.pgm")

    def test_not_pnm(self, tmp_path):
        (tmp_path / "t.pgm").write_bytes(b"GIF89a")
        with pytest.raises(ValueError, match="not a binary"):
            read_pnm(tmp_path / "t.pgm")
