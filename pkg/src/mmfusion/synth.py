"""Seeded synthetic (image, clinical, label) data with a tunable cross-modal interaction.

Generative process per sample:

* clinical fields drawn uniformly from the vocabulary; each category carries a
  fixed code in {-1, 0, +1} and ``z_clin`` is the mean code over the fields;
* ``z_img ~ U(-1, 1)`` sets the width of a Gaussian blob placed at a random
  position (sharp blob for ``z_img = 1``, diffuse for ``-1``) on a noisy
  background;
* ``P(malignant) = sigmoid(scale * (w_img*z_img + w_clin*z_clin + w_x*z_img*z_clin))``;
* with ``missing_clinical_rate`` every clinical field is blanked (the label
  still uses the hidden ``z_clin``).
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .clinical import (FIELDS, ClinicalRecord, ClinicalVocabulary, encode_records,
                       load_clinical_csv, write_clinical_csv, LABELS)
from .pnm import read_pgm, write_pgm

MANIFEST_FORMAT = "mmfusion-synth"


@dataclass
class SynthConfig:
    n_samples: int = 2000
    image_size: int = 32
    noise_std: float = 0.05
    interaction_weight: float = 0.7
    image_weight: float = 0.15
    clinical_weight: float = 0.15
    logit_scale: float = 20.0
    missing_clinical_rate: float = 0.0
    seed: int = 0
    split_fractions: tuple = (0.64, 0.16)
    bayes_draws: int = 1_000_000

    def __post_init__(self):
        w = np.array([self.interaction_weight, self.image_weight, self.clinical_weight], dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("modality weights must be non-negative with a positive sum")
        w = w / w.sum()
        self.interaction_weight, self.image_weight, self.clinical_weight = (float(v) for v in w)
        if not 0.0 <= self.missing_clinical_rate <= 1.0:
            raise ValueError("missing_clinical_rate must be in [0, 1]")
        if self.n_samples < 1 or self.image_size < 8:
            raise ValueError("n_samples >= 1 and image_size >= 8 required")
        self.split_fractions = tuple(float(f) for f in self.split_fractions)

    @classmethod
    def from_dict(cls, obj):
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        out = asdict(self)
        out["split_fractions"] = list(self.split_fractions)
        return out


@dataclass
class Dataset:
    ids: list
    images: np.ndarray  # [N, 1, H, W] in [0, 1]
    records: list
    clinical: np.ndarray  # [N, D_c]
    labels: np.ndarray  # int 0/1
    vocab: ClinicalVocabulary
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset([self.ids[i] for i in idx], self.images[idx],
                       [self.records[i] for i in idx], self.clinical[idx], self.labels[idx],
                       self.vocab, self.meta)

    def with_clinical(self, clinical):
        return Dataset(self.ids, self.images, self.records, clinical, self.labels, self.vocab, self.meta)

    def split(self, name):
        return self.subset(self.meta["splits"][name])

    def index_of(self, sample_id):
        try:
            return self.ids.index(sample_id)
        except ValueError:
            raise KeyError(f"unknown sample id {sample_id!r}") from None


def category_codes(vocab):
    """Fixed code per category: alternating +1/-1, with 0 for an odd trailing category."""
    codes = {}
    for f in FIELDS:
        n = len(vocab.categories[f])
        c = np.array([1.0 if i % 2 == 0 else -1.0 for i in range(n)])
        if n % 2:
            c[-1] = 0.0
        codes[f] = c
    return codes


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def label_probability(cfg, z_img, z_clin):
    logit = cfg.logit_scale * (cfg.image_weight * z_img + cfg.clinical_weight * z_clin
                               + cfg.interaction_weight * z_img * z_clin)
    return _sigmoid(logit)


def _draw_latents(cfg, vocab, n, rng):
    codes = category_codes(vocab)
    cats = np.stack([rng.integers(0, len(vocab.categories[f]), size=n) for f in FIELDS], axis=1)
    z_clin = np.mean([codes[f][cats[:, i]] for i, f in enumerate(FIELDS)], axis=0)
    z_img = rng.uniform(-1.0, 1.0, size=n)
    return cats, z_img, z_clin


def render_blob(z_img, size, center, noise, background=0.15, amplitude=0.75):
    """Gaussian blob whose width shrinks as ``z_img`` grows; ``noise`` is added as-is."""
    sigma = 1.0 + 1.25 * (1.0 - z_img)
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    img = background + amplitude * np.exp(-d2 / (2.0 * sigma ** 2)) + noise
    return np.clip(img, 0.0, 1.0)


def _z_clin_distribution(vocab):
    """Exact support and probabilities of z_clin under uniform categories."""
    codes = category_codes(vocab)
    dist = {0.0: 1.0}
    for f in FIELDS:
        nxt = {}
        c = codes[f]
        for s, p in dist.items():
            for v in c:
                k = round(s + v, 9)
                nxt[k] = nxt.get(k, 0.0) + p / len(c)
        dist = nxt
    support = np.array(sorted(dist)) / len(FIELDS)
    probs = np.array([dist[k] for k in sorted(dist)])
    return support, probs


def weighted_auc(scores, pos_w, neg_w):
    """AUC where each score carries fractional positive and negative mass; ties count 1/2."""
    order = np.argsort(scores, kind="mergesort")
    s, pw, nw = scores[order], pos_w[order], neg_w[order]
    uniq, start = np.unique(s, return_index=True)
    gp = np.add.reduceat(pw, start)
    gn = np.add.reduceat(nw, start)
    neg_below = np.cumsum(gn) - gn
    num = np.sum(gp * (neg_below + 0.5 * gn))
    return float(num / (gp.sum() * gn.sum()))


def bayes_ceilings(cfg, vocab, draws=None, seed=None):
    """Monte Carlo AUC of the Bayes-optimal score, given exact knowledge of the latents.

    Also reports the best achievable AUC from each modality alone (scores are
    the conditional malignancy probabilities, integrated exactly over the
    other modality's latent).
    """
    draws = cfg.bayes_draws if draws is None else draws
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA7E5]) if seed is None else seed)
    _, z_img, z_clin = _draw_latents(cfg, vocab, draws, rng)
    p = label_probability(cfg, z_img, z_clin)
    support, probs = _z_clin_distribution(vocab)
    img_score = label_probability(cfg, z_img[:, None], support[None, :]) @ probs
    clin_support = label_probability(cfg, np.linspace(-1, 1, 20001)[:, None], support[None, :]).mean(axis=0)
    clin_score = clin_support[np.searchsorted(support, np.round(z_clin, 12) - 1e-9)]
    observed = rng.random(draws) >= cfg.missing_clinical_rate
    full = np.where(observed, p, img_score)
    return {
        "auc": weighted_auc(full, p, 1.0 - p),
        "auc_latents_fully_observed": weighted_auc(p, p, 1.0 - p),
        "auc_image_only": weighted_auc(img_score, p, 1.0 - p),
        "auc_clinical_only": weighted_auc(clin_score, p, 1.0 - p),
        "draws": int(draws),
    }


def split(labels, fractions=(0.64, 0.16), seed=0):
    """Stratified, seeded split into train/val/test index arrays (test gets the remainder)."""
    f_train, f_val = fractions
    if f_train < 0 or f_val < 0 or f_train + f_val > 1.0 + 1e-12:
        raise ValueError("fractions must be non-negative and sum to <= 1")
    y = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    out = {"train": [], "val": [], "test": []}
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if idx.size < 2:
            raise ValueError(f"class {cls} has fewer than 2 samples")
        idx = rng.permutation(idx)
        n_tr = min(int(round(f_train * idx.size)), idx.size)
        n_va = min(int(round(f_val * idx.size)), idx.size - n_tr)
        out["train"].append(idx[:n_tr])
        out["val"].append(idx[n_tr:n_tr + n_va])
        out["test"].append(idx[n_tr + n_va:])
    return {k: np.sort(np.concatenate(v)).astype(np.int64) for k, v in out.items()}


def simulate(cfg, vocab=None):
    """Draw a dataset in memory (images quantised to 8 bits, as they are stored)."""
    vocab = vocab or ClinicalVocabulary()
    rng = np.random.default_rng(cfg.seed)
    n, size = cfg.n_samples, cfg.image_size
    cats, z_img, z_clin = _draw_latents(cfg, vocab, n, rng)
    margin = size // 4
    centers = rng.uniform(margin, size - 1 - margin, size=(n, 2))
    noise = rng.normal(0.0, cfg.noise_std, size=(n, size, size))
    p = label_probability(cfg, z_img, z_clin)
    labels = (rng.random(n) < p).astype(np.int64)
    missing = rng.random(n) < cfg.missing_clinical_rate

    images = np.empty((n, 1, size, size))
    records, ids = [], []
    for i in range(n):
        img = render_blob(z_img[i], size, centers[i], noise[i])
        images[i, 0] = np.clip(np.rint(img * 255.0), 0, 255) / 255.0
        sid = f"S{i:05d}"
        ids.append(sid)
        values = {} if missing[i] else {
            f: vocab.categories[f][cats[i, j]] for j, f in enumerate(FIELDS)}
        records.append(ClinicalRecord(sid, values, LABELS[labels[i]]))
    splits = split(labels, cfg.split_fractions, cfg.seed)
    meta = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "seed": int(cfg.seed),
        "config": cfg.to_dict(),
        "vocabulary": vocab.to_json(),
        "category_codes": {f: category_codes(vocab)[f].tolist() for f in FIELDS},
        "bayes": bayes_ceilings(cfg, vocab),
        "image_mean": float(images[splits["train"]].mean()) if splits["train"].size else float(images.mean()),
        "latents": {"z_img": z_img.tolist(), "z_clin": z_clin.tolist(),
                    "p_malignant": p.tolist(), "clinical_missing": missing.tolist()},
        "splits": {k: v.tolist() for k, v in splits.items()},
    }
    return Dataset(ids, images, records, encode_records(records, vocab), labels, vocab, meta)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def generate(cfg, out_dir, vocab=None):
    """Write ``images/*.pgm``, ``clinical.csv`` and ``manifest.json``; returns the Dataset."""
    ds = simulate(cfg, vocab)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    samples = []
    for i, sid in enumerate(ds.ids):
        rel = f"images/{sid}.pgm"
        write_pgm(os.path.join(out_dir, rel), ds.images[i, 0])
        samples.append({"id": sid, "image": rel, "label": int(ds.labels[i])})
    csv_path = os.path.join(out_dir, "clinical.csv")
    write_clinical_csv(csv_path, ds.records)
    manifest = dict(ds.meta)
    manifest["clinical_csv"] = "clinical.csv"
    manifest["clinical_csv_sha256"] = _sha256(csv_path)
    manifest["samples"] = samples
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    ds.meta = manifest
    return ds


def load_dataset(manifest_path):
    """Read a dataset written by :func:`generate`."""
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{manifest_path}: not a {MANIFEST_FORMAT} manifest")
    root = os.path.dirname(os.path.abspath(manifest_path))
    vocab = ClinicalVocabulary.from_json(manifest["vocabulary"])
    records = load_clinical_csv(os.path.join(root, manifest["clinical_csv"]), vocab)
    by_id = {r.patient_id: r for r in records}
    ids, imgs, recs, labels = [], [], [], []
    for s in manifest["samples"]:
        ids.append(s["id"])
        imgs.append(read_pgm(os.path.join(root, s["image"]))[None])
        if s["id"] not in by_id:
            raise ValueError(f"{manifest_path}: sample {s['id']} has no clinical row")
        recs.append(by_id[s["id"]])
        labels.append(int(s["label"]))
    images = np.stack(imgs) if imgs else np.zeros((0, 1, 0, 0))
    return Dataset(ids, images, recs, encode_records(recs, vocab), np.array(labels, dtype=np.int64),
                   vocab, manifest)
