"""One-hot encoding of the five categorical clinical fields.

A missing field encodes as an all-zero block, so masking a field and
marking it missing are the same operation.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

FIELDS = ("breast_density", "mass_shape", "mass_margins", "calc_type", "calc_distribution")
CSV_HEADER = ("patient_id",) + FIELDS + ("label",)
LABELS = ("benign", "malignant")

DEFAULT_CATEGORIES = {
    "breast_density": ["1", "2", "3", "4"],
    "mass_shape": [
        "ROUND", "OVAL", "LOBULATED", "IRREGULAR", "ARCHITECTURAL_DISTORTION",
        "ASYMMETRIC_BREAST_TISSUE", "FOCAL_ASYMMETRIC_DENSITY", "LYMPH_NODE",
    ],
    "mass_margins": ["CIRCUMSCRIBED", "OBSCURED", "ILL_DEFINED", "MICROLOBULATED", "SPICULATED"],
    "calc_type": [
        "AMORPHOUS", "COARSE", "DYSTROPHIC", "EGGSHELL", "FINE_LINEAR_BRANCHING",
        "LARGE_RODLIKE", "LUCENT_CENTER", "MILK_OF_CALCIUM", "PLEOMORPHIC", "PUNCTATE",
        "ROUND_AND_REGULAR", "SKIN", "VASCULAR", "LUCENT_CENTERED",
    ],
    "calc_distribution": ["CLUSTERED", "LINEAR", "REGIONAL", "DIFFUSELY_SCATTERED", "SEGMENTAL"],
}


class EncodingError(ValueError):
    pass


class IngestError(ValueError):
    pass


class ClinicalVocabulary:
    """Ordered category lists for the five clinical fields."""

    def __init__(self, categories=None):
        categories = DEFAULT_CATEGORIES if categories is None else categories
        unknown = set(categories) - set(FIELDS)
        if unknown or set(categories) != set(FIELDS):
            raise ValueError(f"vocabulary must define exactly {FIELDS}; unknown={sorted(unknown)}")
        self.categories = {}
        for name in FIELDS:
            cats = [str(c) for c in categories[name]]
            if not cats:
                raise ValueError(f"field {name} has no categories")
            if len(set(cats)) != len(cats):
                raise ValueError(f"field {name} has duplicate categories")
            self.categories[name] = tuple(cats)
        self.sizes = tuple(len(self.categories[f]) for f in FIELDS)
        offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.slices = {f: slice(int(offsets[i]), int(offsets[i + 1])) for i, f in enumerate(FIELDS)}
        self.total_dim = int(offsets[-1])
        self._index = {f: {c: i for i, c in enumerate(self.categories[f])} for f in FIELDS}

    def __eq__(self, other):
        return isinstance(other, ClinicalVocabulary) and self.categories == other.categories

    def index(self, field_name, value):
        try:
            return self._index[field_name][value]
        except KeyError:
            raise EncodingError(f"unknown category {value!r} for field {field_name}") from None

    def block_masks(self):
        """[5, total_dim] 0/1 matrix; row f selects field f's one-hot block."""
        m = np.zeros((len(FIELDS), self.total_dim))
        for i, f in enumerate(FIELDS):
            m[i, self.slices[f]] = 1.0
        return m

    def to_json(self):
        return {f: list(self.categories[f]) for f in FIELDS}

    @classmethod
    def from_json(cls, obj):
        return cls(obj)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)


@dataclass
class ClinicalRecord:
    patient_id: str
    values: dict = field(default_factory=dict)  # field -> category string; absent/None = missing
    label: str = None  # "benign", "malignant" or None

    def get(self, field_name):
        return self.values.get(field_name)

    def masked(self, fields_to_drop):
        keep = {k: v for k, v in self.values.items() if k not in set(fields_to_drop)}
        return ClinicalRecord(self.patient_id, keep, self.label)

    @property
    def label_int(self):
        return None if self.label is None else LABELS.index(self.label)


def encode_record(record, vocab):
    """Concatenated one-hot vector of length ``vocab.total_dim``."""
    out = np.zeros(vocab.total_dim)
    for f in FIELDS:
        value = record.values.get(f)
        if value is None or value == "":
            continue
        out[vocab.slices[f].start + vocab.index(f, value)] = 1.0
    return out


def encode_records(records, vocab):
    if not records:
        return np.zeros((0, vocab.total_dim))
    return np.stack([encode_record(r, vocab) for r in records])


def mask_fields(encoded, vocab, fields_to_drop):
    """Zero the blocks of ``fields_to_drop`` in an encoded vector (or batch)."""
    out = np.array(encoded, dtype=np.float64, copy=True)
    for f in fields_to_drop:
        out[..., vocab.slices[f]] = 0.0
    return out


def load_clinical_csv(path, vocab):
    records = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise IngestError(f"{path}: header must be {','.join(CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise IngestError(f"{path}:{line}: expected {len(CSV_HEADER)} cells, got {len(row)}")
            pid = row[0].strip()
            if not pid:
                raise IngestError(f"{path}:{line}: empty patient_id")
            if pid in seen:
                raise IngestError(f"{path}:{line}: duplicate patient_id {pid!r}")
            seen.add(pid)
            values = {}
            for f, cell in zip(FIELDS, row[1:6]):
                cell = cell.strip()
                if cell:
                    try:
                        vocab.index(f, cell)
                    except EncodingError as exc:
                        raise IngestError(f"{path}:{line}: {exc}") from None
                    values[f] = cell
            label = row[6].strip() or None
            if label is not None and label not in LABELS:
                raise IngestError(f"{path}:{line}: label must be benign/malignant/empty, got {label!r}")
            records.append(ClinicalRecord(pid, values, label))
    return records


def write_clinical_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.patient_id] + [r.values.get(f) or "" for f in FIELDS] + [r.label or ""])
