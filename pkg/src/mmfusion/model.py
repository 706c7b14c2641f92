"""Image + clinical fusion classifier.

Pipeline: residual conv backbone -> per-modality ReLU projections to a shared
width ``d`` -> optional modality dropout -> fusion head -> token mean-pool ->
dense(hidden, ReLU, dropout) -> dense(2).
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .clinical import FIELDS, ClinicalVocabulary
from .train import he_init

FUSION_KINDS = (
    "concat",
    "co_attention",
    "cross_attention_img_from_clin",
    "cross_attention_clin_from_img",
    "image_only",
    "clinical_only",
)
IMAGE_TOKEN_MODES = ("global", "spatial")
CLINICAL_TOKEN_MODES = ("global", "per_field")

CHECKPOINT_MAGIC = b"MMFX"
CHECKPOINT_VERSION = 1


@dataclass
class FusionConfig:
    fusion_kind: str = "cross_attention_img_from_clin"
    d: int = 100
    d_k: int = None
    image_token_mode: str = "spatial"
    clinical_token_mode: str = "per_field"
    modality_dropout_p: float = 0.3
    classifier_hidden: int = 64
    classifier_dropout: float = 0.5
    backbone_channels: tuple = (8, 16, 32)
    image_size: int = 32
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.d_k is None:
            self.d_k = self.d
        if self.fusion_kind not in FUSION_KINDS:
            raise ValueError(f"fusion_kind must be one of {FUSION_KINDS}, got {self.fusion_kind!r}")
        if self.image_token_mode not in IMAGE_TOKEN_MODES:
            raise ValueError(f"image_token_mode must be one of {IMAGE_TOKEN_MODES}")
        if self.clinical_token_mode not in CLINICAL_TOKEN_MODES:
            raise ValueError(f"clinical_token_mode must be one of {CLINICAL_TOKEN_MODES}")
        if self.d < 1 or self.d_k < 1 or self.classifier_hidden < 1:
            raise ValueError("d, d_k and classifier_hidden must be >= 1")
        if not 0.0 <= self.modality_dropout_p < 1.0:
            raise ValueError("modality_dropout_p must be in [0, 1)")
        if not 0.0 <= self.classifier_dropout < 1.0:
            raise ValueError("classifier_dropout must be in [0, 1)")
        if len(self.backbone_channels) != 3:
            raise ValueError("backbone_channels needs (stem, block1, block2) widths")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")

    @classmethod
    def from_dict(cls, obj):
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        out = asdict(self)
        out["backbone_channels"] = list(self.backbone_channels)
        return out

    @property
    def uses_image(self):
        return self.fusion_kind != "clinical_only"

    @property
    def uses_clinical(self):
        return self.fusion_kind != "image_only"

    @property
    def uses_attention(self):
        return self.fusion_kind.startswith(("co_", "cross_"))

    @property
    def feature_grid(self):
        return self.image_size // 4


# -- functional building blocks ----------------------------------------------

def project(x, W, b):
    """ReLU(x @ W + b); the shared form of the image and clinical projections."""
    return ad.relu(ad.matmul_bias(x, W, b))


project_image = project
project_clinical = project


def fuse_concat(e, c):
    if e.shape[-1] != c.shape[-1]:
        raise ad.DimensionError(f"concat fusion needs equal widths, got {e.shape} and {c.shape}")
    return ad.concat([e, c], axis=-1)


def cross_attention(E, C, p, direction="image_from_clinical", eps=1e-5):
    """Single-head cross-attention with residual + layer norm.

    ``E`` is [..., n_e, d], ``C`` is [..., n_c, d]; ``p`` maps ``W_Q_e``,
    ``W_K_c``, ... and ``ln_e_gamma``/``ln_e_beta`` (or the ``_c`` pair) to
    tensors. Returns ``(updated, alpha)`` where only the query side is updated.
    """
    if E.shape[-1] != C.shape[-1]:
        raise ad.DimensionError(f"token widths differ: E{E.shape} vs C{C.shape}")
    if direction == "image_from_clinical":
        q_side, kv_side, q, kv = E, C, "e", "c"
    elif direction == "clinical_from_image":
        q_side, kv_side, q, kv = C, E, "c", "e"
    else:
        raise ValueError(f"unknown attention direction {direction!r}")
    W_Q, W_K, W_V, W_O = p[f"W_Q_{q}"], p[f"W_K_{kv}"], p[f"W_V_{kv}"], p[f"W_O_{q}"]
    if W_Q.shape[0] != q_side.shape[-1]:
        raise ad.DimensionError(f"W_Q_{q}{W_Q.shape} does not match token width {q_side.shape[-1]}")
    d_k = W_Q.shape[1]
    Q = ad.matmul_bias(q_side, W_Q)
    K = ad.matmul_bias(kv_side, W_K)
    V = ad.matmul_bias(kv_side, W_V)
    S = ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(d_k))
    alpha = ad.softmax_rows(S)
    ctx = ad.matmul(alpha, V)
    out = ad.layer_norm(ad.add(q_side, ad.matmul_bias(ctx, W_O)),
                        p[f"ln_{q}_gamma"], p[f"ln_{q}_beta"], eps)
    return out, alpha


def co_attention(E, C, p, eps=1e-5):
    """Both modalities attend to each other; returns ``(E_hat, C_hat, alpha_ec, alpha_ce)``."""
    E_hat, alpha_ec = cross_attention(E, C, p, "image_from_clinical", eps)
    C_hat, alpha_ce = cross_attention(E, C, p, "clinical_from_image", eps)
    return E_hat, C_hat, alpha_ec, alpha_ce


def modality_dropout_masks(n, p, rng):
    """Per-sample keep flags ``(keep_image, keep_clinical)``.

    With probability ``p`` exactly one modality (fair coin) is dropped;
    never both.
    """
    if p <= 0.0:
        return np.ones(n), np.ones(n)
    drop = rng.random(n) < p
    which = rng.random(n) < 0.5
    keep_img = np.where(drop & which, 0.0, 1.0)
    keep_clin = np.where(drop & ~which, 0.0, 1.0)
    return keep_img, keep_clin


def modality_dropout(e, c, p, rng):
    """Zero one modality's embedding per sample with probability ``p`` (leading axis = batch)."""
    keep_img, keep_clin = modality_dropout_masks(e.shape[0], p, rng)
    ki = keep_img.reshape((-1,) + (1,) * (e.ndim - 1))
    kc = keep_clin.reshape((-1,) + (1,) * (c.ndim - 1))
    return ad.mul(e, ki), ad.mul(c, kc)


# -- model -------------------------------------------------------------------

@dataclass
class ForwardResult:
    probs: np.ndarray
    logits: ad.Tensor
    feature_maps: ad.Tensor = None
    attention: dict = field(default_factory=dict)


class FusionModel:
    """Parameters plus configuration; ``forward`` builds the graph on demand."""

    def __init__(self, config, vocab=None, seed=0):
        self.config = config
        self.vocab = vocab or ClinicalVocabulary()
        self.params = {}
        self._block_masks = self.vocab.block_masks()
        rng = np.random.default_rng(seed)
        self._build(rng)

    def _add(self, name, shape, rng, fan_in=None, fill=None):
        if fill is not None:
            data = np.full(shape, float(fill))
        else:
            data = he_init(shape, fan_in, rng)
        self.params[name] = Parameter(name, data)

    def _build(self, rng):
        cfg = self.config
        d, dk = cfg.d, cfg.d_k
        if cfg.uses_image:
            c0, c1, c2 = cfg.backbone_channels
            self._add("stem.w", (c0, 1, 3, 3), rng, 9)
            self._add("stem.b", (c0,), rng, fill=0)
            for blk, (ci, co) in (("block1", (c0, c1)), ("block2", (c1, c2))):
                self._add(f"{blk}.conv1.w", (co, ci, 4, 4), rng, ci * 16)
                self._add(f"{blk}.conv1.b", (co,), rng, fill=0)
                self._add(f"{blk}.conv2.w", (co, co, 3, 3), rng, co * 9)
                self._add(f"{blk}.conv2.b", (co,), rng, fill=0)
                self._add(f"{blk}.skip.w", (co, ci, 2, 2), rng, ci * 4)
            self._add("proj_image.W", (c2, d), rng, c2)
            self._add("proj_image.b", (d,), rng, fill=0)
        if cfg.uses_clinical:
            D = self.vocab.total_dim
            self._add("proj_clin.W", (D, d), rng, D)
            self._add("proj_clin.b", (d,), rng, fill=0)
        kind = cfg.fusion_kind
        needed = []
        if kind in ("co_attention", "cross_attention_img_from_clin"):
            needed.append(("e", "c"))
        if kind in ("co_attention", "cross_attention_clin_from_img"):
            needed.append(("c", "e"))
        for q, kv in needed:
            self._add(f"attn.W_Q_{q}", (d, dk), rng, d)
            self._add(f"attn.W_K_{kv}", (d, dk), rng, d)
            self._add(f"attn.W_V_{kv}", (d, dk), rng, d)
            self._add(f"attn.W_O_{q}", (dk, d), rng, dk)
            self._add(f"attn.ln_{q}_gamma", (d,), rng, fill=1)
            self._add(f"attn.ln_{q}_beta", (d,), rng, fill=0)
        fused = self.fused_dim
        self._add("head.W1", (fused, cfg.classifier_hidden), rng, fused)
        self._add("head.b1", (cfg.classifier_hidden,), rng, fill=0)
        self._add("head.W2", (cfg.classifier_hidden, 2), rng, cfg.classifier_hidden)
        self._add("head.b2", (2,), rng, fill=0)

    @property
    def fused_dim(self):
        kind = self.config.fusion_kind
        return 2 * self.config.d if kind in ("concat", "co_attention") else self.config.d

    def attention_params(self):
        return {k[len("attn."):]: v for k, v in self.params.items() if k.startswith("attn.")}

    # -- pieces --

    def backbone(self, images):
        """Last conv feature maps A: [B, c2, u, v].

        Each block halves the resolution: 4x4/stride-2 conv, ReLU, 3x3 conv,
        plus a 2x2/stride-2 projection shortcut (channel count changes).
        """
        P = self.params
        with ad.scope("backbone.stem"):
            x = ad.relu(ad.conv2d(images, P["stem.w"], P["stem.b"], stride=1, padding=1))
        for blk in ("block1", "block2"):
            with ad.scope(f"backbone.{blk}"):
                h = ad.relu(ad.conv2d(x, P[f"{blk}.conv1.w"], P[f"{blk}.conv1.b"], stride=2, padding=1))
                h = ad.conv2d(h, P[f"{blk}.conv2.w"], P[f"{blk}.conv2.b"], stride=1, padding=1)
                skip = ad.conv2d(x, P[f"{blk}.skip.w"], None, stride=2, padding=0)
                x = ad.relu(ad.add(h, skip))
        return x

    def image_tokens(self, A, mode):
        W, b = self.params["proj_image.W"], self.params["proj_image.b"]
        with ad.scope("proj_image"):
            if mode == "global":
                e = project_image(ad.global_avg_pool(A), W, b)
                return ad.reshape(e, (e.shape[0], 1, e.shape[1]))
            n, c, u, v = A.shape
            cells = ad.transpose(ad.reshape(A, (n, c, u * v)), (0, 2, 1))
            return project_image(cells, W, b)

    def clinical_tokens(self, clinical, mode):
        W, b = self.params["proj_clin.W"], self.params["proj_clin.b"]
        clinical = np.asarray(clinical, dtype=np.float64)
        with ad.scope("proj_clin"):
            if mode == "global":
                c = project_clinical(ad.Tensor(clinical), W, b)
                return ad.reshape(c, (c.shape[0], 1, c.shape[1]))
            blocks = clinical[:, None, :] * self._block_masks[None]
            return project_clinical(ad.Tensor(blocks), W, b)

    def forward(self, images, clinical, mode="eval", rng=None, clinical_keep=None):
        """Class probabilities [B, 2] plus cached logits, feature maps and attention.

        ``images`` is [B, 1, H, W], ``clinical`` the encoded [B, D_c] matrix.
        Train mode needs ``rng`` for modality and classifier dropout.
        """
        cfg = self.config
        train = mode == "train"
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        if train and rng is None:
            raise ValueError("train mode needs an rng")
        clinical = np.asarray(clinical, dtype=np.float64)
        n = clinical.shape[0]
        if cfg.uses_image:
            images = np.asarray(images, dtype=np.float64)
            if images.shape[0] != n:
                raise ad.DimensionError(f"batch sizes differ: images {images.shape[0]}, clinical {n}")
        if clinical.shape[1] != self.vocab.total_dim:
            raise ad.DimensionError(f"clinical width {clinical.shape[1]} != vocabulary {self.vocab.total_dim}")

        A = self.backbone(ad.Tensor(images)) if cfg.uses_image else None
        kind = cfg.fusion_kind
        attention = {}
        img_mode = cfg.image_token_mode if cfg.uses_attention else "global"
        clin_mode = cfg.clinical_token_mode if cfg.uses_attention else "global"
        E = self.image_tokens(A, img_mode) if cfg.uses_image else None
        C = self.clinical_tokens(clinical, clin_mode) if cfg.uses_clinical else None
        if train and cfg.uses_image and cfg.uses_clinical and cfg.modality_dropout_p > 0:
            E, C = modality_dropout(E, C, cfg.modality_dropout_p, rng)

        with ad.scope("fusion"):
            if kind == "concat":
                z = fuse_concat(ad.reshape(E, (n, cfg.d)), ad.reshape(C, (n, cfg.d)))
            elif kind == "image_only":
                z = ad.reshape(E, (n, cfg.d))
            elif kind == "clinical_only":
                z = ad.reshape(C, (n, cfg.d))
            else:
                p = self.attention_params()
                if kind == "co_attention":
                    E_hat, C_hat, a_ec, a_ce = co_attention(E, C, p, cfg.ln_eps)
                    attention = {"alpha_ec": a_ec.data, "alpha_ce": a_ce.data}
                    z = ad.concat([ad.mean(E_hat, axis=1), ad.mean(C_hat, axis=1)], axis=-1)
                elif kind == "cross_attention_img_from_clin":
                    E_hat, a = cross_attention(E, C, p, "image_from_clinical", cfg.ln_eps)
                    attention = {"alpha_ec": a.data}
                    z = ad.mean(E_hat, axis=1)
                else:
                    C_hat, a = cross_attention(E, C, p, "clinical_from_image", cfg.ln_eps)
                    attention = {"alpha_ce": a.data}
                    z = ad.mean(C_hat, axis=1)

        P = self.params
        with ad.scope("head"):
            h = ad.relu(ad.matmul_bias(z, P["head.W1"], P["head.b1"]))
            if train and cfg.classifier_dropout > 0:
                keep = 1.0 - cfg.classifier_dropout
                h = ad.mul(h, (rng.random(h.shape) < keep) / keep)
            logits = ad.matmul_bias(h, P["head.W2"], P["head.b2"])
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        return ForwardResult(probs, logits, A, attention)

    def loss(self, images, clinical, labels, mode="eval", rng=None):
        res = self.forward(images, clinical, mode=mode, rng=rng)
        return ad.cross_entropy(res.logits, labels), res

    def predict_proba(self, images, clinical, batch_size=256):
        """Malignant-class probability for every sample, eval mode, no tape."""
        clinical = np.asarray(clinical, dtype=np.float64)
        out = []
        for s in range(0, clinical.shape[0], batch_size):
            imgs = None if images is None else images[s:s + batch_size]
            out.append(self.forward(imgs, clinical[s:s + batch_size]).probs[:, 1])
        return np.concatenate(out) if out else np.zeros(0)

    # -- state --

    def state(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state):
        for k, p in self.params.items():
            p.data[...] = state[k]

    def trainable(self):
        return {k: p for k, p in self.params.items() if p.trainable}

    def save(self, path):
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


# -- checkpoint --------------------------------------------------------------

def save_checkpoint(path, model):
    """Little-endian: magic, u32 version, u32-length JSON config, parameter table."""
    header = json.dumps({
        "model": model.config.to_dict(),
        "vocabulary": model.vocab.to_json(),
        "fields": list(FIELDS),
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return _parse_checkpoint(path, buf)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None


def _parse_checkpoint(path, buf):
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        return v

    version = u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    n = u32()
    header = json.loads(buf[pos:pos + n].decode("utf-8"))
    pos += n
    config = FusionConfig.from_dict(header["model"])
    model = FusionModel(config, ClinicalVocabulary.from_json(header["vocabulary"]))
    count = u32()
    seen = set()
    for _ in range(count):
        ln = u32()
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        rank = u32()
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        if name not in model.params or model.params[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: parameter {name} {tuple(shape)} does not fit the model")
        model.params[name].data[...] = data
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return model
