"""Optimisation loop: Adam, plateau LR decay, early stopping, L2, augmentation."""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 15
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    min_delta: float = 1e-6
    l2_coeff: float = 1e-4
    seed: int = 0
    hflip: bool = True
    rotation_deg: float = 30.0
    random_crop: bool = True
    crop_margin: int = 4
    bait_switch_fraction: float = 0.1
    freeze_epochs: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    restore_best: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("lr >= 0, batch_size >= 1 and max_epochs >= 0 required")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0.0 <= self.bait_switch_fraction <= 1.0:
            raise ValueError("bait_switch_fraction must be in [0, 1]")

    @classmethod
    def from_dict(cls, obj):
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)


def he_init(shape, fan_in, rng):
    """Normal(0, sqrt(2 / fan_in)) samples of the given shape."""
    if fan_in is None or fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, skip=()):
    """In-place bias-corrected Adam update of every parameter in ``grads``.

    ``params`` maps names to Parameters. Names in ``skip`` are left untouched
    (their moments are not advanced either).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if name in skip:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def is_weight(name):
    """Kernels and weight matrices receive L2; biases and layer-norm params do not."""
    return name.rsplit(".", 1)[-1][:1] in ("w", "W")


def lr_schedule_update(history, lr, cfg):
    """Decide the learning rate after the latest validation loss in ``history``.

    Replays the history: a loss counts as an improvement when it beats the
    best so far by more than ``cfg.min_delta``. After ``plateau_patience``
    non-improving epochs the rate is multiplied by ``plateau_factor`` and
    that counter resets; after ``early_stop_patience`` the run stops.
    """
    if not history:
        raise ValueError("history must be nonempty")
    best = np.inf
    wait_plateau = wait_stop = 0
    decayed = False
    for v in history:
        decayed = False
        if v < best - cfg.min_delta:
            best = v
            wait_plateau = wait_stop = 0
        else:
            wait_plateau += 1
            wait_stop += 1
            if wait_plateau >= cfg.plateau_patience:
                decayed = True
                wait_plateau = 0
    new_lr = lr * cfg.plateau_factor if decayed else lr
    return new_lr, wait_stop >= cfg.early_stop_patience


def augment_image(img, rng, hflip=True, rotation_deg=30.0, crop_margin=4):
    """Random flip, bilinear rotation (zero fill) and crop-then-pad of a [1, h, w] image.

    The crop keeps an (h - margin) x (w - margin) window at a random offset
    and pastes it back centred, so the output shape is unchanged.
    """
    x = np.asarray(img, dtype=np.float64)[0]
    h, w = x.shape
    if hflip and rng.random() < 0.5:
        x = x[:, ::-1]
    if rotation_deg:
        theta = rng.uniform(-rotation_deg, rotation_deg)
        if theta != 0.0:
            x = ndimage.rotate(x, theta, reshape=False, order=1, mode="constant", cval=0.0)
    if crop_margin:
        oy, ox = (int(v) for v in rng.integers(0, crop_margin + 1, size=2))
        c = crop_margin // 2
        out = np.zeros_like(x)
        out[c:c + h - crop_margin, c:c + w - crop_margin] = \
            x[oy:oy + h - crop_margin, ox:ox + w - crop_margin]
        x = out
    return np.ascontiguousarray(x)[None]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def evaluate_loss(model, data, batch_size=256):
    """Mean eval-mode cross-entropy and malignant probabilities over ``data``."""
    n = len(data.labels)
    total = 0.0
    probs = []
    for s in range(0, n, batch_size):
        sl = slice(s, s + batch_size)
        imgs = data.images[sl] if data.images is not None else None
        loss, res = model.loss(imgs, data.clinical[sl], data.labels[sl])
        total += loss.item() * len(data.labels[sl])
        probs.append(res.probs[:, 1])
    return total / max(n, 1), np.concatenate(probs) if probs else np.zeros(0)


def _val_auc(scores, labels):
    from .metrics import auc_roc, UndefinedMetricError
    try:
        return auc_roc(scores, labels).auc
    except UndefinedMetricError:
        return float("nan")


def train(model, train_set, val_set, cfg, callback=None):
    """Fit ``model`` in place; returns ``(model, history)``.

    ``train_set``/``val_set`` expose ``images`` [N,1,H,W], ``clinical`` [N,D_c]
    and integer ``labels``. History rows hold epoch, train_loss, val_loss,
    val_auc and lr.
    """
    shuffle_ss, aug_ss, drop_ss, bait_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)
    drop_rng = np.random.default_rng(drop_ss)
    bait_rng = np.random.default_rng(bait_ss)

    mcfg = model.config
    n = len(train_set.labels)
    images = train_set.images
    clinical = np.array(train_set.clinical, dtype=np.float64, copy=True)
    labels = np.asarray(train_set.labels, dtype=np.int64)
    if mcfg.uses_image and mcfg.uses_clinical and cfg.bait_switch_fraction > 0:
        k = int(round(cfg.bait_switch_fraction * n))
        clinical[bait_rng.permutation(n)[:k]] = 0.0
    augment = mcfg.uses_image and (cfg.hflip or cfg.rotation_deg or (cfg.random_crop and cfg.crop_margin))

    params = model.trainable()
    backbone_names = {k for k in params if k.startswith(("stem.", "block"))}
    state = AdamState(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    lr = cfg.lr
    history = []
    val_losses = []
    best_loss, best_state = np.inf, None

    for epoch in range(1, cfg.max_epochs + 1):
        skip = backbone_names if epoch <= cfg.freeze_epochs else ()
        running = 0.0
        for idx in _batches(n, cfg.batch_size, shuffle_rng):
            imgs = None
            if mcfg.uses_image:
                imgs = images[idx]
                if augment:
                    imgs = np.stack([
                        augment_image(im, aug_rng, cfg.hflip, cfg.rotation_deg,
                                      cfg.crop_margin if cfg.random_crop else 0)
                        for im in imgs])
            with ad.Tape() as tape:
                loss, _ = model.loss(imgs, clinical[idx], labels[idx], mode="train", rng=drop_rng)
            grads = ad.backward(loss, tape, params)
            if cfg.l2_coeff:
                for name, g in grads.items():
                    if is_weight(name):
                        g += cfg.l2_coeff * params[name].data
            adam_step(params, grads, state, lr, skip=skip)
            running += loss.item() * len(idx)
        train_loss = running / n
        val_loss, val_scores = evaluate_loss(model, val_set)
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_auc": _val_auc(val_scores, val_set.labels),
            "lr": lr,
        }
        history.append(row)
        if callback is not None:
            callback(row)
        log.debug("epoch %d train=%.4f val=%.4f auc=%.4f lr=%.2g", epoch, train_loss,
                  val_loss, row["val_auc"], lr)
        if val_loss < best_loss - cfg.min_delta:
            best_loss, best_state = val_loss, model.state()
        val_losses.append(val_loss)
        lr, stop = lr_schedule_update(val_losses, lr, cfg)
        if stop:
            break
    if cfg.restore_best and best_state is not None:
        model.load_state(best_state)
    return model, history
