"""Grad-CAM, exact and kernel Shapley values, and LIME surrogates.

Shapley and LIME work on black-box value functions. For the fusion model,
:class:`MaskableModel` builds them: masking clinical field ``j`` zeroes its
one-hot block (identical to the field being missing) and masking image
segment ``s`` fills it with the training-set mean intensity.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .clinical import FIELDS
from .pnm import write_ppm


class ExplainError(ValueError):
    pass


# -- Grad-CAM ----------------------------------------------------------------

@dataclass
class GradCamMap:
    raw: np.ndarray  # [u, v], non-negative
    class_index: int
    upsampled: np.ndarray  # [h, w]
    channel_weights: np.ndarray  # alpha_k
    score: float  # pre-softmax y^c


def upsample_bilinear(m, shape):
    """Bilinear resize with pixel-area alignment; preserves non-negativity."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape == tuple(shape):
        return m.copy()
    zoom = (shape[0] / m.shape[0], shape[1] / m.shape[1])
    out = ndimage.zoom(m, zoom, order=1, mode="nearest", grid_mode=True)
    return out[: shape[0], : shape[1]]


def grad_cam_from(forward_fn, class_index, out_shape=None):
    """Grad-CAM for any differentiable ``forward_fn``.

    ``forward_fn()`` is called under a fresh tape and must return
    ``(feature_maps, scores)``: the target conv activations [K, u, v] (or
    [1, K, u, v]) and pre-softmax class scores [n_classes] (or [1, n]).
    """
    with ad.Tape() as tape:
        A, scores = forward_fn()
        n_classes = scores.shape[-1]
        if not 0 <= class_index < n_classes:
            raise ExplainError(f"class index {class_index} out of range for {n_classes} classes")
        onehot = np.zeros(scores.shape)
        onehot[..., class_index] = 1.0
        y = ad.sum(ad.mul(scores, onehot))
    tape.backward(y)
    grads = tape.grad(A)
    acts = A.data
    if acts.ndim == 4:
        acts, grads = acts[0], grads[0]
    u, v = acts.shape[-2:]
    weights = grads.sum(axis=(1, 2)) / (u * v)
    raw = np.maximum(np.tensordot(weights, acts, axes=1), 0.0)
    up = upsample_bilinear(raw, out_shape) if out_shape is not None else raw.copy()
    return GradCamMap(raw, int(class_index), up, weights, float(y.item()))


def grad_cam(model, image, clinical, class_index=1):
    """Grad-CAM on the last backbone conv block for one sample ([1, H, W] image)."""
    if not model.config.uses_image:
        raise ExplainError("model has no image branch")
    image = np.asarray(image, dtype=np.float64)
    clinical = np.asarray(clinical, dtype=np.float64)

    def fwd():
        res = model.forward(image[None], clinical[None])
        return res.feature_maps, res.logits

    return grad_cam_from(fwd, class_index, out_shape=image.shape[-2:])


def overlay(gray, heat, alpha=0.6):
    """RGB blend: ``(1 - alpha*h) * gray + alpha*h * red`` with ``h = heat / max(heat)``."""
    gray = np.asarray(gray, dtype=np.float64)
    hmax = float(np.max(heat))
    h = np.asarray(heat) / hmax if hmax > 0 else np.zeros_like(gray)
    a = (alpha * h)[..., None]
    rgb = (1.0 - a) * gray[..., None] + a * np.array([1.0, 0.0, 0.0])
    return np.clip(rgb, 0.0, 1.0)


def write_heatmap_csv(path, m):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(m):
            w.writerow([repr(float(x)) for x in row])


def write_overlay_ppm(path, gray, heat, alpha=0.6):
    write_ppm(path, overlay(gray, heat, alpha))


# -- Shapley -----------------------------------------------------------------

@dataclass
class ShapleyAttribution:
    phi: np.ndarray
    f_x: float
    f_baseline: float
    method: str
    baseline: str = "all features masked"
    n_samples: int = None
    seed: int = None
    feature_names: list = None

    @property
    def efficiency_residual(self):
        return float(np.sum(self.phi) - (self.f_x - self.f_baseline))


def _mask_tuple(bits, M):
    return tuple(bool(bits >> i & 1) for i in range(M))


def coalition_values(value_fn, M, batch_fn=None):
    """Evaluate all 2^M coalitions; index ``s`` has feature ``i`` present iff bit ``i`` is set."""
    masks = np.array([_mask_tuple(s, M) for s in range(2 ** M)], dtype=bool)
    if batch_fn is not None:
        return np.asarray(batch_fn(masks), dtype=np.float64)
    return np.array([float(value_fn(tuple(m))) for m in masks])


def shapley_exact(value_fn, M, batch_fn=None, max_features=20, feature_names=None):
    """Exact Shapley values by enumerating every coalition.

    ``value_fn(mask)`` takes a tuple of M booleans (True = feature present)
    and returns a float; ``batch_fn(masks)`` may be given instead to score an
    [n, M] boolean array at once.
    """
    if M > max_features:
        raise ExplainError(f"exact Shapley over {M} features needs 2^{M} evaluations; use kernel_shap")
    v = coalition_values(value_fn, M, batch_fn)
    sizes = np.array([bin(s).count("1") for s in range(2 ** M)])
    weight = np.array([math.factorial(k) * math.factorial(M - k - 1) / math.factorial(M)
                       if k < M else 0.0 for k in range(M + 1)])
    phi = np.zeros(M)
    S = np.arange(2 ** M)
    for i in range(M):
        bit = 1 << i
        without = S[(S & bit) == 0]
        phi[i] = np.sum(weight[sizes[without]] * (v[without | bit] - v[without]))
    return ShapleyAttribution(phi, float(v[-1]), float(v[0]), "exact", feature_names=feature_names)


def shapley_kernel_weight(M, s):
    return (M - 1) / (math.comb(M, s) * s * (M - s))


def kernel_shap(value_fn, M, n_samples, seed=0, batch_fn=None, feature_names=None, exhaustive=None):
    """KernelSHAP: Shapley-kernel weighted least squares with the efficiency constraint.

    With ``n_samples >= 2^M - 2`` every proper, non-empty coalition is used
    once at its exact kernel weight. Otherwise coalition sizes are drawn in
    proportion to their total kernel weight, members uniformly, and each
    distinct coalition drawn enters the regression once at its kernel weight.
    ``exhaustive`` forces either route (``False`` samples even when
    enumeration would be affordable).
    """
    if n_samples < M + 2:
        raise ExplainError(f"kernel_shap needs n_samples >= M + 2 = {M + 2}")
    if M < 2:
        raise ExplainError("kernel_shap needs at least two features")
    rng = np.random.default_rng(seed)
    if exhaustive is None:
        exhaustive = n_samples >= 2 ** M - 2
    if exhaustive:
        coalitions = np.array([_mask_tuple(s, M) for s in range(1, 2 ** M - 1)], dtype=bool)
        weights = np.array([shapley_kernel_weight(M, int(c.sum())) for c in coalitions])
    else:
        sizes = np.arange(1, M)
        q = np.array([(M - 1) / (s * (M - s)) for s in sizes])
        q /= q.sum()
        drawn = rng.choice(sizes, size=n_samples, p=q)
        rows = np.zeros((n_samples, M), dtype=bool)
        for r, s in enumerate(drawn):
            rows[r, rng.choice(M, size=s, replace=False)] = True
        coalitions = np.unique(rows, axis=0)
        weights = np.array([shapley_kernel_weight(M, int(c.sum())) for c in coalitions])
    ends = np.array([np.zeros(M, dtype=bool), np.ones(M, dtype=bool)])
    everything = np.concatenate([ends, coalitions])
    if batch_fn is not None:
        vals = np.asarray(batch_fn(everything), dtype=np.float64)
    else:
        vals = np.array([float(value_fn(tuple(m))) for m in everything])
    f0, fx = vals[0], vals[1]
    y = vals[2:] - f0
    Z = coalitions.astype(np.float64)
    total = fx - f0
    # eliminate the last coefficient through sum(phi) == total
    A = Z[:, :-1] - Z[:, -1:]
    b = y - Z[:, -1] * total
    sw = np.sqrt(weights)
    sol, _, rank, _ = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)
    if rank < M - 1:
        raise ExplainError("KernelSHAP regression is singular; increase n_samples")
    phi = np.append(sol, total - sol.sum())
    return ShapleyAttribution(phi, float(fx), float(f0), "kernel",
                              n_samples=int(len(coalitions) if exhaustive else n_samples),
                              seed=seed, feature_names=feature_names)


def global_importance(attributions, feature_names=None):
    """Features ranked by mean |phi| (descending; ties keep feature order)."""
    if not attributions:
        raise ExplainError("no attributions to aggregate")
    M = len(attributions[0].phi)
    if any(len(a.phi) != M for a in attributions):
        raise ExplainError("attributions disagree on the number of features")
    names = feature_names or attributions[0].feature_names or [str(i) for i in range(M)]
    means = np.mean([np.abs(a.phi) for a in attributions], axis=0)
    order = sorted(range(M), key=lambda i: -means[i])
    return [(names[i], float(means[i])) for i in order]


# -- LIME --------------------------------------------------------------------

@dataclass
class LimeExplanation:
    intercept: float
    coefficients: np.ndarray
    selected: list
    kernel_width: float
    n_perturbations: int
    r2: float
    K: int
    seed: int
    ridge: float
    samples: np.ndarray = field(repr=False, default=None)
    targets: np.ndarray = field(repr=False, default=None)
    weights: np.ndarray = field(repr=False, default=None)

    def predict(self, Z):
        return self.intercept + np.asarray(Z, dtype=np.float64) @ self.coefficients


def weighted_ridge(X, y, w, ridge):
    """Intercept + coefficients minimising sum w (y - b0 - X beta)^2 + ridge |beta|^2."""
    n, m = X.shape
    Xa = np.hstack([np.ones((n, 1)), X])
    sw = np.sqrt(w)
    rows = Xa * sw[:, None]
    rhs = y * sw
    if ridge > 0:
        pen = np.hstack([np.zeros((m, 1)), np.sqrt(ridge) * np.eye(m)])
        rows = np.vstack([rows, pen])
        rhs = np.concatenate([rhs, np.zeros(m)])
    sol, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
    return sol[0], sol[1:]


def lime_explain(predict_fn, M, n_perturbations=1000, kernel_width=None, K=None, seed=0,
                 ridge=1e-3):
    """Local sparse linear surrogate over M binary interpretable features.

    ``predict_fn(Z)`` maps an [n, M] 0/1 array (1 = feature kept) to n
    outputs. The first perturbation is the unmasked instance. Samples are
    weighted by ``exp(-D^2 / width^2)`` with ``D`` the fraction of masked
    features; the ``K`` largest coefficients (by magnitude) of a weighted
    ridge fit are kept and refit.
    """
    K = M if K is None else int(K)
    if not 1 <= K <= M:
        raise ExplainError("K must be in [1, M]")
    width = 0.75 * math.sqrt(M) if kernel_width is None else float(kernel_width)
    rng = np.random.default_rng(seed)
    Z = rng.integers(0, 2, size=(n_perturbations, M)).astype(np.float64)
    Z[0] = 1.0
    if np.all(Z == Z[0]):
        raise ExplainError("degenerate perturbation set: every sample is identical")
    y = np.asarray(predict_fn(Z), dtype=np.float64)
    D = (M - Z.sum(axis=1)) / M
    w = np.exp(-(D ** 2) / width ** 2)
    b0, beta = weighted_ridge(Z, y, w, ridge)
    selected = sorted(np.argsort(-np.abs(beta), kind="stable")[:K].tolist())
    if K < M:
        b0, sub = weighted_ridge(Z[:, selected], y, w, ridge)
        beta = np.zeros(M)
        beta[selected] = sub
    pred = b0 + Z @ beta
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = np.sum(w * (y - ybar) ** 2)
    r2 = 1.0 - np.sum(w * (y - pred) ** 2) / ss_tot if ss_tot > 0 else 1.0
    return LimeExplanation(float(b0), beta, selected, width, int(n_perturbations), float(r2),
                           K, seed, ridge, Z, y, w)


def superpixel_segments(h, w, g):
    """Grid of g x g rectangular segments, ids row-major; the last row/column absorbs any remainder."""
    if g < 1:
        raise ExplainError("grid size must be >= 1")
    if g > min(h, w):
        raise ExplainError(f"grid {g} is finer than the {h}x{w} image")
    rows = np.minimum(np.arange(h) // (h // g), g - 1)
    cols = np.minimum(np.arange(w) // (w // g), g - 1)
    return rows[:, None] * g + cols[None, :]


def lime_gradcam_overlap(lime, segments, cam, top_k=3, quantile=0.9):
    """Fraction of the top-k positive LIME segments touching the top-decile Grad-CAM pixels."""
    hot = cam >= np.quantile(cam, quantile)
    if not np.any(cam > 0):
        return 0.0
    order = [s for s in np.argsort(-lime.coefficients, kind="stable") if lime.coefficients[s] > 0][:top_k]
    if not order:
        return 0.0
    hits = sum(bool(np.any(hot[segments == s])) for s in order)
    return hits / len(order)


# -- model wrapper -----------------------------------------------------------

class MaskableModel:
    """Malignant-class probability of one sample under feature masking."""

    def __init__(self, model, image, clinical, fill_value=0.0, segments=None, class_index=1):
        self.model = model
        self.image = None if image is None else np.asarray(image, dtype=np.float64)
        self.clinical = np.asarray(clinical, dtype=np.float64)
        self.fill_value = float(fill_value)
        self.segments = segments
        self.class_index = class_index
        self.vocab = model.vocab
        self.field_names = list(FIELDS)

    def masked_clinical(self, mask):
        """Encoded vector with every field whose mask entry is False zeroed."""
        out = self.clinical.copy()
        for keep, f in zip(mask, FIELDS):
            if not keep:
                out[self.vocab.slices[f]] = 0.0
        return out

    def masked_image(self, keep_segments):
        img = self.image.copy()
        for s, keep in enumerate(keep_segments):
            if not keep:
                img[..., self.segments == s] = self.fill_value
        return img

    def _predict(self, images, clinical):
        return self.model.predict_proba(images, clinical) if self.class_index == 1 else \
            1.0 - self.model.predict_proba(images, clinical)

    def clinical_values(self, masks):
        masks = np.asarray(masks, dtype=bool)
        clin = np.stack([self.masked_clinical(m) for m in masks])
        imgs = None if self.image is None else np.repeat(self.image[None], len(masks), axis=0)
        return self._predict(imgs, clin)

    def clinical_value(self, mask):
        return float(self.clinical_values([mask])[0])

    def image_values(self, keep):
        keep = np.asarray(keep, dtype=bool)
        imgs = np.stack([self.masked_image(k) for k in keep])
        clin = np.repeat(self.clinical[None], len(keep), axis=0)
        return self._predict(imgs, clin)


def attribution_json(method, class_index, values, names, efficiency_residual=None, r2=None,
                     seed=None, **extra):
    key = "phi" if method in ("shap", "kernelshap") else "coefficients"
    name_key = "segment_ids" if names and isinstance(names[0], int) else "field_names"
    out = {
        "method": method,
        "class": int(class_index),
        key: [float(x) for x in values],
        name_key: list(names),
        "efficiency_residual": efficiency_residual,
        "r2": r2,
        "seed": seed,
    }
    out.update(extra)
    return out


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
