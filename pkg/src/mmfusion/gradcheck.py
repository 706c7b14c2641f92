"""Finite-difference checks for every autodiff primitive and the full model loss."""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

ATTENTION_KINDS = ("concat", "co_attention", "cross_attention_img_from_clin",
                   "cross_attention_clin_from_img")


@dataclass
class CheckResult:
    name: str
    seed: int
    max_error: float
    passed: bool
    seconds: float


def _p(name, rng, *shape, positive=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return ad.Parameter(name, data)


def _relu_safe(rng, *shape):
    # keep inputs away from the ReLU kink so central differences are clean
    x = rng.normal(size=shape)
    return ad.Parameter("x", np.where(np.abs(x) < 0.05, 0.3, x))


def primitive_cases(rng):
    """``name -> (f, params)`` pairs, each ``f`` returning a scalar loss."""
    cases = {}
    r = rng.normal(size=(3, 4))

    a, b = _p("a", rng, 3, 4), _p("b", rng, 4)
    cases["add"] = (lambda: ad.sum(ad.mul(ad.add(a, b), r)), {"a": a, "b": b})
    a2, b2 = _p("a", rng, 3, 4), _p("b", rng, 1, 4)
    cases["sub"] = (lambda: ad.sum(ad.mul(ad.sub(a2, b2), r)), {"a": a2, "b": b2})
    a3, b3 = _p("a", rng, 3, 4), _p("b", rng, 3, 1)
    cases["mul"] = (lambda: ad.sum(ad.mul(ad.mul(a3, b3), r)), {"a": a3, "b": b3})
    a4 = _p("a", rng, 3, 4)
    cases["scale"] = (lambda: ad.sum(ad.mul(ad.scale(a4, -1.7), r)), {"a": a4})
    x = _relu_safe(rng, 3, 4)
    cases["relu"] = (lambda: ad.sum(ad.mul(ad.relu(x), r)), {"x": x})

    A, B = _p("A", rng, 2, 3, 4), _p("B", rng, 4, 5)
    rm = rng.normal(size=(2, 3, 5))
    cases["matmul"] = (lambda: ad.sum(ad.mul(ad.matmul(A, B), rm)), {"A": A, "B": B})
    X, W, bb = _p("X", rng, 2, 3, 4), _p("W", rng, 4, 5), _p("b", rng, 5)
    cases["matmul_bias"] = (lambda: ad.sum(ad.mul(ad.matmul_bias(X, W, bb), rm)),
                            {"X": X, "W": W, "b": bb})
    T = _p("T", rng, 2, 3, 4)
    rt = rng.normal(size=(4, 2, 3))
    cases["transpose"] = (lambda: ad.sum(ad.mul(ad.transpose(T, (2, 0, 1)), rt)), {"T": T})
    R = _p("R", rng, 3, 4)
    rr = rng.normal(size=(2, 6))
    cases["reshape"] = (lambda: ad.sum(ad.mul(ad.reshape(R, (2, 6)), rr)), {"R": R})
    c1, c2 = _p("c1", rng, 2, 3), _p("c2", rng, 2, 2)
    rc = rng.normal(size=(2, 5))
    cases["concat"] = (lambda: ad.sum(ad.mul(ad.concat([c1, c2], axis=1), rc)), {"c1": c1, "c2": c2})
    S = _p("S", rng, 3, 4)
    rs = rng.normal(size=(4,))
    cases["sum"] = (lambda: ad.sum(ad.mul(ad.sum(S, axis=0), rs)), {"S": S})
    M = _p("M", rng, 3, 4)
    rmn = rng.normal(size=(3, 1))
    cases["mean"] = (lambda: ad.sum(ad.mul(ad.mean(M, axis=1, keepdims=True), rmn)), {"M": M})
    Z = _p("Z", rng, 3, 4)
    cases["softmax_rows"] = (lambda: ad.sum(ad.mul(ad.softmax_rows(Z), r)), {"Z": Z})
    Z2 = _p("Z", rng, 3, 4)
    cases["log_softmax_rows"] = (lambda: ad.sum(ad.mul(ad.log_softmax_rows(Z2), r)), {"Z": Z2})
    L, g, be = _p("X", rng, 3, 4), _p("gamma", rng, 4), _p("beta", rng, 4)
    cases["layer_norm"] = (lambda: ad.sum(ad.mul(ad.layer_norm(L, g, be), r)),
                           {"X": L, "gamma": g, "beta": be})
    G = _p("G", rng, 2, 3, 4, 4)
    rg = rng.normal(size=(2, 3))
    cases["global_avg_pool"] = (lambda: ad.sum(ad.mul(ad.global_avg_pool(G), rg)), {"G": G})
    logits = _p("logits", rng, 4, 2)
    labels = rng.integers(0, 2, size=4)
    cases["cross_entropy"] = (lambda: ad.cross_entropy(logits, labels), {"logits": logits})
    for stride, pad, k in ((1, 1, 3), (2, 1, 4), (2, 0, 2)):
        xi, wk, bk = _p("x", rng, 2, 2, 6, 6), _p("w", rng, 3, 2, k, k), _p("b", rng, 3)
        out = ad.conv2d(ad.Tensor(xi.data), wk.data, bk.data, stride=stride, padding=pad)
        ro = rng.normal(size=out.shape)
        cases[f"conv2d_k{k}_s{stride}_p{pad}"] = (
            lambda xi=xi, wk=wk, bk=bk, s=stride, p=pad, ro=ro:
            ad.sum(ad.mul(ad.conv2d(xi, wk, bk, stride=s, padding=p), ro)),
            {"x": xi, "w": wk, "b": bk})
    return cases


def check_primitives(seed, h=1e-5, tol=1e-4):
    rng = np.random.default_rng(seed)
    results = []
    for name, (f, params) in primitive_cases(rng).items():
        t = time.perf_counter()
        rep = ad.grad_check(f, params, h=h, tol=tol)
        results.append(CheckResult(name, seed, rep.max_error, rep.passed, time.perf_counter() - t))
    return results


def small_model(kind, seed):
    """A reduced-width model (same topology) small enough for exhaustive differencing."""
    from .model import FusionConfig, FusionModel
    cfg = FusionConfig(fusion_kind=kind, d=6, classifier_hidden=5, backbone_channels=(2, 3, 4),
                       image_size=8, image_token_mode="spatial", clinical_token_mode="per_field")
    return FusionModel(cfg, seed=seed)


def model_batch(model, seed, n=2):
    from .clinical import FIELDS
    rng = np.random.default_rng(seed + 1000)
    size = model.config.image_size
    images = rng.uniform(0.0, 1.0, size=(n, 1, size, size))
    clinical = np.zeros((n, model.vocab.total_dim))
    for i in range(n):
        for f in FIELDS:
            sl = model.vocab.slices[f]
            clinical[i, sl.start + rng.integers(0, sl.stop - sl.start)] = 1.0
    labels = np.arange(n) % 2
    return images, clinical, labels


def check_model(kind, seed, h=1e-5, tol=1e-4):
    model = small_model(kind, seed)
    images, clinical, labels = model_batch(model, seed)
    t = time.perf_counter()
    rep = ad.grad_check(lambda: model.loss(images, clinical, labels)[0], model.trainable(), h=h, tol=tol)
    return CheckResult(f"model[{kind}]", seed, rep.max_error, rep.passed, time.perf_counter() - t)


def run_suite(seeds=range(5), kinds=ATTENTION_KINDS, h=1e-5, tol=1e-4):
    results = []
    for s in seeds:
        results.extend(check_primitives(s, h, tol))
        for k in kinds:
            results.append(check_model(k, s, h, tol))
    return results
