"""Finite-difference checks of every training loss on small random instances.

Each instance draws raw (pre-activation) head outputs, so the checks also
cover the softmax / sigmoid post-processing.  Classification noise is drawn
once per instance and frozen.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .detector import GmmParams
from .losses import (BatchTargets, classification_loss_eff, classification_loss_full, localization_loss,
                     total_loss)

LOSSES = ("localization", "classification_full", "classification_efficient", "total")


@dataclass
class Instance:
    raw: dict  # name -> array of raw head outputs
    targets: BatchTargets
    noise: np.ndarray


def random_instance(rng: np.random.Generator, B: int = 2, A: int = 5, K: int = 2, n_classes: int = 2) -> Instance:
    Cp = n_classes + 1
    positive = rng.random((B, A)) < 0.4
    positive[:, 0] = True  # every image has at least one positive
    labels = np.where(positive, rng.integers(1, Cp, size=(B, A)), 0)
    offsets = rng.normal(0.0, 1.0, size=(B, A, 4))
    raw = {
        "loc_pi": rng.normal(size=(B, A, 4, K)),
        "loc_mu": rng.normal(size=(B, A, 4, K)),
        "loc_var": rng.normal(0.0, 0.5, size=(B, A, 4, K)),
        "cls_pi": rng.normal(size=(B, A, K)),
        "cls_mu": rng.normal(size=(B, A, K, Cp)),
        "cls_var": rng.normal(-1.0, 0.5, size=(B, A, K, Cp)),
    }
    return Instance(raw, BatchTargets(positive, labels, offsets), rng.standard_normal((B, A, K, Cp)))


def _loc(t: dict) -> GmmParams:
    return GmmParams(ad.softmax(t["loc_pi"]), t["loc_mu"], ad.sigmoid(t["loc_var"]))


def _cls(t: dict) -> GmmParams:
    return GmmParams(ad.softmax(t["cls_pi"]), t["cls_mu"], ad.sigmoid(t["cls_var"]))


def loss_fn(name: str, inst: Instance):
    """(callable over a list of leaf tensors, ordered parameter names)."""
    tg, noise = inst.targets, inst.noise
    if name == "localization":
        names = ["loc_pi", "loc_mu", "loc_var"]
        return (lambda xs: localization_loss(_loc(dict(zip(names, xs))), tg)), names
    if name == "classification_full":
        names = ["cls_pi", "cls_mu", "cls_var"]

        def f(xs):
            lp, ln = classification_loss_full(_cls(dict(zip(names, xs))), tg, noise=noise)
            return lp + ln
        return f, names
    if name == "classification_efficient":
        names = ["cls_pi", "cls_mu"]

        def f(xs):
            t = dict(zip(names, xs))
            lp, ln = classification_loss_eff(GmmParams(ad.softmax(t["cls_pi"]), t["cls_mu"], None), tg)
            return lp + ln
        return f, names
    if name == "total":
        names = sorted(inst.raw)

        def f(xs):
            t = dict(zip(names, xs))
            lp, ln = classification_loss_full(_cls(t), tg, noise=noise)
            return total_loss(localization_loss(_loc(t), tg), lp, ln, tg.N)
        return f, names
    raise ValueError(f"unknown loss {name!r}")


def run_suite(n_instances: int = 50, seed: int = 0, tolerance: float = 1e-4, losses=LOSSES) -> dict:
    """loss name -> worst relative error over ``n_instances`` random instances."""
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in losses}
    for _ in range(n_instances):
        inst = random_instance(rng)
        for name in losses:
            fn, names = loss_fn(name, inst)
            rep = ad.finite_diff_check(fn, [inst.raw[n] for n in names], tolerance=tolerance)
            worst[name] = max(worst[name], rep.max_rel_err)
    return worst
