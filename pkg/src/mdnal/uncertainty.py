"""Closed-form aleatoric/epistemic uncertainty from mixture parameters."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .detector import GmmParams, _softmax_np

TYPES = ("al_b", "ep_b", "al_c", "ep_c")


@dataclass(frozen=True)
class UncertaintyQuad:
    u_al_b: float
    u_ep_b: float
    u_al_c: float
    u_ep_c: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError(f"uncertainties must be finite and non-negative: {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.u_al_b, self.u_ep_b, self.u_al_c, self.u_ep_c])


def mixture_uncertainty(g: GmmParams):
    """(aleatoric, epistemic) of a mixture.

    Means are scalar when ``mu`` has the shape of ``pi`` and vectors (last
    axis) otherwise; epistemic is the weighted squared distance of component
    means from the mixture mean.  Leading batch axes broadcast.
    """
    pi = np.asarray(g.pi, dtype=np.float64)
    mu = np.asarray(g.mu, dtype=np.float64)
    vector = mu.ndim == pi.ndim + 1
    w = pi[..., None] if vector else pi
    center = (w * mu).sum(axis=-2 if vector else -1, keepdims=True)
    dev = (mu - center) ** 2
    if vector:
        dev = dev.sum(axis=-1)
    u_ep = np.clip((pi * dev).sum(axis=-1), 0.0, None)
    if pi.shape[-1] == 1:
        u_ep = np.zeros_like(u_ep)  # exact, even when pi is 1 - ulp
    if g.var is None:
        u_al = None
    else:
        var = np.asarray(g.var, dtype=np.float64)
        u_al = (w * var).sum(axis=-2 if vector else -1)
    return u_al, u_ep


def efficient_cls_aleatoric(pi, probs) -> np.ndarray:
    """sum_k pi_k (diag(p_k) - p_k p_k^T) for component class-probability vectors p_k."""
    pi = np.asarray(pi, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < -1e-12) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("component probabilities must lie on the simplex")
    if np.any(pi < -1e-12) or np.any(np.abs(pi.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("mixture weights must lie on the simplex")
    diag = np.einsum("...k,...kc->...c", pi, probs)
    outer = np.einsum("...k,...kc,...kd->...cd", pi, probs, probs)
    return diag[..., :, None] * np.eye(probs.shape[-1]) - outer


def _cls_quad_parts(cls: GmmParams, head: str, class_ids: np.ndarray, reduce: str):
    """(u_al_c, u_ep_c) per selected anchor."""
    if head == "full_gmm":
        u_al_vec, u_ep = mixture_uncertainty(cls)  # u_al_vec: (n, C')
    else:
        probs = _softmax_np(np.asarray(cls.mu))
        u_al_vec = np.diagonal(efficient_cls_aleatoric(cls.pi, probs), axis1=-2, axis2=-1)
        _, u_ep = mixture_uncertainty(GmmParams(cls.pi, probs, None))
    if reduce == "max":
        u_al = u_al_vec.max(axis=-1)
    else:
        u_al = u_al_vec[np.arange(len(class_ids)), class_ids]
    return u_al, u_ep


def detection_uncertainties(gmm, detections, reduce: str = "predicted") -> list:
    """Return copies of ``detections`` carrying an :class:`UncertaintyQuad`.

    ``gmm`` holds one image's per-anchor mixtures (numpy).  Localization
    values are the max over x, y, w, h; classification aleatoric takes the
    predicted class entry (``reduce="predicted"``) or the max over classes.
    """
    if not detections:
        return []
    if reduce not in ("predicted", "max"):
        raise ValueError(f"unknown reduce {reduce!r}")
    g = gmm.numpy() if hasattr(gmm, "numpy") else gmm
    anchors = np.array([d.anchor for d in detections])
    classes = np.array([d.class_id for d in detections])
    loc = GmmParams(g.loc.pi[anchors], g.loc.mu[anchors],
                    None if g.loc.var is None else g.loc.var[anchors])
    al_b, ep_b = mixture_uncertainty(loc)  # (n, 4)
    al_b = np.zeros_like(ep_b) if al_b is None else al_b
    cls = GmmParams(g.cls.pi[anchors], g.cls.mu[anchors],
                    None if g.cls.var is None else g.cls.var[anchors])
    al_c, ep_c = _cls_quad_parts(cls, g.head, classes, reduce)
    out = []
    for i, d in enumerate(detections):
        quad = UncertaintyQuad(float(al_b[i].max()), float(ep_b[i].max()), float(max(al_c[i], 0.0)),
                               float(ep_c[i]))
        out.append(replace(d, uncertainties=quad))
    return out


UNCERTAINTY_HEADER = ("image_id", "detection_id", "class", "confidence", "u_al_b", "u_ep_b", "u_al_c", "u_ep_c")


def write_uncertainty_csv(path, per_image: dict) -> None:
    """``per_image`` maps image id -> detections with uncertainties."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(UNCERTAINTY_HEADER)
        for image_id in sorted(per_image):
            for j, d in enumerate(per_image[image_id]):
                q = d.uncertainties
                w.writerow([image_id, j, d.class_id, repr(d.confidence)] + [repr(float(v)) for v in q.as_array()])
