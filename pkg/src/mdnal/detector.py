"""Toy single-scale anchor detector with mixture-density heads.

Backbone: a stack of strided 3x3 convolutions with ReLU down to an FxF map.
Heads: two 1x1 convolutions.  Per anchor the localization head emits, for
each of x, y, w, h, K triples (weight logit, mean, variance logit); the
classification head emits K weight logits plus per-class means (and, for
the ``full_gmm`` variant, per-class variance logits).  ``deterministic`` is
the plain SSD-style head used as a baseline.

Anchor index order is (row, col, anchor-in-cell); class 0 is background.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .scenes import BoundingBox

HEAD_VARIANTS = ("full_gmm", "efficient", "deterministic")
MAX_LOG_RATIO = 20.0


@dataclass
class NetworkConfig:
    head: str = "full_gmm"
    K: int = 4
    n_classes: int = 4
    image_size: int = 64
    backbone: tuple = ((16, 2), (32, 2), (32, 2), (32, 1))  # (out channels, stride) per 3x3 conv
    anchor_scales: tuple = (16.0, 22.0, 30.0)
    anchor_ratios: tuple = (1.0,)
    clip_anchors: bool = True  # trim border anchors to the image
    offset_scale: tuple = (0.1, 0.1, 0.2, 0.2)  # regression targets are offsets / offset_scale
    conf_floor: float = 0.3
    nms_iou: float = 0.45

    def __post_init__(self):
        self.backbone = tuple((int(c), int(s)) for c, s in self.backbone)
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)
        self.offset_scale = tuple(float(v) for v in self.offset_scale)
        if len(self.offset_scale) != 4 or min(self.offset_scale) <= 0:
            raise ValueError("offset_scale needs four positive values")
        if self.head not in HEAD_VARIANTS:
            raise ValueError(f"unknown head variant {self.head!r}; expected one of {HEAD_VARIANTS}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.head == "deterministic" and self.K != 1:
            self.K = 1

    @property
    def F(self) -> int:
        f = self.image_size
        for _, s in self.backbone:
            f = (f + 2 - 3) // s + 1
        return f

    @property
    def D(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def n_outputs(self) -> int:
        """C' = classes plus background."""
        return self.n_classes + 1


# ---------------------------------------------------------------- anchors & boxes

@dataclass
class AnchorSet:
    F: int
    D: int
    image_size: int
    boxes: np.ndarray  # (F*F*D, 4) as (x, y, w, h)

    def __len__(self):
        return len(self.boxes)


def build_anchor_grid(image_size: int, F: int, D: int, scales, ratios, clip: bool = False) -> AnchorSet:
    """F x F cell centers times D shapes; ``clip`` trims border anchors to the image."""
    if len(scales) * len(ratios) != D:
        raise ValueError(f"{len(scales)} scales x {len(ratios)} ratios != D={D}")
    stride = image_size / F
    shapes = []
    for s in scales:
        for r in ratios:
            w, h = s * np.sqrt(r), s / np.sqrt(r)
            if w > image_size or h > image_size or w <= 0 or h <= 0:
                raise ValueError(f"anchor {w:.1f}x{h:.1f} does not fit a {image_size}px image")
            shapes.append((w, h))
    boxes = []
    for row in range(F):
        for col in range(F):
            cx, cy = (col + 0.5) * stride, (row + 0.5) * stride
            for w, h in shapes:
                if not clip:
                    boxes.append((cx, cy, w, h))
                    continue
                x0, y0 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
                x1, y1 = min(float(image_size), cx + w / 2), min(float(image_size), cy + h / 2)
                boxes.append(((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0))
    return AnchorSet(F, D, image_size, np.array(boxes))


def anchors_for(config: NetworkConfig) -> AnchorSet:
    return build_anchor_grid(config.image_size, config.F, config.D, config.anchor_scales, config.anchor_ratios,
                             config.clip_anchors)


def _as_xywh(b) -> np.ndarray:
    return b.as_array() if isinstance(b, BoundingBox) else np.asarray(b, dtype=np.float64)


def iou(a, b) -> float:
    """IoU of two center/size boxes."""
    return float(iou_matrix(_as_xywh(a)[None], _as_xywh(b)[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) center/size boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax1[:, None], bx1[None]) - np.maximum(ax0[:, None], bx0[None]), 0, None)
    ih = np.clip(np.minimum(ay1[:, None], by1[None]) - np.maximum(ay0[:, None], by0[None]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode_offsets(gt, anchor) -> np.ndarray:
    """Regression target of a GT box relative to an anchor; works row-wise on (n, 4)."""
    g, d = np.asarray(gt, dtype=np.float64), np.asarray(anchor, dtype=np.float64)
    if isinstance(gt, BoundingBox):
        g = gt.as_array()
    if isinstance(anchor, BoundingBox):
        d = anchor.as_array()
    if np.any(g[..., 2:] <= 0):
        raise ValueError("GT width/height must be positive")
    return np.stack([(g[..., 0] - d[..., 0]) / d[..., 2],
                     (g[..., 1] - d[..., 1]) / d[..., 3],
                     np.log(g[..., 2] / d[..., 2]),
                     np.log(g[..., 3] / d[..., 3])], axis=-1)


def decode_offsets(anchor, offsets) -> np.ndarray:
    d = _as_xywh(anchor) if isinstance(anchor, BoundingBox) else np.asarray(anchor, dtype=np.float64)
    o = np.asarray(offsets, dtype=np.float64)
    lw = np.clip(o[..., 2], -MAX_LOG_RATIO, MAX_LOG_RATIO)
    lh = np.clip(o[..., 3], -MAX_LOG_RATIO, MAX_LOG_RATIO)
    return np.stack([d[..., 0] + o[..., 0] * d[..., 2],
                     d[..., 1] + o[..., 1] * d[..., 3],
                     d[..., 2] * np.exp(lw),
                     d[..., 3] * np.exp(lh)], axis=-1)


def decode_box(anchor, offsets) -> BoundingBox:
    return BoundingBox(*decode_offsets(anchor, offsets).tolist())


@dataclass
class MatchTable:
    """Anchor-to-GT assignment for one image.

    ``assigned[i]`` is the GT index of anchor i or -1; ``labels[i]`` is its
    class (0 for negatives); ``offsets[i]`` is the encoded GT for positives.
    """

    assigned: np.ndarray
    labels: np.ndarray
    offsets: np.ndarray
    iou_threshold: float = 0.5

    @property
    def positive(self) -> np.ndarray:
        return self.assigned >= 0

    @property
    def N(self) -> int:
        return int(self.positive.sum())

    def indicator(self, n_gt: int) -> np.ndarray:
        lam = np.zeros((len(self.assigned), n_gt), dtype=np.int8)
        pos = np.flatnonzero(self.positive)
        lam[pos, self.assigned[pos]] = 1
        return lam


def match_anchors(anchors, gt_classes, gt_boxes, threshold: float = 0.5) -> MatchTable:
    """Assign each anchor to its highest-IoU GT when that IoU exceeds ``threshold``."""
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    A = len(boxes)
    gt_boxes = np.asarray([_as_xywh(b) for b in gt_boxes], dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    assigned = np.full(A, -1, dtype=np.int64)
    labels = np.zeros(A, dtype=np.int64)
    offsets = np.zeros((A, 4))
    if len(gt_boxes):
        ious = iou_matrix(boxes, gt_boxes)
        best = ious.argmax(axis=1)  # first max -> lowest GT index on ties
        hit = ious[np.arange(A), best] > threshold
        assigned[hit] = best[hit]
        labels[hit] = gt_classes[best[hit]]
        offsets[hit] = encode_offsets(gt_boxes[best[hit]], boxes[hit])
    return MatchTable(assigned, labels, offsets, threshold)


# ---------------------------------------------------------------- network

def head_output_sizes(F: int, D: int, K: int, n_outputs: int) -> dict:
    """Closed-form per-image head output counts (n_outputs includes background)."""
    return {"loc": F * F * D * (4 * 3 * K),
            "cls_full": F * F * D * (n_outputs * 2 * K + K),
            "cls_efficient": F * F * D * (n_outputs * K + K)}


def per_anchor_sizes(config: NetworkConfig) -> tuple[int, int]:
    K, Cp = config.K, config.n_outputs
    if config.head == "deterministic":
        return 4, Cp
    loc = 4 * 3 * K
    cls = Cp * 2 * K + K if config.head == "full_gmm" else Cp * K + K
    return loc, cls


def init_params(config: NetworkConfig, seed: int) -> dict:
    """He-initialised weights; head biases start the variances small and the background favoured."""
    rng = np.random.default_rng(seed)
    params, cin = {}, 1
    for li, (cout, _) in enumerate(config.backbone):
        params[f"conv{li}.w"] = rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout))
        params[f"conv{li}.b"] = np.zeros(cout)
        cin = cout
    loc_n, cls_n = per_anchor_sizes(config)
    D = config.D
    params["loc.w"] = rng.normal(0.0, np.sqrt(1.0 / cin), (cin, D * loc_n)) * 0.1
    params["cls.w"] = rng.normal(0.0, np.sqrt(1.0 / cin), (cin, D * cls_n)) * 0.1
    loc_b = np.zeros((D, loc_n))
    cls_b = np.zeros((D, cls_n))
    K, Cp = config.K, config.n_outputs
    if config.head != "deterministic":
        lb = loc_b.reshape(D, 4, 3, K)
        # spread component means so they do not start identical
        lb[:, :, 1, :] = np.linspace(-0.2, 0.2, K) if K > 1 else 0.0
        lb[:, :, 2, :] = -2.0
        cb = cls_b[:, K:].reshape(D, -1, K, Cp)
        cb[:, 0, :, 0] = 2.0
        if config.head == "full_gmm":
            cb[:, 1] = -2.0
    else:
        cls_b[:, 0] = 2.0
    params["loc.b"] = loc_b.reshape(-1)
    params["cls.b"] = cls_b.reshape(-1)
    return params


@dataclass
class RawHeadOutput:
    """Head outputs for a batch; A anchors per image.

    full_gmm/efficient: loc (B, A, 4, 3, K); cls_pi (B, A, K); cls_mu (B, A, K, C');
    cls_var (B, A, K, C') only for full_gmm.  deterministic: loc (B, A, 4); cls_mu (B, A, C').
    """

    head: str
    loc: ad.Tensor
    cls_pi: ad.Tensor | None
    cls_mu: ad.Tensor
    cls_var: ad.Tensor | None
    features: ad.Tensor  # (B, F, F, channels)

    def sizes_per_image(self) -> tuple[int, int]:
        B = self.loc.shape[0]
        cls = self.cls_mu.size + (self.cls_pi.size if self.cls_pi is not None else 0) \
            + (self.cls_var.size if self.cls_var is not None else 0)
        return self.loc.size // B, cls // B


def _tensors(params: dict) -> dict:
    return {k: v if isinstance(v, ad.Tensor) else ad.Tensor(v) for k, v in params.items()}


def backbone_forward(images, params: dict, config: NetworkConfig) -> ad.Tensor:
    x = ad.as_tensor(images)
    if x.data.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    S = config.image_size
    if x.shape[1:] != (S, S, 1):
        raise ad.ShapeError("forward (expected (B, %d, %d, 1))" % (S, S), x.shape)
    p = _tensors(params)
    for li, (_, stride) in enumerate(config.backbone):
        x = ad.relu(ad.conv2d(x, p[f"conv{li}.w"], stride=stride, pad=1) + p[f"conv{li}.b"])
    return x


def forward(images, params: dict, config: NetworkConfig) -> RawHeadOutput:
    feats = backbone_forward(images, params, config)
    p = _tensors(params)
    B, F = feats.shape[0], feats.shape[1]
    A, K, Cp = F * F * config.D, config.K, config.n_outputs
    loc = ad.matmul(feats, p["loc.w"]) + p["loc.b"]
    cls = ad.matmul(feats, p["cls.w"]) + p["cls.b"]
    if config.head == "deterministic":
        return RawHeadOutput("deterministic", ad.reshape(loc, (B, A, 4)), None,
                             ad.reshape(cls, (B, A, Cp)), None, feats)
    loc = ad.reshape(loc, (B, A, 4, 3, K))
    cls = ad.reshape(cls, (B, A, -1))
    cls_pi = cls[:, :, :K]
    if config.head == "full_gmm":
        rest = ad.reshape(cls[:, :, K:], (B, A, 2, K, Cp))
        return RawHeadOutput("full_gmm", loc, cls_pi, rest[:, :, 0], rest[:, :, 1], feats)
    return RawHeadOutput("efficient", loc, cls_pi, ad.reshape(cls[:, :, K:], (B, A, K, Cp)), None, feats)


@dataclass
class GmmParams:
    """Mixture parameters; the component axis is last for pi, and second to last for vector means."""

    pi: object
    mu: object
    var: object | None = None


@dataclass
class HeadGmm:
    head: str
    loc: GmmParams  # pi/mu/var: (B, A, 4, K)
    cls: GmmParams  # pi: (B, A, K); mu/var: (B, A, K, C')

    def numpy(self) -> "HeadGmm":
        conv = lambda t: None if t is None else (t.data if isinstance(t, ad.Tensor) else t)
        return HeadGmm(self.head,
                       GmmParams(conv(self.loc.pi), conv(self.loc.mu), conv(self.loc.var)),
                       GmmParams(conv(self.cls.pi), conv(self.cls.mu), conv(self.cls.var)))

    def image(self, b: int) -> "HeadGmm":
        pick = lambda t: None if t is None else t[b]
        return HeadGmm(self.head, GmmParams(pick(self.loc.pi), pick(self.loc.mu), pick(self.loc.var)),
                       GmmParams(pick(self.cls.pi), pick(self.cls.mu), pick(self.cls.var)))


def postprocess_gmm(raw: RawHeadOutput) -> HeadGmm:
    """Softmax the mixture weights, keep means, squash variances into (0, 1)."""
    if raw.head == "deterministic":
        B, A = raw.loc.shape[:2]
        one = np.ones((B, A, 4, 1))
        loc = GmmParams(ad.Tensor(one), ad.reshape(raw.loc, (B, A, 4, 1)), None)
        cls = GmmParams(ad.Tensor(np.ones((B, A, 1))), ad.reshape(raw.cls_mu, (B, A, 1, -1)), None)
        return HeadGmm(raw.head, loc, cls)
    loc_pi = ad.softmax(raw.loc[:, :, :, 0])
    loc_mu = raw.loc[:, :, :, 1]
    loc_var = ad.sigmoid(raw.loc[:, :, :, 2])
    cls_pi = ad.softmax(raw.cls_pi)
    cls_var = ad.sigmoid(raw.cls_var) if raw.cls_var is not None else None
    return HeadGmm(raw.head, GmmParams(loc_pi, loc_mu, loc_var), GmmParams(cls_pi, raw.cls_mu, cls_var))


# ---------------------------------------------------------------- inference

@dataclass
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float
    anchor: int
    class_probs: np.ndarray | None = None
    uncertainties: object | None = None  # UncertaintyQuad


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mixture_box_offsets(loc: GmmParams) -> np.ndarray:
    """Weighted component means per coordinate, (..., 4)."""
    return (np.asarray(loc.pi) * np.asarray(loc.mu)).sum(axis=-1)


def mixture_class_probs(cls: GmmParams) -> np.ndarray:
    """pi-weighted per-component softmax over classes, (..., C')."""
    return (np.asarray(cls.pi)[..., None] * _softmax_np(np.asarray(cls.mu))).sum(axis=-2)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy NMS; returns kept indices by descending score (ties by index)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return keep


def predict(gmm: HeadGmm, anchors: AnchorSet, conf_floor: float = 0.3, nms_iou: float = 0.45,
            offset_scale=(1.0, 1.0, 1.0, 1.0)) -> list[Detection]:
    """Detections for one image from its per-anchor mixtures (numpy arrays, no batch axis)."""
    if not 0.0 < conf_floor < 1.0:
        raise ValueError("conf_floor must be in (0, 1)")
    g = gmm.numpy()
    offsets = mixture_box_offsets(g.loc) * np.asarray(offset_scale)
    probs = mixture_class_probs(g.cls)
    cls = probs.argmax(axis=-1)
    conf = probs[np.arange(len(probs)), cls]
    keep = np.flatnonzero((cls != 0) & (conf >= conf_floor))
    if not len(keep):
        return []
    boxes = decode_offsets(anchors.boxes[keep], offsets[keep])
    dets = []
    for c in np.unique(cls[keep]):
        sel = np.flatnonzero(cls[keep] == c)
        for j in nms(boxes[sel], conf[keep][sel], nms_iou):
            i = sel[j]
            a = int(keep[i])
            dets.append(Detection(BoundingBox(*boxes[i].tolist()), int(c), float(conf[a]), a, probs[a]))
    dets.sort(key=lambda d: (-d.confidence, d.anchor))
    return dets


def run_inference(params: dict, config: NetworkConfig, images: np.ndarray, batch_size: int = 128):
    """Forward a stack of images without gradients; yields per-image (HeadGmm, features)."""
    for s in range(0, len(images), batch_size):
        raw = forward(images[s:s + batch_size], params, config)
        gmm = postprocess_gmm(raw).numpy()
        feats = raw.features.data.mean(axis=(1, 2))
        for b in range(raw.loc.shape[0]):
            yield gmm.image(b), feats[b]


def detect(params: dict, config: NetworkConfig, scenes, batch_size: int = 128):
    """(detections, per-anchor mixtures, pooled backbone features) per scene."""
    anchors = anchors_for(config)
    images = np.stack([s.image for s in scenes]) if len(scenes) else np.zeros((0, config.image_size, config.image_size, 1))
    out = []
    for gmm, feat in run_inference(params, config, images, batch_size):
        out.append((predict(gmm, anchors, config.conf_floor, config.nms_iou, config.offset_scale), gmm, feat))
    return out
