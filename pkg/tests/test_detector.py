import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdnal import autodiff as ad
from mdnal.detector import (AnchorSet, GmmParams, HeadGmm, NetworkConfig, build_anchor_grid, decode_offsets,
                            encode_offsets, forward, head_output_sizes, init_params, iou, iou_matrix,
                            match_anchors, mixture_box_offsets, mixture_class_probs, nms, postprocess_gmm,
                            predict, RawHeadOutput)
from mdnal.scenes import BoundingBox


def brute_iou(a, b):
    """Pixel-free corner arithmetic, written independently of iou_matrix."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


class TestAnchors:
    def test_single_scale_grid(self):
        a = build_anchor_grid(64, 8, 1, (16,), (1,))
        assert len(a) == 64
        assert sorted(set(a.boxes[:, 0])) == [4.0 + 8 * i for i in range(8)]
        assert sorted(set(a.boxes[:, 1])) == [4.0 + 8 * i for i in range(8)]

    def test_three_ratios(self):
        assert len(build_anchor_grid(64, 8, 3, (16,), (0.5, 1, 2))) == 192

    def test_d_mismatch_raises(self):
        with pytest.raises(ValueError):
            build_anchor_grid(64, 8, 2, (16,), (1,))

    def test_clipped_anchors_stay_inside(self):
        a = build_anchor_grid(64, 8, 3, (16, 22, 30), (1,), clip=True)
        x0 = a.boxes[:, 0] - a.boxes[:, 2] / 2
        x1 = a.boxes[:, 0] + a.boxes[:, 2] / 2
        assert x0.min() >= 0 and x1.max() <= 64


class TestIoU:
    def test_identical(self):
        assert iou((5, 5, 4, 4), (5, 5, 4, 4)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (10, 10, 1, 1)) == 0.0

    def test_half_shift(self):
        assert iou((0.5, 0.5, 1, 1), (1.0, 0.5, 1, 1)) == pytest.approx(1 / 3)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(1, 50), min_size=8, max_size=8))
    def test_matches_brute_force_and_symmetric(self, v):
        a, b = np.array(v[:4]), np.array(v[4:])
        assert iou(a, b) == pytest.approx(brute_iou(a, b), abs=1e-12)
        assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-15)
        assert 0.0 <= iou(a, b) <= 1.0


class TestOffsets:
    def test_identity(self):
        np.testing.assert_array_equal(encode_offsets((10, 10, 20, 20), (10, 10, 20, 20)), [0, 0, 0, 0])

    def test_log_e(self):
        assert encode_offsets((10, 10, 20 * np.e, 20), (10, 10, 20, 20))[2] == pytest.approx(1.0)

    def test_worked_example(self):
        np.testing.assert_allclose(encode_offsets((12, 10, 20, 40), (10, 10, 20, 20)), [0.1, 0, 0, np.log(2)])

    def test_decode_worked_example(self):
        np.testing.assert_allclose(decode_offsets((10, 10, 20, 20), (0.1, 0, 0, np.log(2))), [12, 10, 20, 40])

    def test_decode_zero_is_anchor(self):
        np.testing.assert_array_equal(decode_offsets((3, 4, 5, 6), np.zeros(4)), [3, 4, 5, 6])

    def test_encode_rejects_degenerate(self):
        with pytest.raises(ValueError):
            encode_offsets((1, 1, 0, 1), (1, 1, 1, 1))

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        gt = np.column_stack([rng.uniform(0, 64, (500, 2)), rng.uniform(1, 40, (500, 2))])
        an = np.column_stack([rng.uniform(0, 64, (500, 2)), rng.uniform(1, 40, (500, 2))])
        assert np.abs(decode_offsets(an, encode_offsets(gt, an)) - gt).max() < 1e-9


class TestMatching:
    def test_exact_anchor_matches(self):
        a = build_anchor_grid(64, 8, 1, (16,), (1,))
        m = match_anchors(a, [2], [a.boxes[10]])
        assert m.positive[10] and m.labels[10] == 2 and m.N >= 1
        np.testing.assert_allclose(m.offsets[10], 0, atol=1e-12)

    def test_empty_gt(self):
        m = match_anchors(build_anchor_grid(64, 8, 1, (16,), (1,)), [], [])
        assert m.N == 0 and not m.positive.any() and not m.labels.any()

    def test_two_anchors_at_06_and_07(self):
        # GT 10x10 at origin; anchors shifted in x give IoU (10-s)/(10+s)
        s6, s7 = 10 * (1 - 0.6) / 1.6, 10 * (1 - 0.7) / 1.7
        anchors = np.array([[5 + s6, 5, 10, 10], [5 + s7, 5, 10, 10], [40, 40, 10, 10]])
        table = iou_matrix(anchors, np.array([[5, 5, 10, 10]]))[:, 0]
        np.testing.assert_allclose(table[:2], [0.6, 0.7])
        m = match_anchors(anchors, [1], [(5, 5, 10, 10)])
        assert m.N == 2
        np.testing.assert_array_equal(m.assigned, [0, 0, -1])

    def test_threshold_is_strict(self):
        s = 10 * (1 - 0.5) / 1.5  # IoU exactly 0.5
        m = match_anchors(np.array([[5 + s, 5, 10, 10]]), [1], [(5, 5, 10, 10)])
        assert m.N == 0

    def test_indicator_rows(self):
        a = build_anchor_grid(64, 8, 1, (16,), (1,))
        m = match_anchors(a, [1, 3], [a.boxes[0], a.boxes[63]])
        lam = m.indicator(2)
        assert lam.sum() == m.N
        assert lam.sum(axis=1).max() == 1


def sweep_config(F, D, K, Cp, head):
    backbone = ((4, 2),) * {8: 3, 4: 4}[F]
    scales = (12.0, 16.0, 22.0)[:D]
    return NetworkConfig(head=head, K=K, n_classes=Cp - 1, backbone=backbone, anchor_scales=scales)


@pytest.mark.parametrize("F,D", [(4, 1), (4, 3), (8, 1), (8, 3)])
def test_head_sizes_match_closed_forms(F, D):
    imgs = np.zeros((2, 64, 64, 1))
    for K, Cp in itertools.product((1, 2, 4, 8), (3, 5, 11)):
        want = head_output_sizes(F, D, K, Cp)
        got = {}
        for head in ("full_gmm", "efficient"):
            cfg = sweep_config(F, D, K, Cp, head)
            assert (cfg.F, cfg.D) == (F, D)
            raw = forward(imgs, init_params(cfg, 0), cfg)
            got[head] = raw.sizes_per_image()
        assert got["full_gmm"][0] == got["efficient"][0] == want["loc"] == F * F * D * (4 * 3 * K)
        assert got["full_gmm"][1] == want["cls_full"] == F * F * D * (Cp * 2 * K + K)
        assert got["efficient"][1] == want["cls_efficient"] == F * F * D * (Cp * K + K)
        assert want["cls_efficient"] < want["cls_full"]


class TestPostprocess:
    def make(self, K=3, seed=0, loc_scale=1.0):
        cfg = NetworkConfig(K=K, backbone=((4, 2), (4, 2), (4, 2)))
        rng = np.random.default_rng(seed)
        B, A, Cp = 1, 5, cfg.n_outputs
        raw = RawHeadOutput("full_gmm", ad.Tensor(rng.normal(size=(B, A, 4, 3, K)) * loc_scale),
                            ad.Tensor(rng.normal(size=(B, A, K))), ad.Tensor(rng.normal(size=(B, A, K, Cp))),
                            ad.Tensor(rng.normal(size=(B, A, K, Cp))), ad.Tensor(np.zeros((1, 1, 1, 1))))
        return raw

    def test_equal_logits_give_uniform_pi(self):
        raw = self.make()
        raw.loc.data[..., 0, :] = 1.7
        g = postprocess_gmm(raw).numpy()
        np.testing.assert_allclose(g.loc.pi, 1 / 3)

    def test_zero_variance_logit_gives_half(self):
        raw = self.make()
        raw.loc.data[..., 2, :] = 0.0
        np.testing.assert_array_equal(postprocess_gmm(raw).numpy().loc.var, 0.5)

    def test_single_component_pi_is_one(self):
        g = postprocess_gmm(self.make(K=1)).numpy()
        np.testing.assert_array_equal(g.loc.pi, 1.0)
        np.testing.assert_array_equal(g.cls.pi, 1.0)

    def test_ranges(self):
        g = postprocess_gmm(self.make(loc_scale=30.0)).numpy()
        np.testing.assert_allclose(g.cls.pi.sum(-1), 1.0)
        assert (g.loc.var >= 0).all() and (g.loc.var <= 1).all()


class TestInference:
    def test_weighted_offsets(self):
        loc = GmmParams(np.array([[0.5, 0.5]]), np.array([[1.0, 3.0]]))
        assert mixture_box_offsets(loc)[0] == 2.0

    def test_single_component_class_probs(self):
        mu = np.array([[[0.3, 1.2, -0.5]]])
        p = mixture_class_probs(GmmParams(np.ones((1, 1)), mu))
        np.testing.assert_allclose(p[0], np.exp(mu[0, 0]) / np.exp(mu[0, 0]).sum())

    def test_nms_duplicate(self):
        boxes = np.array([[10, 10, 8, 8], [10, 10, 8, 8.0]])
        assert nms(boxes, np.array([0.9, 0.8]), 0.45) == [0]

    def test_nms_keeps_separate(self):
        boxes = np.array([[10, 10, 8, 8], [40, 40, 8, 8.0]])
        assert nms(boxes, np.array([0.8, 0.9]), 0.45) == [1, 0]

    def test_predict_filters_and_decodes(self):
        anchors = AnchorSet(1, 3, 64, np.array([[10, 10, 8, 8], [40, 40, 8, 8], [20, 50, 8, 8.0]]))
        K, Cp = 1, 3
        mu_cls = np.full((3, K, Cp), -5.0)
        mu_cls[0, 0, 1] = 5.0  # confident class 1
        mu_cls[1, 0, 0] = 5.0  # background
        mu_cls[2, 0, 2] = 0.2  # too unsure: below the floor
        mu_cls[2, 0, 1] = 0.0
        mu_cls[2, 0, 0] = 0.0
        loc_mu = np.zeros((3, 4, K))
        loc_mu[0, 0, 0] = 0.5  # shift half an anchor width in x
        gmm = HeadGmm("full_gmm", GmmParams(np.ones((3, 4, K)), loc_mu, np.full((3, 4, K), 0.1)),
                      GmmParams(np.ones((3, K)), mu_cls, np.full((3, K, Cp), 0.1)))
        dets = predict(gmm, anchors, conf_floor=0.5)
        assert [d.anchor for d in dets] == [0]
        assert dets[0].class_id == 1
        np.testing.assert_allclose(dets[0].box.as_array(), [14, 10, 8, 8])


def test_forward_rejects_wrong_image_size():
    cfg = NetworkConfig(backbone=((4, 2), (4, 2), (4, 2)))
    with pytest.raises(ad.ShapeError):
        forward(np.zeros((1, 32, 32, 1)), init_params(cfg, 0), cfg)


def test_deterministic_head_forces_single_component():
    assert NetworkConfig(head="deterministic", K=4).K == 1
    with pytest.raises(ValueError):
        NetworkConfig(head="bogus")
