import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camofreq.errors import ContractError
from camofreq.evalstat import (IOU_THRESHOLDS, InstanceMask, bhattacharyya, dataset_stats,
                               global_contrast, histogram, inner_boundary, instance_bucket, iou,
                               local_contrast, mask_ap, size_bucket, to_levels)
from camofreq.ingest import AnnotationSet, Annotation, ImageInfo, encode_rle


def square(shape, y0, x0, size):
    m = np.zeros(shape, dtype=bool)
    m[y0:y0 + size, x0:x0 + size] = True
    return m


@pytest.fixture
def iou60_pair():
    """GT 10x10 block; prediction covering 60 of its pixels and nothing else."""
    gt = square((20, 20), 0, 0, 10)
    pred = np.zeros_like(gt)
    pred[0:6, 0:10] = True
    assert iou(pred, gt) == 0.6
    return pred, gt


class TestIoU:
    def test_one_third(self):
        a = np.array([[1, 1], [0, 0]], dtype=bool)
        b = np.array([[0, 1], [0, 1]], dtype=bool)
        assert iou(a, b) == pytest.approx(1 / 3)

    def test_empty_masks(self):
        z = np.zeros((3, 3), dtype=bool)
        assert iou(z, z) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            iou(np.ones((2, 2)), np.ones((3, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_iou_properties(seed):
    r = np.random.default_rng(seed)
    a = r.uniform(size=(6, 7)) < 0.4
    b = r.uniform(size=(6, 7)) < 0.4
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    if a.any():
        assert iou(a, a) == 1.0


class TestMaskAP:
    def test_thresholds(self):
        assert IOU_THRESHOLDS.tolist() == [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]

    def test_perfect(self):
        gts = [[InstanceMask(square((16, 16), 2, 2, 5))], [InstanceMask(square((16, 16), 8, 1, 4))]]
        preds = [[InstanceMask(g[0].mask, 0.9)] for g in gts]
        rep = mask_ap(preds, gts)
        assert (rep.ap, rep.ap50, rep.ap75) == (1.0, 1.0, 1.0)

    def test_no_predictions(self):
        rep = mask_ap([[]], [[InstanceMask(square((8, 8), 0, 0, 3))]])
        assert (rep.ap, rep.ap50, rep.ap75) == (0.0, 0.0, 0.0)

    def test_iou_060(self, iou60_pair):
        pred, gt = iou60_pair
        rep = mask_ap([[InstanceMask(pred, 0.7)]], [[InstanceMask(gt)]])
        assert rep.ap == 0.3
        assert rep.ap50 == 1.0
        assert rep.ap75 == 0.0
        assert [rep.per_threshold[t] for t in (0.5, 0.55, 0.6, 0.65)] == [1.0, 1.0, 1.0, 0.0]

    def test_false_positive_ranked_first(self):
        gt = square((10, 10), 0, 0, 4)
        fp = square((10, 10), 6, 6, 3)
        rep = mask_ap([[InstanceMask(fp, 0.9), InstanceMask(gt, 0.5)]], [[InstanceMask(gt)]])
        # precision at recall 1 is 1/2 for every threshold
        assert rep.ap == pytest.approx(0.5)

    def test_duplicate_is_false_positive(self):
        gt = square((10, 10), 0, 0, 4)
        rep = mask_ap([[InstanceMask(gt, 0.9), InstanceMask(gt, 0.8)]], [[InstanceMask(gt)]])
        assert rep.ap == 1.0
        assert rep.n_pred == 2

    def test_two_of_four_found(self):
        gts = [[InstanceMask(square((20, 20), 5 * i, 0, 4)) for i in range(4)]]
        preds = [[InstanceMask(gts[0][0].mask, 0.9), InstanceMask(gts[0][1].mask, 0.8)]]
        rep = mask_ap(preds, gts)
        # recall reaches 0.5 at precision 1: 51 of 101 recall points
        assert rep.ap == pytest.approx(51 / 101)

    def test_empty_set(self):
        rep = mask_ap([], [])
        assert (rep.ap, rep.ap50, rep.ap75, rep.n_gt, rep.n_pred) == (0.0, 0.0, 0.0, 0, 0)

    def test_missing_score(self):
        gt = square((4, 4), 0, 0, 2)
        with pytest.raises(ContractError):
            mask_ap([[InstanceMask(gt)]], [[InstanceMask(gt)]])

    def test_report_dict(self, iou60_pair):
        pred, gt = iou60_pair
        d = mask_ap([[InstanceMask(pred, 0.7)]], [[InstanceMask(gt)]]).to_dict()
        assert d["per_threshold"]["0.60"] == 1.0
        json.dumps(d)


def random_scene(r, n_img=3, shape=(24, 24)):
    gts, preds = [], []
    for _ in range(n_img):
        g = [InstanceMask(square(shape, *r.integers(0, 16, 2), int(r.integers(3, 8))))
             for _ in range(int(r.integers(1, 4)))]
        p = []
        for _ in range(int(r.integers(0, 5))):
            p.append(InstanceMask(square(shape, *r.integers(0, 16, 2), int(r.integers(3, 8))),
                                  float(r.uniform(0.01, 0.99))))
        gts.append(g)
        preds.append(p)
    return preds, gts


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_ap_bounds_and_monotone_scores(seed):
    r = np.random.default_rng(seed)
    preds, gts = random_scene(r)
    rep = mask_ap(preds, gts)
    assert 0.0 <= rep.ap <= rep.ap50 <= 1.0
    assert 0.0 <= rep.ap75 <= rep.ap50
    # strictly monotone score transform leaves every number unchanged
    moved = [[InstanceMask(p.mask, float(np.exp(3 * p.score) - 7)) for p in ps] for ps in preds]
    rep2 = mask_ap(moved, gts)
    assert rep2.per_threshold == rep.per_threshold


class TestBhattacharyya:
    def test_scalar_case(self):
        assert bhattacharyya([0.5, 0.5], [1.0, 0.0]) == pytest.approx(0.5 * np.log(2), abs=1e-15)
        assert bhattacharyya([0.5, 0.5], [1.0, 0.0]) == pytest.approx(0.3466, abs=5e-5)

    def test_disjoint_clamped(self):
        assert bhattacharyya([1.0, 0.0], [0.0, 1.0]) == pytest.approx(-np.log(1e-12))

    def test_unnormalised(self):
        with pytest.raises(ContractError):
            bhattacharyya([0.5, 0.6], [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_bhattacharyya_properties(seed):
    r = np.random.default_rng(seed)
    p = r.uniform(size=(3, 16)) * (r.uniform(size=(3, 16)) < 0.7)
    q = r.uniform(size=(3, 16)) + 1e-3
    p[:, 0] += 1e-3
    p /= p.sum(axis=1, keepdims=True)
    q /= q.sum(axis=1, keepdims=True)
    assert bhattacharyya(p, q) == pytest.approx(bhattacharyya(q, p), abs=1e-14)
    assert bhattacharyya(p, q) >= 0.0
    assert bhattacharyya(p, p) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_histogram_normalised(seed):
    levels = to_levels(np.random.default_rng(seed).uniform(size=(9, 9, 3)))
    h = histogram(levels.reshape(-1, 3))
    np.testing.assert_allclose(h.sum(axis=1), 1.0, rtol=0, atol=1e-12)


class TestContrast:
    def test_global_contrast_hard_split(self):
        img = np.zeros((8, 8, 3))
        m = square((8, 8), 2, 2, 4)
        img[m] = 1.0
        assert global_contrast(img, m) == pytest.approx(-np.log(1e-12))

    def test_local_contrast_hard_edge(self):
        img = np.zeros((10, 10, 3), dtype=np.uint8)
        m = square((10, 10), 3, 3, 4)
        img[m] = 255
        assert local_contrast(img, m) == 1.0
        assert local_contrast(img.astype(float) / 255.0, m) == 1.0

    def test_local_contrast_flat(self):
        assert local_contrast(np.full((10, 10, 3), 0.4), square((10, 10), 3, 3, 4)) == pytest.approx(0.0, abs=1e-15)

    def test_inner_boundary(self):
        b = inner_boundary(square((7, 7), 1, 1, 5))
        assert b.sum() == 16
        assert not b[3, 3]
        # a mask touching the border keeps the border rows out of the boundary
        assert inner_boundary(np.ones((4, 4), dtype=bool)).sum() == 0


class TestBuckets:
    @pytest.mark.parametrize("n,bucket", [(0, None), (1, "1"), (2, "2-4"), (3, "2-4"), (4, "2-4"),
                                          (5, "5-8"), (8, "5-8"), (9, ">8")])
    def test_instances(self, n, bucket):
        assert instance_bucket(n) == bucket

    def test_sizes(self):
        assert [size_bucket(r) for r in (0.005, 0.1, 0.29, 0.3)] == [
            "small(<0.1)", "medium(0.1-0.3)", "medium(0.1-0.3)", "large(>=0.3)"]


def make_set():
    m = np.zeros((100, 100), dtype=bool)
    m[10:15, 20:30] = True
    anns = [Annotation(1, encode_rle(m))]
    anns += [Annotation(2, encode_rle(square((40, 60), 5 * i, 5 * i, 4))) for i in range(3)]
    return AnnotationSet([ImageInfo(1, "a.png", 100, 100), ImageInfo(2, "b.png", 60, 40)], anns)


class TestDatasetStats:
    def test_size_ratio_fixture(self):
        rep = dataset_stats(make_set())
        assert rep.size_ratios[0] == (1, 0.005)
        assert rep.instances_per_image == {"1": 1, "2-4": 1, "5-8": 0, ">8": 0}
        assert rep.n_instances == 4
        assert all(0.0 < r <= 1.0 for _, r in rep.size_ratios)
        assert rep.resolutions == [(1, 100, 100), (2, 60, 40)]

    def test_empty(self):
        rep = dataset_stats(AnnotationSet())
        assert rep.summary()["n_images"] == 0
        assert rep.summary()["size_ratio_max"] == 0.0

    def test_with_pixels_and_write(self, tmp_path):
        aset = make_set()
        img = np.zeros((100, 100, 3))
        img[10:15, 20:30] = 0.8
        rep = dataset_stats(aset, {1: img})
        assert len(rep.global_contrast) == 1 and len(rep.local_contrast) == 1
        assert rep.local_contrast[0][1] == pytest.approx(0.8)
        rep.write(tmp_path)
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["n_instances"] == 4
        for name in ("resolution.csv", "instances_per_image.csv", "mask_size.csv",
                     "global_contrast.csv", "local_contrast.csv"):
            assert (tmp_path / name).read_text().count("\n") >= 2
