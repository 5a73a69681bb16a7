import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from camofreq.errors import ContractError, FormatError, InputError, ValidationError
from camofreq.evalstat import InstanceMask
from camofreq.ingest import (ImageInfo, decode_mask, decode_rle, encode_rle, load_coco,
                             load_predictions, parse_coco, rasterize_polygon, write_coco,
                             write_predictions)


class TestRLE:
    def test_run_semantics(self):
        m = decode_rle({"counts": [3, 2, 5], "size": [10, 1]})
        assert np.flatnonzero(m[:, 0]).tolist() == [3, 4]

    def test_column_major(self):
        m = decode_rle({"counts": [1, 1, 2], "size": [2, 2]})
        assert m.tolist() == [[False, False], [True, False]]

    def test_leading_foreground(self):
        m = np.ones((2, 3), dtype=bool)
        assert encode_rle(m)["counts"] == [0, 6]

    def test_bad_sum(self):
        with pytest.raises(FormatError):
            decode_rle({"counts": [3, 2], "size": [10, 1]})

    def test_compressed_rejected(self):
        with pytest.raises(FormatError):
            decode_rle({"counts": "abc", "size": [2, 2]})

    def test_size_mismatch(self):
        with pytest.raises(FormatError):
            decode_mask({"counts": [4], "size": [2, 2]}, 3, 3)


@settings(max_examples=60, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_rle_round_trip(mask):
    rle = encode_rle(mask)
    assert sum(rle["counts"]) == mask.size
    np.testing.assert_array_equal(decode_rle(rle), mask)


class TestPolygon:
    def test_square_16px(self):
        m = decode_mask([[0, 0, 4, 0, 4, 4, 0, 4]], 8, 8)
        assert m.sum() == 16
        assert m[:4, :4].all()

    def test_flat_list_accepted(self):
        assert decode_mask([0, 0, 4, 0, 4, 4, 0, 4], 8, 8).sum() == 16

    def test_triangle_centres(self):
        # right triangle below the diagonal y = x of a 4x4 box: centres with y > x
        m = rasterize_polygon([0, 0, 0, 4, 4, 4], 4, 4)
        yy, xx = np.mgrid[:4, :4] + 0.5
        np.testing.assert_array_equal(m, yy > xx)

    def test_even_odd_union(self):
        outer = [0, 0, 6, 0, 6, 6, 0, 6]
        inner = [2, 2, 4, 2, 4, 4, 2, 4]
        # rings are unioned, not subtracted
        assert decode_mask([outer, inner], 6, 6).sum() == 36
        # a self-overlapping single ring uses even-odd parity
        double = [0, 0, 4, 0, 4, 4, 0, 4, 0, 0, 4, 0, 4, 4, 0, 4]
        assert rasterize_polygon(double, 4, 4).sum() == 0

    def test_empty(self):
        assert decode_mask([], 5, 5).sum() == 0

    def test_odd_length(self):
        with pytest.raises(FormatError):
            decode_mask([[0, 0, 4, 0, 4]], 8, 8)


def minimal_doc():
    return {"images": [{"id": 7, "file_name": "x.png", "width": 8, "height": 6}],
            "annotations": [{"image_id": 7, "segmentation": [[1, 1, 6, 1, 3, 5]]}],
            "info": {"ignored": True}}


class TestLoad:
    def test_minimal(self, tmp_path):
        p = tmp_path / "a.json"
        p.write_text(json.dumps(minimal_doc()))
        s = load_coco(p)
        masks = s.masks_by_image()
        assert len(masks[7]) == 1
        assert masks[7][0].mask.shape == (6, 8)
        assert masks[7][0].mask.sum() > 0

    def test_unknown_image(self):
        doc = minimal_doc()
        doc["annotations"].append({"image_id": 99, "segmentation": []})
        with pytest.raises(ValidationError) as ei:
            parse_coco(doc)
        assert ei.value.offending == [99]
        assert "99" in str(ei.value)

    def test_truncated(self, tmp_path):
        p = tmp_path / "a.json"
        text = json.dumps(minimal_doc())
        p.write_text(text[:40])
        with pytest.raises(InputError) as ei:
            load_coco(p)
        assert ei.value.offset is not None and 0 <= ei.value.offset <= 40

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_coco(tmp_path / "nope.json")

    def test_wrong_shape(self):
        with pytest.raises(ValidationError):
            parse_coco({"images": {}})


@settings(max_examples=60, deadline=None)
@given(st.recursive(st.none() | st.booleans() | st.integers() | st.text(max_size=5),
                    lambda c: st.lists(c, max_size=3) | st.dictionaries(st.text(max_size=8), c, max_size=3),
                    max_leaves=12))
def test_parse_total(doc):
    for candidate in (doc, {"images": doc, "annotations": []}, {"images": [], "annotations": doc}):
        try:
            parse_coco(candidate)
        except (ValidationError, FormatError):
            pass


class TestPredictions:
    def test_round_trip(self, tmp_path, rng):
        preds = {3: [InstanceMask(rng.uniform(size=(9, 7)) < 0.5, 0.25),
                     InstanceMask(rng.uniform(size=(9, 7)) < 0.5, 1.0)],
                 1: [InstanceMask(np.zeros((9, 7)), 0.0)]}
        p = tmp_path / "p.json"
        write_predictions(preds, p)
        back = load_predictions(p)
        assert sorted(back) == [1, 3]
        for k in preds:
            for a, b in zip(preds[k], back[k]):
                np.testing.assert_array_equal(a.mask, b.mask)
                assert a.score == b.score

    def test_empty(self, tmp_path):
        p = tmp_path / "p.json"
        write_predictions({}, p)
        assert json.loads(p.read_text()) == []

    def test_bad_score_writes_nothing(self, tmp_path):
        p = tmp_path / "p.json"
        with pytest.raises(ContractError):
            write_predictions({1: [InstanceMask(np.ones((2, 2)), 1.5)]}, p)
        assert not p.exists()

    def test_unwritable(self, tmp_path):
        with pytest.raises(InputError) as ei:
            write_predictions({}, tmp_path / "missing" / "p.json")
        assert "missing" in str(ei.value)

    def test_write_coco(self, tmp_path):
        m = np.zeros((4, 5), dtype=bool)
        m[1:3, 1:4] = True
        p = tmp_path / "gt.json"
        write_coco([ImageInfo(1, "a.png", 5, 4)], {1: [InstanceMask(m)]}, p)
        back = load_coco(p).masks_by_image()
        np.testing.assert_array_equal(back[1][0].mask, m)
