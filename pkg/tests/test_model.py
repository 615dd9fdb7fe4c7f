import numpy as np
import pytest

from petricount.geometry import BBox, EllipseModel, RleMask
from petricount.model import (
    ClassLabel,
    Dataset,
    EllipseSource,
    ImageRecord,
    Instance,
    Origin,
    Split,
    assign_splits,
    other_label,
    validate_dataset,
)


def make_image(id=1, w=100, h=100, **kw):
    return ImageRecord(id=id, width=w, height=h, **kw)


def make_pred(id, image_id=1, label=ClassLabel.BVG_PLUS, score=0.9, box=(10, 10, 20, 20), **kw):
    return Instance(id=id, image_id=image_id, label=label, score=score, bbox=BBox(*box), **kw)


def square_mask(w, h, x0, y0, size):
    dense = np.zeros((h, w), dtype=np.uint8)
    dense[y0 : y0 + size, x0 : x0 + size] = 1
    return RleMask.from_dense(dense)


class TestLabels:
    def test_other_label_involution(self):
        for lab in ClassLabel:
            assert other_label(other_label(lab)) is lab
            assert other_label(lab) is not lab

    def test_wire_values(self):
        assert ClassLabel.BVG_PLUS.value == "BVG+"
        assert ClassLabel.BVG_MINUS.value == "BVG-"
        assert Origin.GROUND_TRUTH.value == "gt"


class TestValidateDataset:
    def test_clean_dataset(self):
        d = Dataset(
            id="d1",
            name="demo",
            images=[make_image()],
            ground_truth=[make_pred("g1", score=1.0, origin=Origin.GROUND_TRUTH)],
            predictions=[make_pred("p1")],
        )
        assert validate_dataset(d) == []

    def test_score_out_of_range(self):
        d = Dataset(id="d", name="d", images=[make_image()], predictions=[make_pred("p", score=1.3)])
        vs = validate_dataset(d)
        assert len(vs) == 1 and "score" in vs[0].message

    def test_gt_score_must_be_one(self):
        d = Dataset(
            id="d",
            name="d",
            images=[make_image()],
            ground_truth=[make_pred("g", score=0.8, origin=Origin.GROUND_TRUTH)],
        )
        assert any("score 1.0" in v.message for v in validate_dataset(d))

    def test_dangling_image_reference(self):
        d = Dataset(id="d", name="d", images=[make_image(id=1)], predictions=[make_pred("p", image_id=42)])
        vs = validate_dataset(d)
        assert len(vs) == 1 and "dangling" in vs[0].message

    def test_duplicate_ids(self):
        d = Dataset(
            id="d",
            name="d",
            images=[make_image(id=1), make_image(id=1)],
            predictions=[make_pred("p"), make_pred("p")],
        )
        msgs = [v.message for v in validate_dataset(d)]
        assert "duplicate image id" in msgs and "duplicate instance id" in msgs

    def test_bbox_outside_image(self):
        d = Dataset(
            id="d", name="d", images=[make_image(w=50, h=50)], predictions=[make_pred("p", box=(40, 40, 60, 55))]
        )
        assert any("outside image bounds" in v.message for v in validate_dataset(d))

    def test_unsure_needs_distinct_alt(self):
        bad1 = make_pred("a", unsure=True)
        bad2 = make_pred("b", unsure=True, alt_label=ClassLabel.BVG_PLUS)
        d = Dataset(id="d", name="d", images=[make_image()], predictions=[bad1, bad2])
        msgs = [v.message for v in validate_dataset(d)]
        assert "unsure instance missing alt_label" in msgs
        assert "alt_label equals label" in msgs

    def test_mask_consistency(self):
        m = square_mask(100, 100, 10, 10, 10)
        good = make_pred("p", box=(10, 10, 20, 20), mask=m)
        drifted = make_pred("q", box=(11, 10, 21, 20), mask=m)
        wrong_dims = make_pred("r", box=(10, 10, 20, 20), mask=square_mask(64, 64, 10, 10, 10))
        d = Dataset(id="d", name="d", images=[make_image()], predictions=[good, drifted, wrong_dims])
        vs = validate_dataset(d)
        assert not any(v.entity == "instance p" for v in vs)
        assert any(v.entity == "instance q" and "tight bbox" in v.message for v in vs)
        assert any(v.entity == "instance r" and "dimensions differ" in v.message for v in vs)

    def test_ellipse_source_requires_ellipse(self):
        im = make_image(ellipse_source=EllipseSource.FITTED)
        d = Dataset(id="d", name="d", images=[im])
        assert any("dish_ellipse missing" in v.message for v in validate_dataset(d))

    def test_idempotent(self):
        d = Dataset(id="d", name="d", images=[make_image()], predictions=[make_pred("p", score=2.0)])
        assert validate_dataset(d) == validate_dataset(d)


class TestInstance:
    def test_area_prefers_mask(self):
        m = square_mask(50, 50, 5, 5, 4)
        inst = make_pred("p", box=(5, 5, 9, 9), mask=m)
        assert inst.area() == 16.0
        no_mask = make_pred("q", box=(0, 0, 10, 5))
        assert no_mask.area() == 50.0

    def test_kept_flag(self):
        from petricount.model import ExclusionReason

        inst = make_pred("p")
        assert inst.kept
        inst.excluded = ExclusionReason.OUTSIDE_DISH
        assert not inst.kept


class TestAssignSplits:
    def test_fractions_and_determinism(self):
        imgs = [make_image(id=i) for i in range(100)]
        assign_splits(imgs, seed=7)
        counts = {s: sum(1 for im in imgs if im.split is s) for s in Split}
        assert counts[Split.TRAIN] == 65
        assert counts[Split.VAL] == 15
        assert counts[Split.TEST] == 20
        again = [make_image(id=i) for i in range(100)]
        assign_splits(again, seed=7)
        assert [im.split for im in imgs] == [im.split for im in again]

    def test_different_seeds_differ(self):
        a = [make_image(id=i) for i in range(40)]
        b = [make_image(id=i) for i in range(40)]
        assign_splits(a, seed=1)
        assign_splits(b, seed=2)
        assert [im.split for im in a] != [im.split for im in b]

    def test_every_image_assigned(self):
        imgs = [make_image(id=i) for i in range(13)]
        assign_splits(imgs, seed=0)
        assert all(im.split is not Split.UNSPLIT for im in imgs)

    def test_bad_fractions_rejected(self):
        with pytest.raises(ValueError):
            assign_splits([make_image()], seed=0, fractions=(0.5, 0.2, 0.2))


def test_image_defaults():
    im = make_image()
    assert im.split is Split.UNSPLIT
    assert im.ellipse_source is EllipseSource.NONE
    assert im.dish_ellipse is None


def test_dataset_lookups():
    d = Dataset(
        id="d",
        name="d",
        images=[make_image(id=1), make_image(id=2)],
        ground_truth=[make_pred("g1", image_id=1, origin=Origin.GROUND_TRUTH, score=1.0)],
        predictions=[make_pred("p1", image_id=1), make_pred("p2", image_id=2)],
    )
    assert [i.id for i in d.instances_for_image(1)] == ["p1"]
    assert [i.id for i in d.ground_truth_for_image(1)] == ["g1"]
    assert d.image_by_id()[2].id == 2
