import math

import numpy as np
import pytest

from marstrn.data import BoundingBox, NavSequence, synth_landmarks, synth_navigation
from marstrn.evaluator import (ABLATION_SUBSETS, ConstantEmbedder, EmbeddingDB, OracleEmbedder, RAReport,
                               ablation_driver, db_query, incremental_recall, iou, lost_in_space_eval,
                               moon_navigation_eval, nms, recall_at_1)
from marstrn.transforms import TransformRanges


@pytest.fixture(scope="module")
def test_split():
    return synth_landmarks(12, 32, rng_seed=2)


@pytest.fixture(scope="module")
def nav():
    return synth_navigation(synth_landmarks(20, 32, rng_seed=1), n_frames=15, n_orbits=3, rng_seed=0)


class PixelProjection:
    """A fixed random projection of centred pixels: a deliberately mediocre embedder."""

    def __init__(self, res, dim=16, seed=0):
        self.w = np.random.default_rng(seed).normal(size=(res * res, dim))

    def __call__(self, images, ids):
        flat = images.reshape(len(images), -1)
        return (flat - flat.mean(axis=1, keepdims=True)) @ self.w


def replay_incremental(ids, embeddings, threshold):
    """Step-by-step reference of the enrol-on-miss stream, in plain Python."""
    gallery, correct, incorrect, missed = [], 0, 0, 0
    for iid, z in zip(ids, embeddings):
        z = [float(v) for v in z]
        norm = math.sqrt(sum(v * v for v in z))
        best = None
        for gid, g in gallery:
            s = sum(a * b for a, b in zip(g, z)) / norm
            if s >= threshold and (best is None or s > best[1]):
                best = (gid, s)
        if best is None:
            if any(gid == iid for gid, _ in gallery):
                missed += 1
            gallery.append((iid, [v / norm for v in z]))
        elif best[0] == iid:
            correct += 1
        else:
            incorrect += 1
    return correct, incorrect, missed


# -- database -----------------------------------------------------------------

def test_query_equal_to_stored_vector():
    db = EmbeddingDB()
    db.add("a", [0.0, 1.0])
    db.add("b", [3.0, 4.0])
    m = db_query(db, [6.0, 8.0])
    assert m.instance_id == "b" and m.similarity == pytest.approx(1.0)


def test_empty_db_no_match():
    assert EmbeddingDB().query([1.0, 0.0]) is None


def test_hand_computed_similarities():
    db = EmbeddingDB(0.9)
    db.add("u", [1.0, 0.0])
    db.add("v", [0.8, 0.6])
    q = np.array([0.95, 0.312])
    sims = db.similarities(q)
    qn = q / math.hypot(0.95, 0.312)
    assert sims == pytest.approx([qn[0], 0.8 * qn[0] + 0.6 * qn[1]], abs=1e-12)
    assert sims[0] > sims[1] > 0.9
    assert db.query(q).instance_id == "u"


def test_below_threshold_is_no_match():
    db = EmbeddingDB(0.9)
    db.add("u", [1.0, 0.0])
    assert db.query([1.0, 1.0]) is None  # cos 45 deg ~ 0.707
    assert db.nearest([1.0, 1.0]).instance_id == "u"


def test_ties_go_to_earliest_enrollment():
    db = EmbeddingDB()
    db.add("first", [1.0, 0.0])
    db.add("second", [2.0, 0.0])
    assert db.query([1.0, 0.0]).instance_id == "first"


def test_db_input_errors():
    with pytest.raises(ValueError):
        EmbeddingDB(0.0)
    with pytest.raises(ValueError):
        EmbeddingDB().add("a", [0.0, 0.0])
    db = EmbeddingDB()
    db.add("a", [1.0])
    with pytest.raises(ValueError):
        db.query([0.0])


def test_ra_arithmetic():
    r = RAReport(correct=3, incorrect=1, missed=1)
    assert r.ra == 60.0 and r.scored == 5
    assert RAReport().ra == 0.0


# -- recall@1 -----------------------------------------------------------------

def test_recall_oracle_is_perfect(test_split):
    assert recall_at_1(OracleEmbedder(), test_split, 0) == 100.0


def test_recall_constant_embedder_is_chance(test_split):
    # every gallery similarity ties, the earliest entry wins, so exactly one query is right
    assert recall_at_1(ConstantEmbedder(), test_split, 3) == pytest.approx(100 / len(test_split))


def test_recall_deterministic(test_split):
    emb = PixelProjection(32)
    assert recall_at_1(emb, test_split, 4) == recall_at_1(emb, test_split, 4)


# -- incremental --------------------------------------------------------------

def test_incremental_oracle(test_split):
    r = incremental_recall(OracleEmbedder(), test_split, 1)
    assert (r.correct, r.incorrect, r.missed) == (len(test_split), 0, 0) and r.ra == 100.0


def test_incremental_constant_embedder_matches_hand_simulation(test_split):
    r, trace = incremental_recall(ConstantEmbedder(), test_split, 2, return_trace=True)
    first = trace.ids[0]
    # by hand: item 0 enrols, every later query matches it, so only its own repeat is correct
    n = 2 * len(test_split)
    assert (r.correct, r.incorrect, r.missed) == (1, n - 2, 0)
    assert trace.outcomes[0] == "enrolled"
    assert trace.outcomes[trace.ids.index(first, 1)] == "correct"
    assert r.ra == pytest.approx(100 / (n - 1))


def test_incremental_matches_reference_replay(test_split):
    r, trace = incremental_recall(PixelProjection(32), test_split, 5, threshold=0.5, return_trace=True)
    assert (r.correct, r.incorrect, r.missed) == replay_incremental(trace.ids, trace.embeddings, 0.5)
    assert sorted(trace.ids) == sorted(test_split.instance_ids * 2)


def test_incremental_empty_split_errors():
    with pytest.raises(ValueError):
        incremental_recall(OracleEmbedder(), synth_landmarks(3, 16).subset([]), 0)


# -- NMS ----------------------------------------------------------------------

def test_iou_by_hand():
    a = BoundingBox(0, 0, 10, 10, "a", 0.9)
    assert iou(a, BoundingBox(1, 1, 10, 10, "b", 0.8)) == pytest.approx(81 / 119)
    assert iou(a, BoundingBox(5, 5, 10, 10, "c")) == pytest.approx(25 / 175)
    assert iou(a, BoundingBox(20, 20, 1, 1, "d")) == 0.0


def test_nms_cases():
    a = BoundingBox(0, 0, 10, 10, "a", 0.9)
    b = BoundingBox(1, 1, 10, 10, "b", 0.8)
    c = BoundingBox(5, 5, 10, 10, "c", 0.7)
    assert nms([b, a]) == [a]
    assert nms([a, c]) == [a, c]
    assert nms([]) == []


def test_nms_unscored_boxes_rank_by_area():
    small = BoundingBox(0, 0, 10, 10, "s")
    big = BoundingBox(0, 0, 11, 11, "b")
    assert nms([small, big]) == [big]


# -- navigation ---------------------------------------------------------------

def test_navigation_oracle_three_frames(nav):
    short = NavSequence(nav.frames[:3], nav.boxes[:3], [0])
    r = moon_navigation_eval(OracleEmbedder(), short, 0, patch_res=32)
    assert r.ra == 100.0 and r.incorrect == 0 and r.missed == 0


def test_navigation_matches_reference_replay(nav):
    short = NavSequence(nav.frames[:10], nav.boxes[:10], [0, 5])
    r, trace = moon_navigation_eval(PixelProjection(32, seed=3), short, 1, patch_res=32, threshold=0.6,
                                    return_trace=True)
    assert (r.correct, r.incorrect, r.missed) == replay_incremental(trace.ids, trace.embeddings, 0.6)
    assert r.scored > 0


def test_navigation_without_annotations_errors(nav):
    with pytest.raises(ValueError):
        moon_navigation_eval(OracleEmbedder(), NavSequence(nav.frames[:2], [[], []], [0]), 0)


# -- lost in space ------------------------------------------------------------

def test_lost_in_space_oracle(nav):
    r = lost_in_space_eval(OracleEmbedder(), nav, 0, patch_res=32)
    assert r.ra == 100.0 and r.scored > 0


def test_lost_in_space_unseen_crater_is_missed(nav):
    boxes = [list(b) for b in nav.boxes]
    last = nav.orbit_frames(2)[0]
    boxes[last] = boxes[last] + [BoundingBox(0, 0, 20, 20, "never-seen")]
    altered = NavSequence(nav.frames, boxes, nav.orbit_boundaries)
    r, db = lost_in_space_eval(OracleEmbedder(), altered, 0, patch_res=32, return_db=True)
    assert "never-seen" not in db.ids
    assert r.missed >= 1 and r.incorrect == 0


def test_lost_in_space_db_is_frozen(nav):
    _, db = lost_in_space_eval(ConstantEmbedder(), nav, 0, patch_res=32, return_db=True)
    seeded = sum(len(nav.boxes[k]) for k in nav.orbit_frames(0))
    assert len(db) == seeded


def test_lost_in_space_needs_two_orbits(nav):
    with pytest.raises(ValueError):
        lost_in_space_eval(OracleEmbedder(), NavSequence(nav.frames, nav.boxes, [0]), 0)


# -- ablation -----------------------------------------------------------------

def test_ablation_emits_four_reports(test_split):
    reports = ablation_driver(incremental_recall, OracleEmbedder(), test_split, 0)
    assert list(reports) == list(ABLATION_SUBSETS)
    assert all(r.ra == 100.0 and r.transform_subset == s for s, r in reports.items())


def test_identity_subset_oracle(test_split):
    reports = ablation_driver(incremental_recall, OracleEmbedder(), test_split, 0, subsets=["identity"])
    assert reports["identity"].ra == 100.0


def test_rotation_subset_has_no_translation():
    r = TransformRanges().restricted("rotation")
    assert r.max_translate_frac == 0.0 and r.brightness == (1.0, 1.0) and r.rotation == (0.0, 360.0)


def test_ablation_rejects_unknown_subset(test_split):
    with pytest.raises(ValueError):
        ablation_driver(incremental_recall, OracleEmbedder(), test_split, 0, subsets=["shear"])
