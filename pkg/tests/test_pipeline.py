import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xaidetect import data, models, pipeline
from xaidetect.gradcore import FAKE, REAL


def mann_whitney_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@given(st.lists(st.tuples(st.integers(0, 10), st.integers(0, 1)), min_size=2, max_size=40))
def test_roc_auc_equals_rank_statistic(pairs):
    s = np.array([p[0] / 10 for p in pairs])
    y = np.array([p[1] for p in pairs])
    r = pipeline.roc_curve(s, y)
    if y.min() == y.max():
        assert r.auc is None
    else:
        assert 0.0 <= r.auc <= 1.0
        assert r.auc == pytest.approx(mann_whitney_auc(s, y), abs=1e-12)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=30), st.integers(0, 2**16))
def test_roc_point_at_half_reproduces_accuracy(scores, seed):
    s = np.array(scores)
    y = np.random.default_rng(seed).integers(0, 2, len(s))
    r = pipeline.roc_curve(s, y)
    acc = np.mean((s >= 0.5).astype(int) == y)
    assert abs(r.accuracy_at(0.5) - acc) <= 1e-9


def test_roc_separable_and_reversed():
    y = np.array([0, 0, 0, 1, 1])
    assert pipeline.roc_curve(np.array([0.1, 0.2, 0.3, 0.8, 0.9]), y).auc == 1.0
    assert pipeline.roc_curve(np.array([0.9, 0.8, 0.7, 0.2, 0.1]), y).auc == 0.0


def test_roc_curve_endpoints_and_csv():
    r = pipeline.roc_curve(np.array([0.2, 0.7]), np.array([0, 1]))
    assert (r.fpr[0], r.tpr[0]) == (1.0, 1.0) and (r.fpr[-1], r.tpr[-1]) == (0.0, 0.0)
    lines = r.to_csv().splitlines()
    assert lines[0] == "threshold,fpr,tpr" and len(lines) == 1 + len(r.thresholds)


def test_roc_rejects_bad_input():
    with pytest.raises(ValueError):
        pipeline.roc_curve(np.array([0.1, np.nan]), np.array([0, 1]))
    with pytest.raises(ValueError):
        pipeline.roc_curve(np.array([0.1, 0.2]), np.array([0, 2]))


@pytest.mark.parametrize("frames,expected", [([1, 1, 0], FAKE), ([1, 0], REAL), ([0, 0, 1], REAL),
                                             ([1, 1, 0, 0], REAL), ([1], FAKE)])
def test_video_label_majority(frames, expected):
    assert pipeline.video_label(frames) == expected


def test_vid_and_f2f_metrics():
    assert pipeline.vid_metric([1, 0], [[1, 1, 0], [1, 0]]) == 1.0
    assert pipeline.f2f_metric([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    with pytest.raises(ValueError):
        pipeline.f2f_metric([], [])


@pytest.fixture(scope="module")
def cascade(trained_a, small_corpus):
    det = models.build_adv_detector(trained_a, seed=0)
    return trained_a, det, small_corpus.frames()


def test_cascade_leaves_deepfake_stage_untouched(cascade):
    g, det, frames = cascade
    alone = pipeline.classify_frames(frames, g)
    both = pipeline.classify_frames(frames, g, det)
    assert alone.logits.tobytes() == both.logits.tobytes()
    np.testing.assert_array_equal(alone.deepfake, both.deepfake)
    np.testing.assert_array_equal(models.predict(g, frames), both.logits)


def test_adv_stage_only_sees_frames_called_real(cascade):
    g, det, frames = cascade
    counting = pipeline.CountingDetector(det)
    v = pipeline.classify_frames(frames, g, counting)
    n_real = int((v.deepfake == REAL).sum())
    assert 0 < n_real < len(frames)
    assert counting.frames == n_real and counting.calls == 1
    assert np.all(v.attack[v.deepfake == FAKE] == pipeline.NO_ATTACK_LABEL)
    assert np.all(np.isnan(v.score[v.deepfake == FAKE]))
    assert set(np.unique(v.attack[v.deepfake == REAL])) <= {0, 1}


def test_no_adv_call_when_everything_is_fake(cascade):
    g, det, frames = cascade
    z = models.predict(g, frames)
    fakes = frames[models.deepfake_labels(z) == FAKE]
    counting = pipeline.CountingDetector(det)
    pipeline.classify_frames(fakes, g, counting)
    assert counting.calls == 0


def test_classify_frame_record(cascade):
    g, det, frames = cascade
    out = pipeline.classify_frame(frames[0], g, det)
    assert out["deepfake"] in ("real", "fake")
    if out["deepfake"] == "real":
        assert out["attack"] in models.ATTACK_NAMES and 0 <= out["score"] <= 1


def test_face_crop_applies_to_larger_frames(cascade):
    g, det, frames = cascade
    big = np.zeros((2, 3, 40, 40), np.float32)
    big[:, :, 4:36, 4:36] = frames[:2]
    a = pipeline.classify_frames(big, g)
    np.testing.assert_array_equal(a.logits, models.predict(g, frames[:2]))


def _pairs(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3, 32, 32), dtype=np.float32)
    return data.PairedSet(x, rng.normal(size=x.shape).astype(np.float32),
                          np.arange(n) % 2, [f"v{i}" for i in range(n)], "saliency")


def test_evaluate_reports_black_ablation_and_roc(cascade):
    g, det, _ = cascade
    rep = pipeline.evaluate_adv_detector(det, {"pgd": _pairs(8, 0)}, black_maps=True)
    row = rep.rows["pgd"]
    assert row["n"] == 8 and row["n_attacked"] == 4
    assert row["delta"] == pytest.approx(row["accuracy"] - row["accuracy_black"])
    assert abs(rep.roc["pgd"].accuracy_at(0.5) - row["accuracy"]) <= 1e-9
    assert "pgd" in rep.to_json() and rep.to_csv().startswith("attack,")


def test_evaluate_rejects_empty(cascade):
    g, det, _ = cascade
    with pytest.raises(ValueError):
        pipeline.evaluate_adv_detector(det, {})
    with pytest.raises(ValueError, match="empty"):
        pipeline.evaluate_adv_detector(det, {"pgd": _pairs(8, 0).select(np.zeros(8, bool))})


def test_overhead_benchmark_with_fake_clock(cascade):
    g, det, frames = cascade
    ticks = itertools.count()
    res = pipeline.overhead_benchmark(g, det, frames[:4], ["saliency"], repeats=2,
                                      min_frames=4, min_repeats=2, timer=lambda: next(ticks) * 1e-3)
    assert set(res["table"]) == {"baseline", "saliency"}
    assert res["table"]["baseline"]["overhead_pct"] == 0.0
    assert len(res["table"]["saliency"]["passes_ms"]) == 2


def test_overhead_benchmark_minimums(cascade):
    g, det, frames = cascade
    with pytest.raises(ValueError, match="50 frames"):
        pipeline.overhead_benchmark(g, det, frames[:10])
    with pytest.raises(ValueError, match="repeats"):
        pipeline.overhead_benchmark(g, det, frames[:4], repeats=1, min_frames=4)


def test_transfer_pairs_through_target_model(trained_a, small_corpus):
    det = models.build_adv_detector(trained_a, seed=0)
    twins = data.build_attacked_corpus(small_corpus, trained_a, "fgsm")
    rep = pipeline.transfer_eval(det, trained_a, {"fgsm": twins}, "saliency", "arch-A", "arch-A")
    direct = data.pair_with_xai(twins, trained_a, "saliency")
    assert rep.rows["fgsm"]["n"] == len(direct)
    assert rep.meta["source"] == "arch-A"


# ---------------------------------------------------------------- more oracles


def test_random_scores_give_chance_auc():
    aucs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, 2000)
        aucs.append(pipeline.roc_curve(rng.permutation(y.astype(float)) + rng.random(2000) * 1e-3, y).auc)
    assert all(abs(a - 0.5) <= 0.05 for a in aucs)


@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=2, max_size=40))
def test_negated_scores_flip_auc(pairs):
    s = np.array([p[0] / 20 for p in pairs])
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    assert pipeline.roc_curve(-s, y).auc == pytest.approx(1 - pipeline.roc_curve(s, y).auc, abs=1e-12)


def test_f2f_partial_and_all_wrong():
    truth = np.zeros(10, int)
    pred = truth.copy()
    pred[3] = 1
    assert pipeline.f2f_metric(truth, pred) == 0.9
    assert pipeline.f2f_metric(truth, 1 - truth) == 0.0


def test_black_ablation_changes_only_the_map(cascade, monkeypatch):
    _, det, _ = cascade
    pairs = _pairs(6, 1)
    seen = []
    real = models.adv_logits
    monkeypatch.setattr(models, "adv_logits", lambda d, im, m: seen.append((im.copy(), m.copy())) or real(d, im, m))
    pipeline.evaluate_adv_detector(det, {"pgd": pairs}, black_maps=True)
    (im_a, m_a), (im_b, m_b) = seen
    assert im_a.tobytes() == im_b.tobytes()
    np.testing.assert_array_equal(m_a, pairs.maps)
    np.testing.assert_array_equal(m_b, 0)


def test_self_transfer_equals_direct_evaluation(trained_a, small_corpus):
    det = models.build_adv_detector(trained_a, seed=0)
    twins = data.build_attacked_corpus(small_corpus, trained_a, "fgsm")
    rep = pipeline.transfer_eval(det, trained_a, {"fgsm": twins}, "saliency", "arch-A", "arch-A")
    direct = pipeline.evaluate_adv_detector(det, {"fgsm": data.pair_with_xai(twins, trained_a, "saliency")})
    assert rep.rows["fgsm"]["accuracy"] == direct.rows["fgsm"]["accuracy"]


def test_overhead_reports_mean_at_least_min(cascade):
    g, det, frames = cascade
    res = pipeline.overhead_benchmark(g, det, frames[:4], ["saliency"], repeats=3, min_frames=4, min_repeats=2)
    for row in res["table"].values():
        assert row["min_ms"] <= row["mean_ms"] and row["min_ms"] <= row["median_ms"]
