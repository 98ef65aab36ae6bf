import json

import numpy as np
import pytest

from xaidetect import data, models
from xaidetect.gradcore import FAKE, REAL


def test_generation_is_deterministic_and_balanced():
    a = data.generate_corpus(5, n_videos=8, frames_per_video=3)
    b = data.generate_corpus(5, n_videos=8, frames_per_video=3)
    assert a.fingerprint() == b.fingerprint()
    assert data.generate_corpus(6, n_videos=8, frames_per_video=3).fingerprint() != a.fingerprint()
    labels = [c.label for c in a.clips]
    assert labels.count(REAL) == labels.count(FAKE) == 4
    assert a.manifest["clips_per_class"] == {"real": 4, "fake": 4}


def test_frames_are_on_the_8bit_grid(small_corpus):
    f = small_corpus.frames()
    assert f.dtype == np.float32 and f.shape[1:] == (3, 32, 32)
    assert f.min() >= 0 and f.max() <= 1
    np.testing.assert_array_equal(np.round(f * 255) / np.float32(255), f)


def test_generation_rejects_bad_sizes():
    with pytest.raises(ValueError, match="even"):
        data.generate_corpus(0, n_videos=5)
    with pytest.raises(ValueError):
        data.generate_corpus(0, frame_size=16)


def test_split_is_stratified_and_video_level(small_corpus):
    train, test = data.split(small_corpus, train_frac=2 / 3, seed=0)
    assert not set(train.ids) & set(test.ids)
    assert set(train.ids) | set(test.ids) == set(small_corpus.ids)
    for side in (train, test):
        labs = [c.label for c in side.clips]
        assert labs.count(REAL) == labs.count(FAKE)


def test_default_split_is_25_train_5_test_per_class():
    c = data.generate_corpus(0, n_videos=60, frames_per_video=1)
    train, test = data.split(c)
    assert [c.label for c in train.clips].count(REAL) == 25
    assert [c.label for c in test.clips].count(FAKE) == 5


def test_split_rejects_degenerate(small_corpus):
    with pytest.raises(ValueError):
        data.split(small_corpus, train_frac=1.0)
    with pytest.raises(ValueError, match="empty side"):
        data.split(small_corpus, train_frac=0.01)


def test_twins_follow_their_source(small_corpus, trained_a):
    c = data.build_attacked_corpus(small_corpus, trained_a, "fgsm")
    train, test = data.split(c, train_frac=2 / 3, seed=1)
    for side in (train, test):
        ids = set(side.ids)
        for clip in side.clips:
            if clip.source_id:
                assert clip.source_id in ids
    again_train, again_test = data.apply_split(c, train.manifest["split"]["train"])
    assert again_train.ids == train.ids and again_test.ids == test.ids


def test_attacked_twins_and_records(small_corpus, trained_a):
    c = data.build_attacked_corpus(small_corpus, trained_a, "pgd")
    twins = [x for x in c.clips if x.attack == "pgd"]
    fakes = [x for x in small_corpus.clips if x.label == FAKE]
    assert len(twins) == len(fakes)
    assert all(t.video_id == f"{t.source_id}__pgd" and t.label == FAKE for t in twins)
    assert len(c.records) == sum(len(f) for f in fakes)
    assert c.records[0]["id"].endswith("/0")
    for t in twins:
        src = next(f for f in fakes if f.video_id == t.source_id)
        assert np.abs(t.frames - src.frames).max() <= 16 / 255 + 1e-6


def test_clip_validation():
    with pytest.raises(ValueError, match="only fake"):
        data.VideoClip("x", np.zeros((1, 3, 32, 32)), REAL, "pgd")
    with pytest.raises(ValueError, match="label"):
        data.VideoClip("x", np.zeros((1, 3, 32, 32)), 2)
    with pytest.raises(ValueError, match="frames"):
        data.VideoClip("x", np.zeros((3, 32, 32)), REAL)


def test_pairing_keeps_only_frames_called_real(small_corpus, trained_a):
    c = data.build_attacked_corpus(small_corpus, trained_a, "pgd")
    ps = data.pair_with_xai(c, trained_a, "saliency")
    z = models.predict(trained_a, ps.images)
    assert np.all(models.deepfake_labels(z) == REAL)
    assert set(np.unique(ps.labels)) <= {models.UNATTACKED, models.ATTACKED}
    peaks = np.abs(ps.maps).reshape(len(ps), -1).max(1)
    np.testing.assert_allclose(peaks[peaks > 0], 1.0, atol=1e-6)
    black = ps.with_black_maps()
    assert not black.maps.any() and black.images is ps.images
    assert data.pair_with_xai(c, trained_a, "saliency", include_black=True).method == "black"


def test_face_crop():
    f = np.arange(3 * 40 * 40, dtype=np.float32).reshape(3, 40, 40)
    np.testing.assert_array_equal(data.face_crop(f), f[:, 4:36, 4:36])
    with pytest.raises(Exception, match="smaller"):
        data.face_crop(np.zeros((3, 20, 20)))


def test_corpus_png_round_trip_is_bit_exact(tmp_path, small_corpus):
    data.save_corpus(small_corpus, tmp_path / "c")
    back = data.load_corpus(tmp_path / "c")
    assert back.fingerprint() == small_corpus.fingerprint()
    assert (tmp_path / "c" / small_corpus.clips[0].video_id / "frame_000.png").exists()


def test_corpus_checksum_detects_tampering(tmp_path, small_corpus):
    from PIL import Image

    data.save_corpus(small_corpus, tmp_path / "c")
    p = tmp_path / "c" / small_corpus.clips[0].video_id / "frame_000.png"
    px = np.asarray(Image.open(p)).copy()
    px[0, 0, 0] ^= 1
    Image.fromarray(px).save(p)
    with pytest.raises(ValueError, match="checksum"):
        data.load_corpus(tmp_path / "c")


def test_attacked_round_trip(tmp_path, small_corpus, trained_a):
    c = data.build_attacked_corpus(small_corpus, trained_a, "fgsm")
    data.save_attacked(c, tmp_path / "a.xadf")
    clips, meta = data.load_attacked(tmp_path / "a.xadf")
    twins = [x for x in c.clips if x.attack != "none"]
    assert [x.video_id for x in clips] == [x.video_id for x in twins]
    for a, b in zip(clips, twins):
        np.testing.assert_array_equal(a.frames, b.frames)
    assert meta["records"] == json.loads(json.dumps(c.records))
    with pytest.raises(ValueError, match="attacked clips"):
        data.save_corpus(c, tmp_path / "bad")
