import hashlib
from pathlib import Path

import numpy as np
import pytest

from iat.config import ConfigError, CropConfig, DatasetSpec
from iat.synthvid import (DatasetParseError, SamplingError, VideoSample, generate_dataset,
                          load_dataset, sample_pair, save_dataset, validate_dataset,
                          validate_video)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_same_seed_gives_identical_bytes(tmp_path):
    spec = DatasetSpec(num_videos=1, frames_per_video=2, seed=7)
    save_dataset(generate_dataset(spec), tmp_path / "a")
    save_dataset(generate_dataset(spec), tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_different_seed_differs():
    a = generate_dataset(DatasetSpec(num_videos=1, frames_per_video=2, seed=7))
    b = generate_dataset(DatasetSpec(num_videos=1, frames_per_video=2, seed=8))
    assert a != b


def test_only_the_target_moves_without_distractors_or_occluders():
    spec = DatasetSpec(num_videos=3, frames_per_video=6, distractor_count=(0, 0),
                       occlusion_prob=0.0, seed=3)
    for video in generate_dataset(spec):
        assert video.meta["distractor_count"] == 0 and not video.meta["occlusion"]
        for t in range(1, len(video)):
            changed = np.any(video.frames[t] != video.frames[t - 1], axis=2)
            ys, xs = np.nonzero(changed)
            allowed = np.zeros_like(changed)
            for box in (video.boxes[t - 1], video.boxes[t]):
                cx, cy, w, h = box
                allowed[int(np.floor(cy - h / 2)):int(np.ceil(cy + h / 2)),
                        int(np.floor(cx - w / 2)):int(np.ceil(cx + w / 2))] = True
            assert allowed[ys, xs].all()


def test_fifty_videos_satisfy_invariants():
    videos = generate_dataset(DatasetSpec(num_videos=50, frames_per_video=30, seed=1))
    assert len(videos) == 50
    validate_dataset(videos)
    for v in videos:
        H, W = v.frames[0].shape[:2]
        for cx, cy, w, h in v.boxes:
            # the box equals its own clip to the frame rectangle
            clipped = (max(cx - w / 2, 0), max(cy - h / 2, 0), min(cx + w / 2, W), min(cy + h / 2, H))
            assert clipped == (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def test_occluder_covers_at_most_eighty_percent():
    spec = DatasetSpec(num_videos=12, frames_per_video=12, distractor_count=(0, 0),
                       occlusion_prob=1.0, seed=5)
    clean = DatasetSpec(**{**spec.__dict__, "occlusion_prob": 0.0})
    for occ, ref in zip(generate_dataset(spec), generate_dataset(clean)):
        assert occ.meta["occlusion"]
        hit = 0
        for t, box in enumerate(occ.boxes):
            cx, cy, w, h = box
            # pixels whose centers fall inside the target box
            ys = np.arange(occ.frames[t].shape[0]) + 0.5
            xs = np.arange(occ.frames[t].shape[1]) + 0.5
            inside = ((np.abs(ys - cy) <= h / 2)[:, None] & (np.abs(xs - cx) <= w / 2)[None, :])
            diff = np.any(occ.frames[t] != ref.frames[t], axis=2)[inside]
            # one pixel row/column of rasterization slack
            assert diff.mean() <= 0.8 + 1.0 / min(w, h)
            hit += diff.any()
        assert 0 < hit < len(occ)


def test_invalid_spec_is_a_configuration_error():
    with pytest.raises(ConfigError):
        generate_dataset(DatasetSpec(num_videos=-1))
    with pytest.raises(ConfigError):
        generate_dataset(DatasetSpec(frames_per_video=0))


def test_two_frame_video_pairs_use_both_frames():
    videos = generate_dataset(DatasetSpec(num_videos=1, frames_per_video=2, seed=2))
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = sample_pair(videos, rng)
        assert {p.template_index, p.search_index} == {0, 1}


def test_zero_jitter_centers_search_box():
    videos = generate_dataset(DatasetSpec(num_videos=2, frames_per_video=4, seed=2))
    crop = CropConfig(center_jitter=0.0, scale_jitter=0.0)
    p = sample_pair(videos, np.random.default_rng(1), crop)
    np.testing.assert_allclose(p.search_box[:2], [crop.search_size / 2] * 2, atol=1e-9)
    np.testing.assert_allclose(p.template_box[:2], [crop.template_size / 2] * 2, atol=1e-9)


def test_pairs_never_mix_videos_and_contain_their_boxes():
    videos = generate_dataset(DatasetSpec(num_videos=50, frames_per_video=10, seed=4))
    by_id = {v.video_id: v for v in videos}
    crop = CropConfig()
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        p = sample_pair(videos, rng, crop)
        v = by_id[p.video_id]
        assert p.template_index != p.search_index
        assert 0 <= p.template_index < len(v) and 0 <= p.search_index < len(v)
        for box, size in ((p.template_box, crop.template_size), (p.search_box, crop.search_size)):
            cx, cy, w, h = box
            assert cx - w / 2 >= -1e-6 and cy - h / 2 >= -1e-6
            assert cx + w / 2 <= size + 1e-6 and cy + h / 2 <= size + 1e-6
        # the crop-frame box aspect matches the source annotation
        gw, gh = v.boxes[p.search_index][2:]
        assert p.search_box[2] / p.search_box[3] == pytest.approx(gw / gh, rel=1e-9)


def test_sampling_errors():
    with pytest.raises(SamplingError):
        sample_pair([], np.random.default_rng(0))
    short = VideoSample(0, [np.zeros((32, 32, 3), np.float32)], [np.array([16., 16., 8., 8.])])
    with pytest.raises(SamplingError):
        sample_pair([short], np.random.default_rng(0))


def test_save_load_round_trip(tmp_path):
    videos = generate_dataset(DatasetSpec(num_videos=2, frames_per_video=5, seed=9))
    save_dataset(videos, tmp_path)
    loaded = load_dataset(tmp_path)
    assert loaded == videos
    assert all(f.dtype == np.float32 for v in loaded for f in v.frames)


def test_empty_dataset_round_trip(tmp_path):
    save_dataset([], tmp_path)
    assert load_dataset(tmp_path) == []


def test_truncated_annotation_names_frame(tmp_path):
    videos = generate_dataset(DatasetSpec(num_videos=1, frames_per_video=5, seed=9))
    save_dataset(videos, tmp_path)
    gt = tmp_path / "0" / "groundtruth.txt"
    lines = gt.read_text().splitlines()
    gt.write_text("\n".join(lines[:3]) + "\n")
    with pytest.raises(DatasetParseError, match=r"video 0, frame 3"):
        load_dataset(tmp_path)


def test_garbled_annotation_names_frame(tmp_path):
    videos = generate_dataset(DatasetSpec(num_videos=1, frames_per_video=5, seed=9))
    save_dataset(videos, tmp_path)
    gt = tmp_path / "0" / "groundtruth.txt"
    lines = gt.read_text().splitlines()
    lines[2] = "2 1.0 oops 3.0 4.0"
    gt.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetParseError, match=r"frame 2"):
        load_dataset(tmp_path)


def test_validator_rejects_box_outside_frame():
    v = generate_dataset(DatasetSpec(num_videos=1, frames_per_video=3, seed=1))[0]
    v.boxes[1] = np.array([1.0, 1.0, 10.0, 10.0])
    with pytest.raises(ValueError, match="leaves the frame"):
        validate_video(v)


def test_distractors_borrow_other_videos_appearance():
    from iat.synthvid import appearance

    spec = DatasetSpec(num_videos=4, frames_per_video=2, distractor_count=(2, 2), seed=0)
    looks = {i: appearance(spec.seed, i) for i in range(4)}
    for v in generate_dataset(spec):
        own = looks[v.video_id].color
        frame = v.frames[0]
        # some other video's body color shows up outside the target box
        cx, cy, w, h = v.boxes[0]
        mask = np.ones(frame.shape[:2], bool)
        mask[int(cy - h / 2):int(cy + h / 2) + 1, int(cx - w / 2):int(cx + w / 2) + 1] = False
        found = False
        for vid, look in looks.items():
            if vid == v.video_id or np.allclose(look.color, own):
                continue
            q = np.round(look.color * 255) / 255
            if np.any(np.all(np.abs(frame[mask] - q) < 1e-6, axis=1)):
                found = True
        assert found
