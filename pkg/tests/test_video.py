import struct

import numpy as np
import pytest

from lowres_rppg.errors import ConfigurationError, ContractViolation, FormatError, TruncatedFileError
from lowres_rppg.video import (RoiBox, VideoClip, crop_roi, degrade, full_frame, read_clip,
                               read_roi, write_clip, write_roi)


def f32_clip(seed=0, shape=(3, 4, 6, 3), fps=25.0):
    frames = np.random.default_rng(seed).uniform(0, 1, shape).astype(np.float32)
    return VideoClip(frames.astype(np.float64), fps)


def test_round_trip_f32(tmp_path):
    clip = f32_clip()
    back = read_clip(write_clip(clip, tmp_path / "a.rpgc"))
    assert back.frames.tobytes() == clip.frames.tobytes()
    assert back.fps == clip.fps


def test_round_trip_u8(tmp_path):
    levels = np.random.default_rng(1).integers(0, 256, (2, 3, 3, 3)) / 255.0
    clip = VideoClip(levels, 30.0)
    back = read_clip(write_clip(clip, tmp_path / "a.rpgc", dtype="u8"))
    assert np.array_equal(back.frames, clip.frames)


def test_file_round_trip_is_byte_exact(tmp_path):
    p = write_clip(f32_clip(2), tmp_path / "a.rpgc")
    q = write_clip(read_clip(p), tmp_path / "b.rpgc")
    assert p.read_bytes() == q.read_bytes()


def test_zero_clip_from_hand_written_bytes(tmp_path):
    p = tmp_path / "z.rpgc"
    p.write_bytes(b"RPGC" + struct.pack("<BBHfIII", 1, 0, 0, 12.5, 2, 4, 4) + bytes(2 * 4 * 4 * 3))
    clip = read_clip(p)
    assert clip.shape == (2, 4, 4, 3)
    assert clip.fps == 12.5
    assert not clip.frames.any()


def test_truncated_payload_reports_offset(tmp_path):
    p = tmp_path / "t.rpgc"
    body = bytes(2 * 4 * 4 * 3 - 7)
    p.write_bytes(b"RPGC" + struct.pack("<BBHfIII", 1, 0, 0, 30.0, 2, 4, 4) + body)
    with pytest.raises(TruncatedFileError) as info:
        read_clip(p)
    assert info.value.offset == 24 + len(body)
    assert isinstance(info.value, OSError)


@pytest.mark.parametrize("header", [
    b"XXXX" + struct.pack("<BBHfIII", 1, 0, 0, 30.0, 1, 1, 1),
    b"RPGC" + struct.pack("<BBHfIII", 2, 0, 0, 30.0, 1, 1, 1),
    b"RPGC" + struct.pack("<BBHfIII", 1, 9, 0, 30.0, 1, 1, 1),
])
def test_bad_header(tmp_path, header):
    p = tmp_path / "bad.rpgc"
    p.write_bytes(header + bytes(3))
    with pytest.raises(FormatError):
        read_clip(p)


def test_clip_invariants():
    with pytest.raises(ContractViolation):
        VideoClip(np.full((1, 2, 2, 3), 1.5), 30.0)
    with pytest.raises(ContractViolation):
        VideoClip(np.zeros((1, 2, 2, 3)), 0.0)
    with pytest.raises(ContractViolation):
        VideoClip(np.zeros((2, 2, 3)), 30.0)


def test_degrade_identity():
    clip = f32_clip()
    assert degrade(clip, 1, 0.0).frames.tobytes() == clip.frames.tobytes()


def test_degrade_constant_clip():
    clip = VideoClip(np.full((2, 4, 4, 3), 0.3), 30.0)
    assert np.allclose(degrade(clip, 2).frames, 0.3, atol=1e-15)


def test_degrade_checkerboard_matches_block_average():
    board = (np.indices((4, 6)).sum(axis=0) % 2).astype(float)
    frames = np.repeat(board[None, :, :, None], 3, axis=3)
    clip = VideoClip(frames, 30.0)
    out = degrade(clip, 2).frames
    # brute-force block average, then nearest-neighbour expansion
    want = np.empty_like(frames)
    for i in range(4):
        for j in range(6):
            bi, bj = i // 2 * 2, j // 2 * 2
            want[0, i, j, :] = sum(frames[0, bi + a, bj + b, 0] for a in range(2) for b in range(2)) / 4
    assert np.array_equal(out, want)
    assert np.all(out == 0.5)


def test_degrade_noise_is_seeded_and_clamped():
    clip = f32_clip(3, shape=(2, 4, 4, 3))
    a, b = degrade(clip, 2, 0.5, seed=9), degrade(clip, 2, 0.5, seed=9)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert not np.array_equal(a.frames, degrade(clip, 2, 0.5, seed=10).frames)
    assert a.frames.min() >= 0 and a.frames.max() <= 1
    assert a.fps == clip.fps


def test_degrade_requires_divisible_extents():
    with pytest.raises(ConfigurationError):
        degrade(f32_clip(shape=(1, 5, 4, 3)), 2)


def test_degrade_commutes_with_aligned_crop():
    clip = f32_clip(4, shape=(3, 8, 8, 3))
    box = RoiBox(2, 4, 4, 2)
    assert np.array_equal(degrade(crop_roi(clip, box), 2).frames,
                          crop_roi(degrade(clip, 2), box).frames)


def test_crop_full_frame_is_identity():
    clip = f32_clip()
    assert np.array_equal(crop_roi(clip, full_frame(clip)).frames, clip.frames)


def test_crop_corner_pixel():
    clip = f32_clip()
    out = crop_roi(clip, RoiBox(0, 0, 1, 1))
    assert out.shape == (3, 1, 1, 3)
    assert np.array_equal(out.frames[:, 0, 0], clip.frames[:, 0, 0])
    assert out.fps == clip.fps


def test_crop_composition():
    clip = f32_clip(5, shape=(2, 10, 12, 3))
    first = crop_roi(clip, RoiBox(2, 3, 6, 7))
    twice = crop_roi(first, RoiBox(1, 2, 3, 4))
    once = crop_roi(clip, RoiBox(3, 5, 3, 4))
    assert np.array_equal(twice.frames, once.frames)


def test_crop_out_of_bounds():
    with pytest.raises(ContractViolation):
        crop_roi(f32_clip(), RoiBox(2, 0, 3, 1))


def test_roi_sidecar(tmp_path):
    p = write_roi(RoiBox(1, 2, 3, 4), tmp_path / "roi.txt")
    assert p.read_text() == "1 2 3 4\n"
    assert read_roi(p) == RoiBox(1, 2, 3, 4)
    p.write_text("1 2 x 4")
    with pytest.raises(FormatError):
        read_roi(p)
