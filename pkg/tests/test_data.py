import struct

import numpy as np
import pytest

from core.errors import ConfigError, ContainerError, ContractError, DimensionError, ImageFormatError
from core.metrics import psnr, ssim, warp, warp_error
from core.rng import CounterRng
from core.storage import (MAGIC, decode_tensors, encode_tensors, load_pgm, load_ppm, load_tensors, read_clip,
                          read_manifest, save_frame, save_pgm, save_ppm, save_tensors, write_dataset)
from core.synth import Clip, DegradeParams, degrade, gaussian_kernel, synth_clip


# =============================================================================
# Procedural clips
# =============================================================================

class TestSynth:

    def test_checker_pattern(self):
        clip = synth_clip("checker", 2, 16, 16, seed=0, period=2)
        yy, xx = np.mgrid[0:16, 0:16]
        expected = ((yy // 2 + xx // 2) % 2).astype(np.float64)
        for t in range(2):
            for c in range(3):
                np.testing.assert_array_equal(clip.frames[t, c], expected)

    def test_moving_pattern_is_an_exact_roll(self):
        clip = synth_clip("moving_pattern", 4, 32, 32, seed=3, velocity=(1, 0))
        for t in range(3):
            np.testing.assert_array_equal(clip.frames[t + 1], np.roll(clip.frames[t], 1, axis=1))
        np.testing.assert_array_equal(clip.flow[:, 0], 1.0)
        np.testing.assert_array_equal(clip.flow[:, 1], 0.0)

    @pytest.mark.parametrize("kind", ["checker", "ramp", "texture", "moving_pattern"])
    def test_deterministic_and_in_range(self, kind):
        a = synth_clip(kind, 3, 16, 24, seed=7)
        b = synth_clip(kind, 3, 16, 24, seed=7)
        np.testing.assert_array_equal(a.frames, b.frames)
        assert a.frames.shape == (3, 3, 16, 24)
        assert a.frames.min() >= 0.0 and a.frames.max() <= 1.0
        assert a.flow.shape == (2, 2, 16, 24)

    def test_static_kinds_have_zero_flow(self):
        np.testing.assert_array_equal(synth_clip("texture", 3, 16, 16, seed=1).flow, 0.0)

    def test_single_frame_has_no_flow(self):
        assert synth_clip("ramp", 1, 16, 16, seed=1).flow is None

    def test_invalid_requests(self):
        with pytest.raises(ConfigError):
            synth_clip("noise", 2, 16, 16, seed=0)
        with pytest.raises(ConfigError):
            synth_clip("checker", 2, 8, 16, seed=0)
        with pytest.raises(ConfigError):
            synth_clip("checker", 0, 16, 16, seed=0)

    def test_clip_validates_flow(self):
        with pytest.raises(DimensionError):
            Clip(np.zeros((2, 3, 4, 4)), np.zeros((2, 2, 4, 4)))


class TestDegrade:

    def test_identity_parameters(self):
        clip = synth_clip("texture", 2, 16, 16, seed=2)
        out = degrade(clip, DegradeParams(blur_sigma=0.0, downscale=1, noise_sigma=0.0), seed=0)
        np.testing.assert_array_equal(out.frames, clip.frames)

    def test_geometry_and_flow_scaling(self):
        clip = synth_clip("moving_pattern", 3, 64, 64, seed=2, velocity=(0, 4))
        out = degrade(clip, DegradeParams(downscale=4), seed=0)
        assert out.frames.shape == (3, 3, 16, 16)
        assert out.frames.min() >= 0.0 and out.frames.max() <= 1.0
        np.testing.assert_allclose(out.flow[:, 1], 1.0)

    def test_noise_variance(self):
        clip = Clip(np.full((1, 1, 320, 320), 0.5))
        out = degrade(clip, DegradeParams(blur_sigma=0.0, downscale=1, noise_sigma=0.1), seed=4)
        assert np.var(out.frames) == pytest.approx(0.01, rel=0.1)

    def test_seeded(self):
        clip = synth_clip("ramp", 2, 32, 32, seed=2)
        a = degrade(clip, DegradeParams(), seed=5).frames
        np.testing.assert_array_equal(a, degrade(clip, DegradeParams(), seed=5).frames)
        assert not np.array_equal(a, degrade(clip, DegradeParams(), seed=6).frames)

    def test_quantization_levels(self):
        clip = synth_clip("ramp", 1, 32, 32, seed=2)
        out = degrade(clip, DegradeParams(downscale=2, quantize_levels=4), seed=0)
        np.testing.assert_allclose(np.unique(out.frames) * 3, np.round(np.unique(out.frames) * 3), atol=1e-12)

    def test_indivisible(self):
        with pytest.raises(DimensionError):
            degrade(synth_clip("ramp", 1, 18, 16, seed=0), DegradeParams(downscale=4), seed=0)

    def test_invalid_parameters(self):
        with pytest.raises(ConfigError):
            DegradeParams(downscale=0)
        with pytest.raises(ConfigError):
            DegradeParams(quantize_levels=1)

    def test_kernel_is_normalised(self):
        assert gaussian_kernel(1.5).sum() == pytest.approx(1.0)
        np.testing.assert_array_equal(gaussian_kernel(0.0), [1.0])


# =============================================================================
# Metrics
# =============================================================================

class TestPsnr:

    def test_identical_is_infinite(self):
        x = CounterRng(0).uniform((3, 8, 8))
        assert psnr(x, x) == float("inf")

    def test_uniform_error(self):
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)

    def test_matches_formula(self):
        r = CounterRng(1)
        a, b = r.uniform((3, 16, 16)), r.uniform((3, 16, 16))
        assert psnr(a, b) == pytest.approx(10 * np.log10(1.0 / np.mean((a - b) ** 2)), abs=1e-9)

    def test_decreases_with_noise(self):
        x = CounterRng(2).uniform((3, 16, 16))
        noise = CounterRng(3).normal((3, 16, 16))
        values = [psnr(x, x + sigma * noise) for sigma in (0.01, 0.05, 0.2)]
        assert values[0] > values[1] > values[2]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError) as info:
            psnr(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))
        assert info.value.axis == 2


class TestSsim:

    def test_identical(self):
        x = CounterRng(0).uniform((3, 16, 16))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_symmetric(self):
        r = CounterRng(1)
        a, b = r.uniform((2, 3, 16, 16)), r.uniform((2, 3, 16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)

    def test_inverted_checker_scores_low(self):
        a = synth_clip("checker", 1, 16, 16, seed=0, period=2).frames[0]
        assert ssim(a, 1.0 - a) < 0.2

    def test_window_larger_than_input(self):
        with pytest.raises(DimensionError):
            ssim(np.zeros((3, 4, 16)), np.zeros((3, 4, 16)))


class TestWarpError:

    def test_exact_motion_scores_zero(self):
        assert warp_error(synth_clip("moving_pattern", 4, 32, 32, seed=1, velocity=(1, 2))) == 0.0
        assert warp_error(synth_clip("texture", 3, 16, 16, seed=1)) == 0.0

    def test_needs_flow(self):
        with pytest.raises(ContractError):
            warp_error(Clip(np.zeros((2, 3, 16, 16))))

    def test_independent_noise(self):
        static = np.full((4, 3, 64, 64), 0.5)
        noisy = static + 0.05 * np.random.default_rng(0).standard_normal(static.shape)
        clip = Clip(static, np.zeros((3, 2, 64, 64)))
        assert warp_error(clip, noisy) == pytest.approx(2 * 0.05 ** 2 * 1e3, rel=0.1)

    def test_fractional_flow_is_bilinear(self):
        frame = CounterRng(4).uniform((2, 8, 8))
        flow = np.zeros((2, 8, 8))
        flow[1] = 0.5
        np.testing.assert_allclose(warp(frame, flow), 0.5 * (frame + np.roll(frame, 1, axis=2)), atol=1e-12)


# =============================================================================
# Tensor container
# =============================================================================

@pytest.fixture
def container():
    r = CounterRng(5)
    return encode_tensors({
        "frames": r.uniform((2, 3, 4, 4), dtype=np.float32),
        "scalar": np.array(1.5),
        "empty": np.zeros((0, 3)),
    })


class TestContainer:

    def test_round_trip_is_bit_identical(self, container, tmp_path):
        r = CounterRng(5)
        original = {"frames": r.uniform((2, 3, 4, 4), dtype=np.float32), "scalar": np.array(1.5),
                    "empty": np.zeros((0, 3))}
        path = tmp_path / "x.fvsr"
        save_tensors(path, original)
        loaded = load_tensors(path)
        assert list(loaded) == list(original)
        for name, value in original.items():
            assert loaded[name].dtype == value.dtype and loaded[name].shape == value.shape
            assert loaded[name].tobytes() == value.tobytes()
        assert path.read_bytes() == container

    def test_empty_container(self):
        data = encode_tensors({})
        assert data == MAGIC + struct.pack("<HI", 1, 0)
        assert decode_tensors(data) == {}

    def test_every_truncation_is_rejected(self, container):
        for end in range(len(container)):
            with pytest.raises(ContainerError):
                decode_tensors(container[:end])

    def test_corrupted_bytes_never_escape_as_other_errors(self, container):
        for offset in range(len(container)):
            corrupted = bytearray(container)
            corrupted[offset] ^= 0xFF
            try:
                decode_tensors(bytes(corrupted))
            except ContainerError:
                pass

    def test_huge_extent_on_empty_tensor(self):
        data = (MAGIC + struct.pack("<HI", 1, 1) + struct.pack("<H", 1) + b"e"
                + struct.pack("<BB", 1, 2) + struct.pack("<2Q", 0, 2 ** 63))
        with pytest.raises(ContainerError) as info:
            decode_tensors(data)
        assert info.value.offset == 15

    def test_rank_beyond_numpy_limit(self):
        data = (MAGIC + struct.pack("<HI", 1, 1) + struct.pack("<H", 1) + b"e"
                + struct.pack("<BB", 1, 80) + struct.pack("<80Q", *([1] * 80)) + struct.pack("<d", 0.0))
        with pytest.raises(ContainerError):
            decode_tensors(data)

    def test_bad_magic_and_version(self, container):
        with pytest.raises(ContainerError) as info:
            decode_tensors(b"XXXX" + container[4:])
        assert info.value.offset == 0
        with pytest.raises(ContainerError) as info:
            decode_tensors(MAGIC + struct.pack("<HI", 2, 0))
        assert info.value.offset == 4

    def test_trailing_bytes(self, container):
        with pytest.raises(ContainerError):
            decode_tensors(container + b"\x00")

    def test_unsupported_dtype(self):
        with pytest.raises(ContractError):
            encode_tensors({"ids": np.arange(3)})


# =============================================================================
# Images and dataset layout
# =============================================================================

class TestImages:

    def test_pgm_byte_mapping(self, tmp_path):
        path = tmp_path / "x.pgm"
        save_pgm(path, np.array([[0.0, 0.5, 1.0, 2.0]]))
        assert path.read_bytes().endswith(bytes([0, 128, 255, 255]))

    def test_pgm_round_trip(self, tmp_path):
        frame = CounterRng(1).uniform((1, 6, 5))
        path = tmp_path / "x.pgm"
        save_pgm(path, frame)
        np.testing.assert_allclose(load_pgm(path), frame[0], atol=0.5 / 255 + 1e-12)

    def test_ppm_round_trip(self, tmp_path):
        frame = CounterRng(2).uniform((3, 4, 7))
        path = save_frame(str(tmp_path / "x"), frame)
        assert path.endswith(".ppm")
        np.testing.assert_allclose(load_ppm(path), frame, atol=0.5 / 255 + 1e-12)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n2 2\n255\n" + bytes(4))
        with pytest.raises(ImageFormatError):
            load_pgm(path)

    def test_wrong_image_kind(self, tmp_path):
        path = save_frame(str(tmp_path / "gray"), np.zeros((4, 4)))
        with pytest.raises(ImageFormatError):
            load_ppm(path)

    def test_ppm_needs_three_channels(self, tmp_path):
        with pytest.raises(DimensionError):
            save_ppm(tmp_path / "x.ppm", np.zeros((2, 4, 4)))


class TestDataset:

    def test_write_and_read(self, tmp_path):
        hr = synth_clip("moving_pattern", 2, 16, 16, seed=0)
        lr = degrade(hr, DegradeParams(downscale=2), seed=0)
        write_dataset(tmp_path, [({"id": "clip_0000", "kind": "moving_pattern"}, hr, lr)])
        assert read_manifest(tmp_path) == [{"id": "clip_0000", "kind": "moving_pattern"}]
        hr_t, lr_t = read_clip(tmp_path, "clip_0000")
        np.testing.assert_array_equal(hr_t["frames"], hr.frames)
        np.testing.assert_array_equal(lr_t["flow"], lr.flow)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path)
