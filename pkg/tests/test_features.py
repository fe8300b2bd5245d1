import numpy as np
import pytest

from coloc import features, geometry
from coloc.features import (
    HOP_LENGTH,
    N_BINS,
    N_FEATURE_CHANNELS,
    assemble_features,
    intensity_doas,
    load_tensor,
    save_tensor,
    spatial_augment,
    spatial_augment_features,
    stft,
    stft_frames,
    volume_perturb,
    volume_perturb_features,
)
from coloc.scenes import encode_foa, generate_scene, scene_rng
from conftest import tiny_scene_config


class TestStft:
    def test_frame_count_five_seconds(self):
        assert stft_frames(5 * 24000) == 250

    def test_frame_count_ceil(self):
        assert stft_frames(HOP_LENGTH) == 1
        assert stft_frames(HOP_LENGTH + 1) == 2
        assert stft_frames(10 * HOP_LENGTH) == 10

    def test_output_shape(self):
        x = np.random.default_rng(0).normal(size=24000)
        spec = stft(x)
        assert spec.shape == (stft_frames(24000), N_BINS)
        assert spec.dtype == np.complex128

    def test_pure_tone_bin(self):
        # 750 Hz sits exactly on bin 32 (24000 / 1024 * 32)
        n = 24000
        t = np.arange(n) / 24000
        x = np.sin(2 * np.pi * 750.0 * t)
        spec = np.abs(stft(x))
        interior = spec[2:-2]
        assert np.all(np.argmax(interior, axis=1) == 32)


class TestAssembleFeatures:
    def test_shape_and_channels(self):
        cfg = tiny_scene_config()
        audio, _ = generate_scene(cfg, scene_rng(3, 0))
        feats = assemble_features(audio)
        t = stft_frames(audio.shape[1])
        assert feats.shape == (N_FEATURE_CHANNELS, t, N_BINS)
        assert feats.dtype == np.float32

    def test_logpower_floor(self):
        feats = assemble_features(np.zeros((4, 4800)))
        np.testing.assert_allclose(feats[:4], np.log(1e-8), atol=1e-5)
        np.testing.assert_allclose(feats[8:], 0.0, atol=1e-7)

    def test_intensity_points_at_source(self):
        az, el = 37.0, -12.0
        rng = np.random.default_rng(7)
        sig = rng.normal(size=24000)
        audio = encode_foa(sig, az, el)
        feats = assemble_features(audio)
        doas = intensity_doas(feats)
        power = feats[0]
        # judge only the energetic bins; quiet bins carry no direction
        mask = power > np.quantile(power, 0.95)
        truth = geometry.azel_to_doa(az, el)
        errs = [
            geometry.angular_distance(doas[t, f], truth)
            for t, f in zip(*np.nonzero(mask))
        ]
        assert np.median(errs) < 1.0


class TestAugmentEquivalence:
    def _scene_feats(self, seed=11):
        cfg = tiny_scene_config()
        audio, _ = generate_scene(cfg, scene_rng(seed, 0))
        return audio

    def test_volume_feature_space(self):
        audio = self._scene_feats()
        gain = 1.3
        direct = assemble_features(volume_perturb(audio, gain))
        shifted = volume_perturb_features(assemble_features(audio), gain)
        np.testing.assert_allclose(direct[4:], shifted[4:], atol=1e-4)
        # the shift identity log(g^2 p + eps) = log(p + eps) + 2 ln g only
        # holds where power clears the eps floor; skip near-silent bins
        mask = direct[:4] > -10.0
        np.testing.assert_allclose(
            direct[:4][mask], shifted[:4][mask], atol=1e-3
        )
        assert mask.mean() > 0.5

    @pytest.mark.parametrize("rot_idx", range(16))
    def test_spatial_feature_space(self, rot_idx):
        audio = self._scene_feats()
        rot = geometry.FOA_ROTATIONS[rot_idx]
        direct = assemble_features(spatial_augment(audio, rot))
        mapped = spatial_augment_features(assemble_features(audio), rot)
        # phase wraps to the same angle modulo 2*pi
        dphi = np.angle(np.exp(1j * (direct[4:8] - mapped[4:8])))
        np.testing.assert_allclose(dphi, 0.0, atol=1e-5)
        np.testing.assert_allclose(direct[:4], mapped[:4], atol=1e-4)
        np.testing.assert_allclose(direct[8:], mapped[8:], atol=1e-5)

    def test_spatial_moves_intensity_doa(self):
        audio = encode_foa(np.random.default_rng(0).normal(size=24000), 30.0, 10.0)
        rot = geometry.FOA_ROTATIONS[5]
        feats = spatial_augment_features(assemble_features(audio), rot)
        doas = intensity_doas(feats)
        power = feats[0]
        mask = power > np.quantile(power, 0.95)
        truth = rot.map_doa(geometry.azel_to_doa(30.0, 10.0))
        errs = [
            geometry.angular_distance(doas[t, f], truth)
            for t, f in zip(*np.nonzero(mask))
        ]
        assert np.median(errs) < 1.0


class TestTensorIo:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        for shape in [(3,), (2, 5), (11, 7, 513), (1, 1, 1, 1)]:
            arr = rng.normal(size=shape).astype(np.float32)
            path = tmp_path / "x.ten"
            save_tensor(path, arr)
            back = load_tensor(path)
            assert back.shape == arr.shape
            assert back.dtype == np.float32
            np.testing.assert_array_equal(back, arr)

    def test_scalar_rank_zero(self, tmp_path):
        path = tmp_path / "s.ten"
        save_tensor(path, np.float32(2.5))
        back = load_tensor(path)
        assert back.shape == ()
        assert back == np.float32(2.5)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ten"
        path.write_bytes(b"NOTMAGIC".ljust(16) + b"\x00" * 8)
        with pytest.raises(ValueError, match="bad.ten"):
            load_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.ten"
        good = tmp_path / "good.ten"
        save_tensor(good, np.ones((4, 4), dtype=np.float32))
        data = good.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="trunc.ten"):
            load_tensor(path)

    def test_absurd_rank(self, tmp_path):
        import struct

        path = tmp_path / "rank.ten"
        path.write_bytes(features.TENSOR_MAGIC.ljust(16) + struct.pack("<I", 99))
        with pytest.raises(ValueError, match="rank"):
            load_tensor(path)
