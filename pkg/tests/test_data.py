import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eeggaze import data as D
from eeggaze.model import BadMagicError, FormatError, TruncatedError, VersionError


@pytest.fixture(scope="module")
def small():
    return D.generate_synthetic(12, channels=5, timesteps=20, seed=3, noise_sigma=0.5)


class TestSynthetic:
    def test_shapes_and_range(self):
        ds = D.generate_synthetic(500, channels=6, timesteps=10, seed=1)
        assert ds.signals.shape == (500, 6, 10, 1) and ds.labels.shape == (500, 2)
        assert ds.signals.dtype == np.float32
        assert ds.labels[:, 0].min() >= 0 and ds.labels[:, 0].max() <= 800
        assert ds.labels[:, 1].min() >= 0 and ds.labels[:, 1].max() <= 600

    def test_deterministic(self):
        a = D.generate_synthetic(20, 4, 8, seed=9, noise_sigma=1.0)
        b = D.generate_synthetic(20, 4, 8, seed=9, noise_sigma=1.0)
        assert a.signals.tobytes() == b.signals.tobytes() and a.labels.tobytes() == b.labels.tobytes()
        c = D.generate_synthetic(20, 4, 8, seed=10, noise_sigma=1.0)
        assert a.labels.tobytes() != c.labels.tobytes()

    def test_noise_free_labels_decode_linearly(self):
        ds = D.generate_synthetic(300, channels=16, timesteps=50, seed=2, noise_sigma=0.0)
        feats = np.column_stack([ds.signals[..., 0].astype(np.float64).mean(axis=2), np.ones(len(ds))])
        coef, *_ = np.linalg.lstsq(feats, ds.labels.astype(np.float64), rcond=None)
        err = np.abs(feats @ coef - ds.labels)
        assert np.max(err / np.abs(ds.labels).max()) < 1e-3

    def test_noise_level(self):
        clean = D.generate_synthetic(50, 4, 64, seed=4)
        noisy = D.generate_synthetic(50, 4, 64, seed=4, noise_sigma=2.0)
        assert abs((noisy.signals - clean.signals).std() - 2.0) < 0.05

    def test_map_shared_across_sample_seeds(self):
        def feats(ds):
            return np.column_stack([ds.signals[..., 0].astype(np.float64).mean(axis=2), np.ones(len(ds))])

        a = D.generate_synthetic(100, 8, 30, seed=1)
        b = D.generate_synthetic(100, 8, 30, seed=2)
        coef, *_ = np.linalg.lstsq(feats(a), a.labels, rcond=None)
        assert np.abs(feats(b) @ coef - b.labels).max() < 0.5
        c = D.generate_synthetic(100, 8, 30, seed=2, map_seed=5)
        assert np.abs(feats(c) @ coef - c.labels).max() > 10

    @pytest.mark.parametrize("kw", [dict(n=0), dict(n=3, noise_sigma=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            D.generate_synthetic(**kw)

    def test_standardized_flag(self, small):
        s = small.standardized()
        np.testing.assert_allclose(s.signals.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(s.signals.std(axis=(0, 2, 3)), 1, atol=1e-4)


class TestFile:
    def test_round_trip_bitwise(self, small, tmp_path):
        path = tmp_path / "d.eegr"
        D.save(small, path)
        back = D.load(path)
        assert back.signals.tobytes() == small.signals.tobytes()
        assert back.labels.tobytes() == small.labels.tobytes()
        assert D.to_bytes(back) == path.read_bytes()

    def test_layout_is_little_endian_sample_channel_time(self, small):
        blob = D.to_bytes(small)
        assert blob[:4] == b"EEGR"
        assert struct.unpack_from("<4I", blob, 4) == (1, 12, 5, 20)
        # sample 2, channel 3, timestep 7
        off = 20 + 4 * (2 * 5 * 20 + 3 * 20 + 7)
        assert struct.unpack_from("<f", blob, off)[0] == small.signals[2, 3, 7, 0]
        label_off = 20 + 4 * 12 * 5 * 20 + 4 * (2 * 11 + 1)
        assert struct.unpack_from("<f", blob, label_off)[0] == small.labels[11, 1]

    def test_header_count_disagrees_with_length(self, small):
        blob = bytearray(D.to_bytes(small))
        blob[8:12] = (13).to_bytes(4, "little")
        with pytest.raises(TruncatedError):
            D.from_bytes(bytes(blob))
        blob[8:12] = (11).to_bytes(4, "little")
        with pytest.raises(D.CountMismatchError):
            D.from_bytes(bytes(blob))

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.eegr"
        path.write_bytes(b"")
        with pytest.raises(FormatError):
            D.load(path)

    def test_bad_magic_and_version(self, small):
        blob = bytearray(D.to_bytes(small))
        with pytest.raises(BadMagicError):
            D.from_bytes(b"EEGM" + bytes(blob[4:]))
        blob[4:8] = (9).to_bytes(4, "little")
        with pytest.raises(VersionError):
            D.from_bytes(bytes(blob))

    def test_truncated_header(self):
        with pytest.raises(TruncatedError):
            D.from_bytes(b"EEGR\x01\x00")


class TestSplit:
    def test_sizes(self):
        tr, va, te = D.split(100, D.SplitSpec(fractions=(0.7, 0.15, 0.15)))
        assert (tr.size, va.size, te.size) == (70, 15, 15)

    def test_partition_sizes_rounding(self):
        assert D.partition_sizes(101, (0.7, 0.15, 0.15)) == (70, 15, 16)
        assert D.partition_sizes(10, (0.33, 0.33, 0.34)) == (3, 3, 4)

    def test_fixed_mode_epoch_independent(self):
        spec = D.SplitSpec("fixed", seed=4)
        for a, b in zip(D.split(200, spec, 1), D.split(200, spec, 2)):
            np.testing.assert_array_equal(a, b)

    def test_per_epoch_mode(self):
        spec = D.SplitSpec("per-epoch", seed=4)
        tr1, va1, te1 = D.split(200, spec, 1)
        tr2, va2, te2 = D.split(200, spec, 2)
        np.testing.assert_array_equal(te1, te2)
        assert not np.array_equal(tr1, tr2)
        np.testing.assert_array_equal(np.sort(np.concatenate([tr1, va1])), np.sort(np.concatenate([tr2, va2])))

    def test_test_set_shared_across_modes(self):
        a = D.split(300, D.SplitSpec("fixed", seed=8))[2]
        b = D.split(300, D.SplitSpec("per-epoch", seed=8), 5)[2]
        np.testing.assert_array_equal(a, b)

    @settings(max_examples=40)
    @given(st.integers(20, 400), st.integers(0, 10**6), st.integers(1, 50),
           st.sampled_from(["fixed", "per-epoch"]))
    def test_disjoint_and_exhaustive(self, n, seed, epoch, mode):
        parts = D.split(n, D.SplitSpec(mode, seed=seed), epoch)
        allidx = np.concatenate(parts)
        np.testing.assert_array_equal(np.sort(allidx), np.arange(n))

    def test_accepts_dataset(self, small):
        assert sum(p.size for p in D.split(small, D.SplitSpec(fractions=(0.5, 0.25, 0.25)))) == 12

    @pytest.mark.parametrize("fr", [(0.5, 0.5, 0.0), (0.6, 0.3, 0.3), (1.0, 0.0, 0.0)])
    def test_degenerate_fractions(self, fr):
        with pytest.raises(ValueError):
            D.SplitSpec(fractions=fr)

    def test_too_small(self):
        with pytest.raises(ValueError):
            D.split(3, D.SplitSpec())

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            D.SplitSpec("random")


class TestBatches:
    def test_sizes(self):
        assert [b.size for b in D.batches(np.arange(130), 64)] == [64, 64, 2]

    def test_deterministic_and_epoch_dependent(self):
        a = D.batches(np.arange(100), 16, seed=1, epoch=3)
        b = D.batches(np.arange(100), 16, seed=1, epoch=3)
        c = D.batches(np.arange(100), 16, seed=1, epoch=4)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[0], c[0])

    @given(st.integers(1, 300), st.integers(1, 70), st.integers(0, 99))
    def test_partition(self, n, bs, epoch):
        idx = np.arange(n) * 3
        got = np.concatenate(D.batches(idx, bs, 0, epoch))
        np.testing.assert_array_equal(np.sort(got), idx)

    def test_invalid_batch_size(self):
        with pytest.raises(ValueError):
            D.batches(np.arange(3), 0)
