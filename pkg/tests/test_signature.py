import io

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from siglearn import tensor_algebra as ta
from siglearn.errors import DomainError, OrderingError, RangeError
from siglearn.signature import (
    CadlagPath,
    SignatureConfig,
    batch_prefix_signatures,
    incremental_update,
    new_filtered_proxy,
    path_signature,
    paths_from_csv,
    paths_to_csv,
    segment_signature,
)

CFG = SignatureConfig(degree=3, time_scale=1.0)


def random_path(rng, n_points=8, dim=2, jump_prob=0.3):
    times = np.cumsum(rng.uniform(0.05, 0.3, size=n_points))
    values = np.cumsum(rng.normal(scale=0.4, size=(n_points, dim)), axis=0)
    flags = rng.random(n_points) < jump_prob
    flags[0] = False
    return CadlagPath(times, values, flags)


def words_with_time(channels, degree):
    """Boolean mask over the flat index: True where the word uses channel 0."""
    mask = [False]  # level 0
    for lvl in range(1, degree + 1):
        for idx in range(channels**lvl):
            digits = []
            v = idx
            for _ in range(lvl):
                digits.append(v % channels)
                v //= channels
            mask.append(0 in digits)
    return np.array(mask)


class TestSegment:
    def test_zero_increment_is_identity(self):
        seg = segment_signature(CFG, 2, 0.0, np.zeros(2))
        assert np.array_equal(seg.data, ta.identity(3, 3).data)

    def test_level_one_is_increment(self):
        seg = segment_signature(CFG, 2, 0.5, np.array([0.2, -0.1]))
        assert np.allclose(seg.level(1), [0.5, 0.2, -0.1], atol=0)

    def test_negative_duration_rejected(self):
        with pytest.raises(DomainError):
            segment_signature(CFG, 2, -0.1, np.zeros(2))

    def test_jump_vs_steep_ramp_sweep(self):
        # Pure-space coordinates agree exactly for every ramp duration; the
        # time-channel coordinates shrink linearly as the ramp steepens.
        dx = np.array([0.7, -0.4])
        jump = segment_signature(CFG, 2, 0.0, dx)
        timey = words_with_time(3, 3)
        prev_err = None
        for eps in (1e-2, 1e-3, 1e-4, 1e-5, 1e-6):
            # fine-interpolation oracle: 64 collinear pieces of the ramp
            pieces = ta.identity_flat(3, 3)
            for _ in range(64):
                seg = segment_signature(CFG, 2, eps / 64, dx / 64)
                pieces = ta.product_flat(3, 3, pieces, seg.data)
            ramp = segment_signature(CFG, 2, eps, dx)
            assert np.max(np.abs(pieces - ramp.data)) < 1e-12
            diff = np.abs(ramp.data - jump.data)
            assert np.max(diff[~timey]) < 1e-12
            err = np.max(diff[timey])
            if prev_err is not None:
                assert err < prev_err / 5
            prev_err = err
        assert prev_err < 1e-5


class TestPathSignature:
    def test_constant_path_is_identity_in_space(self):
        cfg = SignatureConfig(degree=3, include_time=False)
        times = np.array([0.0, 0.5, 1.0])
        values = np.ones((3, 2))
        p = CadlagPath(times, values, np.zeros(3, bool))
        sig = path_signature(cfg, p, 0.0, 1.0)
        assert np.array_equal(sig.data, ta.identity(2, 3).data)

    @pytest.mark.parametrize("mode", ["rectilinear", "linear"])
    def test_level_one_telescopes(self, mode):
        rng = np.random.default_rng(21)
        cfg = SignatureConfig(degree=3, mode=mode)
        p = random_path(rng)
        sig = path_signature(cfg, p, p.times[0], p.times[-1])
        expected = np.concatenate(
            [[p.times[-1] - p.times[0]], p.values[-1] - p.values[0]]
        )
        assert np.allclose(sig.level(1), expected, atol=1e-12)

    @pytest.mark.parametrize("mode", ["rectilinear", "linear"])
    def test_chen_identity(self, mode):
        rng = np.random.default_rng(22)
        cfg = SignatureConfig(degree=3, mode=mode)
        for _ in range(200):
            p = random_path(rng, n_points=9)
            for _ in range(5):
                mid = p.times[rng.integers(1, p.n_points - 1)]
                whole = path_signature(cfg, p, p.times[0], p.times[-1])
                left = path_signature(cfg, p, p.times[0], mid)
                right = path_signature(cfg, p, mid, p.times[-1])
                glued = ta.trunc_product(left, right)
                assert np.max(np.abs(glued.data - whole.data)) < 1e-12

    def test_out_of_span_rejected(self):
        rng = np.random.default_rng(23)
        p = random_path(rng)
        with pytest.raises(RangeError):
            path_signature(CFG, p, p.times[0] - 1.0, p.times[-1])

    def test_group_likeness(self):
        rng = np.random.default_rng(24)
        p = random_path(rng)
        sig = path_signature(CFG, p, p.times[0], p.times[-1])
        assert sig.is_group_like()

    def test_reversal_tree_like_without_time(self):
        rng = np.random.default_rng(25)
        cfg_nt = SignatureConfig(degree=3, include_time=False)
        fwd = random_path(rng, n_points=6, jump_prob=0.0)
        back_values = fwd.values[::-1][1:]
        times = np.concatenate(
            [fwd.times, fwd.times[-1] + np.cumsum(np.ones(fwd.n_points - 1) * 0.1)]
        )
        values = np.vstack([fwd.values, back_values])
        full = CadlagPath(times, values, np.zeros(times.size, bool))
        sig_nt = path_signature(cfg_nt, full, times[0], times[-1])
        assert np.max(np.abs(sig_nt.data - ta.identity(2, 3).data)) < 1e-12
        sig_t = path_signature(SignatureConfig(degree=3), full, times[0], times[-1])
        assert np.max(np.abs(sig_t.data - ta.identity(3, 3).data)) > 1e-3

    def test_inverse_is_time_reversed_signature(self):
        # sign-flipped increments in reverse order, time channel excluded
        rng = np.random.default_rng(26)
        cfg = SignatureConfig(degree=3, include_time=False)
        p = random_path(rng, n_points=6, jump_prob=0.0)
        rev = CadlagPath(p.times, p.values[::-1], np.zeros(p.n_points, bool))
        sig = path_signature(cfg, p, p.times[0], p.times[-1])
        sig_rev = path_signature(cfg, rev, p.times[0], p.times[-1])
        assert np.max(np.abs(ta.group_inverse(sig).data - sig_rev.data)) < 1e-12

    def test_desk_scale_injectivity(self):
        rng = np.random.default_rng(27)
        sigs = []
        for _ in range(500):
            p = random_path(rng, n_points=5, jump_prob=0.0)
            sigs.append(path_signature(CFG, p, p.times[0], p.times[-1]).data)
        dists = pdist(np.array(sigs))
        assert dists.min() > 1e-8


class TestStreaming:
    def test_stream_matches_batch(self):
        rng = np.random.default_rng(28)
        for mode in ("rectilinear", "linear"):
            cfg = SignatureConfig(degree=4, mode=mode, time_scale=2.0)
            p = random_path(rng, n_points=12)
            proxy = new_filtered_proxy(cfg, p.times[0], p.values[0])
            for i in range(1, p.n_points):
                proxy = incremental_update(
                    proxy, p.times[i], p.values[i], p.jump_flags[i]
                )
            batch = path_signature(cfg, p, p.times[0], p.times[-1])
            assert np.max(np.abs(proxy.sig.data - batch.data)) < 1e-10
            assert proxy.anchor_time == p.times[-1]

    def test_repeated_observation_is_noop(self):
        rng = np.random.default_rng(29)
        p = random_path(rng)
        proxy = new_filtered_proxy(CFG, p.times[0], p.values[0])
        proxy = incremental_update(proxy, p.times[1], p.values[1])
        again = incremental_update(proxy, p.times[1], p.values[1])
        assert again is proxy

    def test_single_observation_reproduces_segment(self):
        proxy = new_filtered_proxy(CFG, 0.0, np.zeros(2))
        dx = np.array([0.3, 0.4])
        upd = incremental_update(proxy, 0.25, dx)
        # rectilinear: time factor then space factor
        t_seg = segment_signature(CFG, 2, 0.25, np.zeros(2))
        s_seg = segment_signature(CFG, 2, 0.0, dx)
        expected = ta.trunc_product(t_seg, s_seg)
        assert np.max(np.abs(upd.sig.data - expected.data)) < 1e-14

    def test_non_monotone_rejected(self):
        proxy = new_filtered_proxy(CFG, 1.0, np.zeros(2))
        with pytest.raises(OrderingError):
            incremental_update(proxy, 0.5, np.ones(2))


class TestBatched:
    def test_batch_prefix_matches_per_path(self):
        rng = np.random.default_rng(30)
        cfg = SignatureConfig(degree=3, mode="linear", time_scale=1.5)
        n_paths, n_grid, dim = 7, 6, 2
        times = np.linspace(0.0, 1.0, n_grid)
        values = np.cumsum(rng.normal(scale=0.3, size=(n_paths, n_grid, dim)), axis=1)
        flags = rng.random((n_paths, n_grid)) < 0.25
        flags[:, 0] = False
        means, full = batch_prefix_signatures(cfg, times, values, flags, keep_paths=True)
        for j in (1, n_grid - 1):
            per_path = []
            for i in range(n_paths):
                p = CadlagPath(times, values[i], flags[i])
                per_path.append(path_signature(cfg, p, times[0], times[j]).data)
            per_path = np.array(per_path)
            assert np.max(np.abs(full[j] - per_path)) < 1e-12
            assert np.max(np.abs(means[j] - per_path.mean(axis=0))) < 1e-12


class TestCsv:
    def test_round_trip(self):
        rng = np.random.default_rng(31)
        paths = [random_path(rng) for _ in range(3)]
        buf = io.StringIO()
        paths_to_csv(paths, buf, header_lines=["# test artifact"])
        buf.seek(0)
        back = paths_from_csv(buf)
        assert len(back) == 3
        for a, b in zip(paths, back):
            assert np.array_equal(a.times, b.times)
            assert np.array_equal(a.values, b.values)
            assert np.array_equal(a.jump_flags, b.jump_flags)


class TestSignatureDump:
    def test_interval_prefixed_row_round_trip(self):
        from siglearn.signature import signature_from_csv_row, signature_to_csv_row

        rng = np.random.default_rng(32)
        p = random_path(rng)
        sig = path_signature(CFG, p, p.times[0], p.times[-1])
        row = signature_to_csv_row(p.times[0], p.times[-1], sig)
        t0, t1, back = signature_from_csv_row(row)
        assert t0 == p.times[0] and t1 == p.times[-1]
        assert np.array_equal(back.data, sig.data)
