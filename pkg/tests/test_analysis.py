import math

import numpy as np
import pytest

from cbct.analysis import (BinStat, DefectComponent, RegionSpec, Window2D,
                           body_mask, cnr, default_bin_edges, detect_defects,
                           extract_defects, line_profile, nrmse,
                           otsu_threshold, otsu_threshold_from_histogram,
                           pore_voxel_mask, recall_precision, snr, ssim)
from cbct.errors import (DegenerateHistogram, MetricUndefined, RangeError,
                         ShapeError)
from cbct.projector import Volume
from cbct.simulator import GroundTruthPore


class TestNrmse:
    def test_zero_at_equality(self, rng):
        v = Volume(rng.standard_normal((4, 4, 4)), 0.2)
        assert nrmse(v, v.copy()) == 0.0

    def test_homogeneity(self, rng):
        ref = Volume(rng.standard_normal((4, 4, 4)), 0.2)
        assert nrmse(Volume(2 * ref.data, 0.2), ref) == pytest.approx(1.0, rel=1e-12)

    def test_constant_offset_closed_form(self, rng):
        ref = Volume(rng.standard_normal((4, 4, 4)), 0.2)
        c = 0.37
        x = Volume(ref.data + c, 0.2)
        want = c * math.sqrt(ref.data.size) / np.linalg.norm(ref.data)
        assert nrmse(x, ref) == pytest.approx(want, rel=1e-12)

    def test_positive_definite(self, rng):
        ref = Volume(rng.standard_normal((4, 4, 4)), 0.2)
        x = Volume(ref.data.copy(), 0.2)
        x.data[0, 0, 0] += 1e-9
        assert nrmse(x, ref) > 0.0

    def test_zero_reference(self):
        z = Volume(np.zeros((2, 2, 2)), 0.2)
        with pytest.raises(MetricUndefined):
            nrmse(z, z)


class TestSsim:
    def test_identity(self, rng):
        v = Volume(rng.standard_normal((3, 16, 16)), 0.2)
        assert ssim(v, v.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_heavy_noise_scores_low(self, rng):
        ref = Volume(rng.standard_normal((4, 32, 32)), 0.2)
        noisy = Volume(ref.data + 3.0 * rng.standard_normal(ref.data.shape), 0.2)
        assert ssim(noisy, ref) < 0.5

    def test_direct_formula_oracle(self, rng):
        a = rng.standard_normal((1, 8, 8))
        b = rng.standard_normal((1, 8, 8))
        got = ssim(Volume(a, 0.2), Volume(b, 0.2))
        r = np.arange(11) - 5
        g = np.exp(-(r ** 2) / (2 * 1.5 ** 2))
        kern = np.outer(g, g)
        kern /= kern.sum()
        drange = b.max() - b.min()
        c1 = (0.01 * drange) ** 2
        c2 = (0.03 * drange) ** 2
        ap = np.pad(a[0], 5, mode="symmetric")
        bp = np.pad(b[0], 5, mode="symmetric")
        vals = []
        for i in range(8):
            for j in range(8):
                wa, wb = ap[i:i + 11, j:j + 11], bp[i:i + 11, j:j + 11]
                mu_a, mu_b = (kern * wa).sum(), (kern * wb).sum()
                va = (kern * wa * wa).sum() - mu_a ** 2
                vb = (kern * wb * wb).sum() - mu_b ** 2
                cov = (kern * wa * wb).sum() - mu_a * mu_b
                vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                            / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
        assert got == pytest.approx(np.mean(vals), abs=1e-12)

    def test_joint_range_symmetry(self, rng):
        a = Volume(rng.standard_normal((2, 16, 16)), 0.2)
        b = Volume(rng.standard_normal((2, 16, 16)), 0.2)
        joint = float(max(a.data.max(), b.data.max()) - min(a.data.min(), b.data.min()))
        assert ssim(a, b, data_range=joint) == pytest.approx(
            ssim(b, a, data_range=joint), rel=1e-12)

    def test_constant_reference(self):
        v = Volume(np.ones((2, 16, 16)), 0.2)
        with pytest.raises(MetricUndefined):
            ssim(v, v.copy())


def region_64():
    return RegionSpec(1, 10, Window2D(56, 56, 6, 6), Window2D(5, 5, 50, 50))


class TestRegions:
    def test_snr_log_arithmetic(self):
        vol = Volume(np.zeros((12, 64, 64)), 0.2)
        rng = np.random.default_rng(0)
        for mu, sigma, want in [(1.0, 0.1, 20.0), (1.0, 0.01, 40.0)]:
            vol.data[:, 5:55, 5:55] = mu + sigma * rng.standard_normal((12, 50, 50))
            got = snr(vol, region_64())
            assert got == pytest.approx(want, abs=0.3)

    def test_snr_monte_carlo(self):
        vals = []
        for seed in range(10):
            r = np.random.default_rng(seed)
            vol = Volume(np.zeros((12, 64, 64)), 0.2)
            vol.data[:, 5:55, 5:55] = 2.0 + 0.05 * r.standard_normal((12, 50, 50))
            vals.append(snr(vol, region_64()))
        assert np.mean(vals) == pytest.approx(32.04, abs=0.3)

    def test_snr_zero_sigma(self):
        vol = Volume(np.ones((12, 64, 64)), 0.2)
        assert snr(vol, region_64()) == math.inf

    def test_cnr_closed_form(self):
        r = np.random.default_rng(1)
        vol = Volume(np.zeros((12, 64, 64)), 0.2)
        vol.data[:, 5:55, 5:55] = 1.0 + 0.1 * r.standard_normal((12, 50, 50))
        vol.data[:, 56:62, 56:62] = 0.1 * r.standard_normal((12, 6, 6))
        assert cnr(vol, region_64()) == pytest.approx(1.0 / math.sqrt(0.02), rel=0.05)

    def test_cnr_equal_means(self):
        r = np.random.default_rng(2)
        vol = Volume(np.zeros((12, 64, 64)), 0.2)
        noise = r.standard_normal((12, 64, 64)) * 0.1
        vol.data[:] = 5.0 + noise
        assert cnr(vol, region_64()) < 0.2

    def test_cnr_scale_invariant(self):
        r = np.random.default_rng(3)
        vol = Volume(r.standard_normal((12, 64, 64)) + 3.0, 0.2)
        a = cnr(vol, region_64())
        b = cnr(Volume(2.0 * vol.data, 0.2), region_64())
        assert a == pytest.approx(b, rel=1e-12)

    def test_window_bounds(self):
        vol = Volume(np.ones((12, 16, 16)), 0.2)
        with pytest.raises(RangeError):
            snr(vol, region_64())


class TestLineProfile:
    def test_constant(self):
        vol = Volume(np.full((4, 8, 8), 2.5), 0.2)
        assert np.all(line_profile(vol, 2, 3) == 2.5)

    def test_plateau(self):
        vol = Volume(np.zeros((4, 8, 8)), 0.2)
        vol.data[2, 3, 2:6] = 0.05
        prof = line_profile(vol, 2, 3)
        assert np.array_equal(prof, vol.data[2, 3])

    def test_range_error(self):
        vol = Volume(np.zeros((4, 8, 8)), 0.2)
        with pytest.raises(RangeError):
            line_profile(vol, 4, 0)


class TestOtsu:
    def test_two_valued(self):
        vol = Volume(np.concatenate([np.zeros(500), np.ones(500)]).reshape(10, 10, 10), 0.2)
        t = otsu_threshold(vol)
        assert 0.0 < t < 1.0

    def test_brute_force_oracle(self):
        # exhaustive search over every candidate threshold, 1000 seeded trials
        rng = np.random.default_rng(99)
        edges = np.linspace(0.0, 1.0, 257)
        centers = (edges[:-1] + edges[1:]) / 2
        for _ in range(1000):
            hist = rng.integers(0, 40, size=256).astype(float)
            if (hist > 0).sum() < 2:
                continue
            total = hist.sum()
            best, best_t = -1.0, None
            for t in range(256):
                w0 = hist[:t + 1].sum()
                w1 = total - w0
                if w0 == 0 or w1 == 0:
                    continue
                mu0 = (hist[:t + 1] * centers[:t + 1]).sum() / w0
                mu1 = (hist[t + 1:] * centers[t + 1:]).sum() / w1
                v = w0 * w1 * (mu0 - mu1) ** 2
                if v > best:
                    best, best_t = v, edges[t + 1]
            assert otsu_threshold_from_histogram(hist, edges) == best_t

    def test_gaussian_mixture(self):
        rng = np.random.default_rng(5)
        data = np.concatenate([rng.normal(0.2, 0.05, 4000), rng.normal(0.8, 0.05, 4000)])
        t = otsu_threshold(Volume(data.reshape(20, 20, 20), 0.2))
        assert 0.4 < t < 0.6

    def test_affine_invariance(self):
        rng = np.random.default_rng(6)
        data = rng.uniform(0, 1, (10, 10, 10))
        t = otsu_threshold(Volume(data, 0.2))
        a, b = 3.0, -0.7
        t2 = otsu_threshold(Volume(a * data + b, 0.2))
        bin_width = a * 1.0 / 256
        assert abs(t2 - (a * t + b)) <= bin_width + 1e-12

    def test_constant_volume(self):
        with pytest.raises(DegenerateHistogram):
            otsu_threshold(Volume(np.full((4, 4, 4), 2.0), 0.2))


def carved_volume(vs=0.25):
    data = np.ones((40, 40, 40))
    zz, yy, xx = np.mgrid[0:40, 0:40, 0:40]
    m1 = (xx - 12) ** 2 + (yy - 20) ** 2 + (zz - 20) ** 2 <= 5 ** 2
    m2 = (xx - 28) ** 2 + (yy - 20) ** 2 + (zz - 20) ** 2 <= 3 ** 2
    data[m1] = 0.0
    data[m2] = 0.0
    return Volume(data, vs), [GroundTruthPore((12, 20, 20), 10 * vs),
                              GroundTruthPore((28, 20, 20), 6 * vs)]


class TestDefectExtraction:
    def test_no_subthreshold_voxels(self):
        vol = Volume(np.ones((8, 8, 8)), 0.2)
        labels, comps = extract_defects(vol, 0.5, np.ones((8, 8, 8), bool))
        assert comps == []

    def test_two_disjoint_pores(self):
        vol, gt = carved_volume()
        thr = otsu_threshold(vol)
        labels, comps = extract_defects(vol, thr, body_mask(vol, thr))
        assert len(comps) == 2

    def test_equivalent_diameter_within_5_percent(self):
        vol, gt = carved_volume()
        thr = otsu_threshold(vol)
        _, comps = extract_defects(vol, thr, body_mask(vol, thr))
        comps = sorted(comps, key=lambda c: -c.voxel_count)
        assert abs(comps[0].equiv_diameter_mm - 10 * 0.25) / (10 * 0.25) < 0.05

    def test_diameter_error_halves_with_resolution(self):
        # digitize the same sphere at two grid resolutions
        def equiv_err(n, r_vox):
            zz, yy, xx = np.mgrid[0:n, 0:n, 0:n]
            c = (n - 1) / 2
            m = (xx - c) ** 2 + (yy - c) ** 2 + (zz - c) ** 2 <= r_vox ** 2
            v = int(m.sum())
            d = 2 * (3 * v / (4 * math.pi)) ** (1 / 3)
            return abs(d - 2 * r_vox) / (2 * r_vox)

        coarse = equiv_err(24, 5.3)
        fine = equiv_err(48, 10.6)
        assert fine <= coarse * 0.5 * 1.3  # halves, with 30% slack


class TestRecallPrecision:
    def test_exact_detection(self):
        vol, gt = carved_volume()
        report = detect_defects(vol, gt, [0.5, 1.5, 3.0])
        assert report.overall_recall == 1.0
        assert report.overall_precision == 1.0
        for b in report.bins:
            if b.n_gt:
                assert b.recall == 1.0

    def test_no_detections(self):
        vol, gt = carved_volume()
        labels = np.zeros(vol.data.shape, dtype=int)
        report = recall_precision(gt, labels, [], [0.5, 1.5, 3.0], 0.25)
        occupied = [b for b in report.bins if b.n_gt]
        assert occupied and all(b.recall == 0.0 for b in occupied)
        assert all(b.precision is None for b in report.bins)
        assert report.overall_precision is None

    def test_hand_counted_confusion(self):
        # 3 ground-truth pores; detector finds two plus one spurious blob
        shape = (30, 30, 30)
        vs = 1.0
        gt = [GroundTruthPore((5, 5, 5), 3.0), GroundTruthPore((15, 15, 15), 3.0),
              GroundTruthPore((25, 25, 25), 3.0)]
        labels = np.zeros(shape, dtype=int)
        labels[5, 5, 5] = 1
        labels[15, 15, 15] = 2
        labels[5, 25, 25] = 3  # spurious
        comps = [DefectComponent(1, 1, (5, 5, 5), 3.0),
                 DefectComponent(2, 1, (15, 15, 15), 3.0),
                 DefectComponent(3, 1, (25, 25, 5), 3.0)]
        report = recall_precision(gt, labels, comps, [1.0, 5.0], vs)
        assert report.overall_recall == pytest.approx(2 / 3)
        assert report.overall_precision == pytest.approx(2 / 3)
        assert report.bins[0].recall == pytest.approx(2 / 3)
        assert report.bins[0].precision == pytest.approx(2 / 3)

    def test_empty_bins_are_undefined(self):
        vol, gt = carved_volume()
        report = detect_defects(vol, gt, [0.01, 0.02, 5.0])
        assert report.bins[0].n_gt == 0
        assert report.bins[0].recall is None
        assert report.bins[0].precision is None

    def test_rescaling_preserves_report(self):
        vol, gt = carved_volume()
        r1 = detect_defects(vol, gt, [0.5, 3.0])
        r2 = detect_defects(Volume(vol.data * 7.3 + 0.5, vol.voxel_size_mm), gt, [0.5, 3.0])
        assert r1.overall_recall == r2.overall_recall
        assert r1.overall_precision == r2.overall_precision
        assert [vars(a) for a in r1.bins] == [vars(b) for b in r2.bins]

    def test_default_bins_scale_with_voxels(self):
        edges = default_bin_edges(0.01728)
        assert edges[1] == pytest.approx(0.075, abs=2e-4)
        assert edges[2] == pytest.approx(0.125, abs=2e-4)
