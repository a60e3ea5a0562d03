import numpy as np
import pytest

from mvtv.image_grid import GridSpec
from mvtv.metrics import angular_error, extract_peaks, image_peaks, w1_error_map
from mvtv.models import MeasureImage
from mvtv.synth import make_unimodal

from conftest import random_measure


class TestExtractPeaks:
    def test_uniform_returns_empty(self, ico1):
        u = np.full(ico1.l, 1.0 / (4 * np.pi))
        assert extract_peaks(u, ico1) == []

    def test_unimodal_single_peak(self, ico2, rng):
        for _ in range(5):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            u = make_unimodal(d, 20.0, ico2)
            peaks = extract_peaks(u, ico2)
            assert len(peaks) == 1
            ang = np.degrees(np.arccos(min(1.0, abs(peaks[0] @ d))))
            assert ang <= np.degrees(ico2.max_edge_arc())

    def test_bimodal_60deg_two_peaks(self, ico2):
        d1 = np.array([1.0, 0.0, 0.0])
        a = np.deg2rad(60.0)
        d2 = np.array([np.cos(a), np.sin(a), 0.0])
        u = 0.5 * (make_unimodal(d1, 20.0, ico2) + make_unimodal(d2, 20.0, ico2))
        peaks = extract_peaks(u, ico2)
        assert len(peaks) == 2

    def test_threshold_filters_minor_peak(self, ico2):
        d1 = np.array([1.0, 0.0, 0.0])
        d2 = np.array([0.0, 0.0, 1.0])
        u = 0.9 * make_unimodal(d1, 25.0, ico2) + 0.1 * make_unimodal(d2, 25.0, ico2)
        strong = extract_peaks(u, ico2, rel_threshold=0.5)
        weak = extract_peaks(u, ico2, rel_threshold=0.05)
        assert len(strong) == 1
        assert len(weak) == 2

    def test_needs_sphere(self, circle8):
        with pytest.raises(ValueError):
            extract_peaks(np.ones(8), circle8)


class TestAngularError:
    def test_exact_match(self):
        gt = [[np.array([0.0, 0.0, 1.0])]]
        rep = angular_error(gt, gt)
        assert rep.mean_deg == 0.0 and rep.std_deg == 0.0

    def test_orthogonal_is_90(self):
        est = [[np.array([1.0, 0.0, 0.0])]]
        gt = [[np.array([0.0, 0.0, 1.0])]]
        rep = angular_error(est, gt)
        assert abs(rep.mean_deg - 90.0) <= 1e-12

    def test_antipode_is_zero(self):
        est = [[np.array([0.0, 0.0, -1.0])]]
        gt = [[np.array([0.0, 0.0, 1.0])]]
        assert angular_error(est, gt).mean_deg <= 1e-6

    def test_unmatched_gt_scores_90(self):
        est = [[]]
        gt = [[np.array([0.0, 0.0, 1.0])]]
        rep = angular_error(est, gt)
        assert rep.mean_deg == 90.0
        assert rep.unmatched_gt == 1

    def test_background_voxels_ignored(self):
        est = [[np.array([1.0, 0.0, 0.0])], []]
        gt = [[], []]
        rep = angular_error(est, gt)
        assert rep.mean_deg == 0.0
        assert rep.per_voxel == [None, None]

    def test_errors_bounded(self, rng):
        est, gt = [], []
        for _ in range(30):
            e = rng.normal(size=3)
            g = rng.normal(size=3)
            est.append([e / np.linalg.norm(e)])
            gt.append([g / np.linalg.norm(g)])
        rep = angular_error(est, gt)
        assert 0.0 <= rep.mean_deg <= 90.0
        vox = [v for v in rep.per_voxel if v is not None]
        assert all(0.0 <= v <= 90.0 for v in vox)

    def test_sign_flip_invariant(self, rng):
        est = [[np.array([0.6, 0.8, 0.0])]]
        gt = [[np.array([0.0, 1.0, 0.0])]]
        a = angular_error(est, gt).mean_deg
        b = angular_error([[-est[0][0]]], gt).mean_deg
        assert abs(a - b) <= 1e-12


class TestW1ErrorMap:
    def test_identical_images(self, circle8, rng):
        grid = GridSpec((2, 2))
        vals = np.stack([random_measure(circle8, rng) for _ in range(4)])
        img = MeasureImage(vals.reshape(2, 2, 8), grid, circle8)
        emap = w1_error_map(img, img)
        assert emap.shape == (2, 2)
        assert np.abs(emap).max() <= 1e-10

    def test_single_differing_voxel(self, twopoint):
        grid = GridSpec((3,))
        a = np.zeros((3, 2))
        a[:, 0] = 1.0
        bvals = a.copy()
        bvals[1] = [0.0, 1.0]
        u = MeasureImage(a, grid, twopoint)
        v = MeasureImage(bvals, grid, twopoint)
        emap = w1_error_map(u, v)
        assert np.allclose(emap, [0.0, 1.0, 0.0], atol=1e-12)

    def test_matches_primal_energy_data_term(self, circle8, rng):
        from mvtv.models import build_w1tv, primal_energy, tv_kr
        grid = GridSpec((3,))
        fvals = np.stack([random_measure(circle8, rng) for _ in range(3)])
        uvals = np.stack([random_measure(circle8, rng) for _ in range(3)])
        f = MeasureImage(fvals, grid, circle8)
        u = MeasureImage(uvals, grid, circle8)
        lam = 0.9
        prob = build_w1tv(f, lam)
        emap = w1_error_map(u, f)
        en = primal_energy(prob, u, tol=1e-10)
        tv = tv_kr(u, tol=1e-10)
        assert abs(en - (emap.sum() + lam * tv)) <= 1e-8

    def test_threads_identical(self, circle8, rng):
        grid = GridSpec((5,))
        a = np.stack([random_measure(circle8, rng) for _ in range(5)])
        b = np.stack([random_measure(circle8, rng) for _ in range(5)])
        u = MeasureImage(a, grid, circle8)
        v = MeasureImage(b, grid, circle8)
        seq = w1_error_map(u, v, threads=1)
        par = w1_error_map(u, v, threads=2)
        assert np.array_equal(seq, par)


class TestImagePeaks:
    def test_counts(self, ico2):
        from mvtv.synth import PhantomSpec, make_phantom
        img, gt, _ = make_phantom(PhantomSpec("rotating", n=6), ico2)
        peaks = image_peaks(img)
        assert len(peaks) == 6
        assert all(len(p) == 1 for p in peaks)
