import math

import numpy as np
import pytest

from cbct.errors import DataError, ShapeError
from cbct.projector import Volume
from cbct.training import (AdamState, EpochLog, PatchDataset, PlateauSchedule,
                           TrainConfig, adam_step, build_dataset,
                           extract_patches, l1_loss, train_prior)
from cbct.unet import PriorArchitecture, PriorParams


class TestL1Loss:
    def test_zero_at_match(self, rng):
        x = rng.standard_normal((4, 4))
        loss, grad = l1_loss(x, x.copy())
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_hand_values(self):
        loss, grad = l1_loss(np.array([1.0, -1.0]), np.zeros(2))
        assert loss == 1.0
        assert np.array_equal(grad, [0.5, -0.5])

    def test_homogeneity(self, rng):
        d = rng.standard_normal((8, 8))
        t = np.zeros((8, 8))
        base, _ = l1_loss(d, t)
        for alpha in (0.5, 2.0, 7.5):
            scaled, _ = l1_loss(alpha * d, t)
            assert scaled == pytest.approx(alpha * base, rel=1e-12)


class TestAdam:
    def params(self, value=0.0):
        arch = PriorArchitecture(1, 2, 0)
        return PriorParams(arch, {"w": np.array([value])})

    def test_zero_gradient_keeps_params(self):
        p = self.params(3.0)
        st = AdamState.for_params(p)
        p2, st2 = adam_step(p, {"w": np.zeros(1)}, st, 1e-3)
        assert np.array_equal(p2.tensors["w"], p.tensors["w"])
        assert st2.t == 1

    def test_first_step_closed_form(self):
        p = self.params(0.0)
        st = AdamState.for_params(p)
        p2, _ = adam_step(p, {"w": np.ones(1)}, st, 1e-3)
        assert p2.tensors["w"][0] == pytest.approx(-1e-3 / (1.0 + 1e-8), rel=1e-12)

    def test_deterministic(self, rng):
        p = self.params(1.5)
        st = AdamState.for_params(p)
        g = {"w": np.array([0.3])}
        a1, s1 = adam_step(p, g, st, 1e-2)
        a2, s2 = adam_step(p, g, st, 1e-2)
        assert np.array_equal(a1.tensors["w"], a2.tensors["w"])
        assert np.array_equal(s1.m["w"], s2.m["w"])


class TestPatches:
    def volumes(self, rng, nz=8, n=64):
        return (Volume(rng.standard_normal((nz, n, n)), 0.2),
                Volume(rng.standard_normal((nz, n, n)), 0.2))

    def test_tiling_count(self, rng):
        vin, vtg = self.volumes(rng)
        ds = extract_patches(vin, vtg, (5, 32, 32), None, seed=0)
        assert ds.n_patches == 8 * 4  # 4 patches per slice position

    def test_split_80_20(self, rng):
        vin, vtg = self.volumes(rng)
        ds = extract_patches(vin, vtg, (5, 32, 32), 16, seed=0)
        n = ds.n_patches
        assert ds.n_train == int(n * 0.8)
        # 50-patch example: 40 train / 10 validation
        assert int(50 * 0.8) == 40

    def test_same_seed_same_split(self, rng):
        vin, vtg = self.volumes(rng)
        a = extract_patches(vin, vtg, (5, 32, 32), None, seed=3)
        b = extract_patches(vin, vtg, (5, 32, 32), None, seed=3)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.targets, b.targets)

    def test_different_seed_same_multiset(self, rng):
        vin, vtg = self.volumes(rng)
        a = extract_patches(vin, vtg, (5, 32, 32), None, seed=3)
        b = extract_patches(vin, vtg, (5, 32, 32), None, seed=4)
        assert not np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(np.sort(a.inputs.ravel()), np.sort(b.inputs.ravel()))

    def test_patch_larger_than_volume(self, rng):
        vin, vtg = self.volumes(rng, n=16)
        with pytest.raises(ShapeError):
            extract_patches(vin, vtg, (5, 32, 32), None, seed=0)

    def test_center_slice_targets_aligned(self, rng):
        vin, vtg = self.volumes(rng)
        ds = extract_patches(vin, vtg, (5, 32, 32), None, seed=1)
        # each input stack's center channel comes from the input volume at
        # the same location as the target patch in the target volume
        found = 0
        for i in range(ds.n_patches):
            diff = ds.inputs[i, 2] - ds.targets[i]
            for z in range(8):
                for y0 in (0, 32):
                    for x0 in (0, 32):
                        if np.array_equal(ds.targets[i], vtg.data[z, y0:y0 + 32, x0:x0 + 32]):
                            assert np.array_equal(ds.inputs[i, 2],
                                                  vin.data[z, y0:y0 + 32, x0:x0 + 32])
                            found += 1
        assert found >= ds.n_patches


class TestPlateauSchedule:
    def test_halves_at_best_plus_patience(self):
        s = PlateauSchedule(1e-3, factor=2.0, patience=10)
        lrs = {}
        val = 1.0  # frozen validation curve: best stays at epoch 1
        for epoch in range(1, 25):
            lrs[epoch] = s.update(epoch, val)
        assert lrs[10] == 1e-3
        assert lrs[11] == 0.5e-3  # first cut exactly at best + 10
        assert lrs[20] == 0.5e-3
        assert lrs[21] == 0.25e-3  # next cut 10 epochs after the last one

    def test_improvement_resets_wait(self):
        s = PlateauSchedule(1e-3, 2.0, patience=3)
        metrics = [5.0, 4.0, 4.0, 3.0, 3.0, 3.0, 3.0]
        lrs = [s.update(e + 1, m) for e, m in enumerate(metrics)]
        # best at epoch 4 -> cut at epoch 7, not earlier
        assert lrs[:6] == [1e-3] * 6
        assert lrs[6] == 0.5e-3


class TestTrainPrior:
    def test_empty_dataset(self):
        ds = PatchDataset(np.zeros((0, 5, 8, 8)), np.zeros((0, 8, 8)), 0)
        with pytest.raises(DataError):
            train_prior(ds, TrainConfig(epochs=1, patch_shape=(5, 8, 8)),
                        PriorArchitecture(1, 2, 2))

    def test_zero_residual_task_learns(self, rng):
        # target equals the input center slice: the exact solution is the
        # constant-zero residual, so training must reduce loss and NRMSE
        vin = Volume(rng.standard_normal((8, 32, 32)), 0.2)
        vtg = Volume(vin.data.copy(), 0.2)
        ds = build_dataset([(vin, vtg)], (5, 16, 16), None, seed=0)
        cfg = TrainConfig(epochs=6, batch_size=8, patch_shape=(5, 16, 16), seed=0)
        params, log = train_prior(ds, cfg, PriorArchitecture(1, 4, 2))
        assert log[-1].train_loss < log[0].train_loss
        assert min(e.val_nrmse for e in log) < log[0].val_nrmse

    def test_artifact_correction_beats_input(self, rng):
        # input carries a consistent gain/offset distortion plus mild noise;
        # the learned correction must beat the raw input's NRMSE
        base = np.zeros((8, 32, 32))
        base[:, 8:24, 8:24] = 1.0
        vtg = Volume(base, 0.2)
        vin = Volume(0.7 * base + 0.15 + 0.05 * rng.standard_normal(base.shape), 0.2)
        ds = build_dataset([(vin, vtg)], (5, 16, 16), None, seed=0)
        inputs, targets = ds.validation()
        input_nrmse = np.linalg.norm(inputs[:, 2] - targets) / np.linalg.norm(targets)
        cfg = TrainConfig(epochs=10, batch_size=8, patch_shape=(5, 16, 16), seed=0)
        params, log = train_prior(ds, cfg, PriorArchitecture(1, 4, 2))
        assert min(e.val_nrmse for e in log) < input_nrmse

    def test_bit_reproducible(self, rng):
        vin = Volume(rng.standard_normal((6, 16, 16)), 0.2)
        vtg = Volume(rng.standard_normal((6, 16, 16)), 0.2)
        ds = build_dataset([(vin, vtg)], (3, 16, 16), None, seed=0)
        cfg = TrainConfig(epochs=2, batch_size=4, patch_shape=(3, 16, 16), seed=5)
        p1, log1 = train_prior(ds, cfg, PriorArchitecture(1, 2, 1))
        p2, log2 = train_prior(ds, cfg, PriorArchitecture(1, 2, 1))
        for name in p1.tensors:
            assert np.array_equal(p1.tensors[name], p2.tensors[name])
        assert [(e.train_loss, e.val_nrmse) for e in log1] == \
               [(e.train_loss, e.val_nrmse) for e in log2]

    def test_float32_mode(self, rng):
        vin = Volume(rng.standard_normal((6, 16, 16)), 0.2)
        vtg = Volume(rng.standard_normal((6, 16, 16)), 0.2)
        ds = build_dataset([(vin, vtg)], (3, 16, 16), None, seed=0)
        cfg = TrainConfig(epochs=1, batch_size=4, patch_shape=(3, 16, 16),
                          precision="f32")
        params, _ = train_prior(ds, cfg, PriorArchitecture(1, 2, 1))
        assert next(iter(params.tensors.values())).dtype == np.float32
