import csv
import itertools

import numpy as np
import pytest
import torch

from dtml import trainer as T
from dtml.data import DatasetSplit, generate_synthetic, split_dataset
from dtml.errors import CropTooLarge, FatalDivergence
from dtml.grids import ProbabilityMap, SignedDistanceMap, Volume
from dtml.losses import lambda_con
from dtml.model import build_backbone, load_checkpoint
from dtml.sdm import TransformConfig, boundary_mask, compute_sdm, sdm_to_soft_mask
from oracles import random_blob_mask


def tiny_cfg(**kw):
    base = dict(total_iterations=6, levels=2, width=4, crop_shape=(16, 16, 16), eval_every=3,
                checkpoint_every=3, lr_decay_every=4, seed=1)
    base.update(kw)
    return T.TrainConfig(**base)


@pytest.fixture(scope="module")
def split():
    return split_dataset(generate_synthetic(6, (32, 32, 32), seed=0), 0.34, seed=0, test_count=1)


def params_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


class TestConfig:
    def test_default_hyperparameters(self):
        cfg = T.TrainConfig()
        assert (cfg.base_lr, cfg.lr_decay_factor, cfg.labeled_per_batch, cfg.unlabeled_per_batch) == (0.01, 0.1, 2, 2)
        assert cfg.ramp.ramp_length == cfg.total_iterations and cfg.ramp.max_weight == 0.1
        assert cfg.supervised_mode_md == "L_mask" and cfg.k == 1500.0

    @pytest.mark.parametrize("bad", [dict(mode="x"), dict(supervised_mode_md="L_x"),
                                     dict(labeled_per_batch=0), dict(crop_shape=(18, 18, 18))])
    def test_invalid(self, bad):
        with pytest.raises(Exception):
            tiny_cfg(**bad)

    def test_seed_streams_differ(self):
        s, d, data = T.derive_seeds(0)
        assert len({s, d, data}) == 3 and T.derive_seeds(0) == (s, d, data)


class TestLrSchedule:
    def test_step_decay(self):
        cfg = T.TrainConfig(lr_decay_every=800)
        assert T.lr_at(799, cfg) == 0.01
        assert T.lr_at(800, cfg) == pytest.approx(0.001, rel=1e-15)
        assert T.lr_at(1600, cfg) == pytest.approx(0.0001, rel=1e-12)

    def test_optimizer_sees_decayed_lr(self, split):
        cfg = tiny_cfg(total_iterations=5, lr_decay_every=4)
        state, hist = T.train(split, cfg)
        assert [r["lr"] for r in hist] == [0.01] * 4 + [pytest.approx(0.001)]
        assert state.opt_s.param_groups[0]["lr"] == pytest.approx(0.001)


class TestTrain:
    def test_zero_iterations(self, split):
        cfg = tiny_cfg(total_iterations=0)
        state, hist = T.train(split, cfg)
        fresh = T.init_state(cfg)
        assert hist == [] and state.t == 0
        assert params_equal(state.net_s, fresh.net_s) and params_equal(state.net_d, fresh.net_d)

    def test_bitwise_reproducible(self, split):
        a, ha = T.train(split, tiny_cfg())
        b, hb = T.train(split, tiny_cfg())
        assert ha == hb
        assert params_equal(a.net_s, b.net_s) and params_equal(a.net_d, b.net_d)

    def test_worker_count_does_not_change_result(self, split):
        a, _ = T.train(split, tiny_cfg(total_iterations=3), workers=0)
        b, _ = T.train(split, tiny_cfg(total_iterations=3), workers=2)
        assert params_equal(a.net_s, b.net_s) and params_equal(a.net_d, b.net_d)

    def test_lambda_column_follows_schedule(self, split):
        cfg = tiny_cfg()
        _, hist = T.train(split, cfg)
        for row in hist:
            assert row["lambda_con"] == lambda_con(row["iteration"], cfg.ramp)
            assert row["l_con_s"] > 0 and row["l_con_s"] == row["l_con_d"]

    def test_decoupling_limit_is_bitwise(self, split):
        for mode in ("L_mask", "L_dis", "L_dis_plus_L_mask"):
            coupled, _ = T.train(split, tiny_cfg(max_weight=0.0, supervised_mode_md=mode))
            only_s, _ = T.train(split, tiny_cfg(mode="ms_only", supervised_mode_md=mode))
            only_d, _ = T.train(split, tiny_cfg(mode="md_only", supervised_mode_md=mode))
            assert params_equal(coupled.net_s, only_s.net_s)
            assert params_equal(coupled.net_d, only_d.net_d)

    def test_coupling_changes_updates(self, split):
        coupled, _ = T.train(split, tiny_cfg(max_weight=0.1))
        only_s, _ = T.train(split, tiny_cfg(mode="ms_only"))
        assert not params_equal(coupled.net_s, only_s.net_s)

    def test_single_task_modes_leave_peer_untouched(self, split):
        cfg = tiny_cfg(mode="ms_only")
        state, hist = T.train(split, cfg)
        assert params_equal(state.net_d, T.init_state(cfg).net_d)
        assert all(r["l_md_supervised"] == 0.0 and r["lambda_con"] == 0.0 for r in hist)

    def test_writes_outputs(self, split, tmp_path):
        cfg = tiny_cfg()
        state, hist = T.train(split, cfg, out_dir=tmp_path)
        for tag in ("best", "final", "last"):
            for head in ("seg", "dis"):
                assert (tmp_path / f"{tag}_{head}.npz").exists()
        net, meta = load_checkpoint(tmp_path / "final_seg")
        assert meta["iteration"] == 6
        with open(tmp_path / "loss_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == list(T.LOG_COLUMNS) and len(rows) == 6
        assert float(rows[2]["lambda_con"]) == lambda_con(2, cfg.ramp)

    def test_divergence_keeps_last_checkpoint(self, split, tmp_path, monkeypatch):
        orig = T.BatchSampler.batch

        def poisoned(self, t, with_unlabeled=True):
            b = orig(self, t, with_unlabeled)
            if t == 4:
                b.labeled_images = torch.full_like(b.labeled_images, float("nan"))
            return b

        monkeypatch.setattr(T.BatchSampler, "batch", poisoned)
        with pytest.raises(FatalDivergence):
            T.train(split, tiny_cfg(), out_dir=tmp_path)
        _, meta = load_checkpoint(tmp_path / "last_seg")
        assert meta["iteration"] == 3
        assert not (tmp_path / "final_seg.npz").exists()
        assert (tmp_path / "loss_log.csv").exists()


class TestStep:
    def fixed_batch(self, split, cfg):
        state = T.init_state(cfg)
        sampler = T.BatchSampler(split, cfg, state.data_seed)
        return state, sampler.batch(0)

    def test_stop_gradient(self, split):
        cfg = tiny_cfg(supervised_mode_md="L_dis_plus_L_mask", max_weight=0.1)
        state, batch = self.fixed_batch(split, cfg)
        lam = 0.1
        total_s, total_d, _ = T.compute_losses(state, batch, cfg, lam)
        total_s.backward()
        assert all(p.grad is None for p in state.net_d.parameters())
        ref = [p.grad.clone() for p in state.net_s.parameters()]

        state2, _ = self.fixed_batch(split, cfg)
        total_s2, total_d2, _ = T.compute_losses(state2, batch, cfg, lam)
        with torch.no_grad():
            for p in state2.net_d.parameters():
                p.add_(0.5)
        total_s2.backward()
        assert all(torch.equal(a, p.grad) for a, p in zip(ref, state2.net_s.parameters()))

        for p in state.net_s.parameters():
            p.grad = None
        total_d.backward()
        assert all(p.grad is None for p in state.net_s.parameters())
        assert all(p.grad is not None for p in state.net_d.parameters())

    @pytest.mark.parametrize("mode", ["L_mask", "L_dis", "L_dis_plus_L_mask"])
    def test_small_step_descends(self, split, mode):
        cfg = tiny_cfg(base_lr=1e-4, supervised_mode_md=mode, k=20.0)
        state, batch = self.fixed_batch(split, cfg)
        lam = lambda_con(0, cfg.ramp)
        before_s, before_d, _ = T.compute_losses(state, batch, cfg, lam)
        T.train_step(state, batch, cfg)
        after_s, after_d, _ = T.compute_losses(state, batch, cfg, lam)
        assert after_s.item() < before_s.item()
        assert after_d.item() < before_d.item()

    def test_step_without_unlabeled(self, split):
        cfg = tiny_cfg(unlabeled_per_batch=0)
        state, batch = self.fixed_batch(split, cfg)
        assert batch.unlabeled_images.shape[0] == 0
        T.train_step(state, batch, cfg)
        assert state.t == 1


class TestSlidingWindow:
    def test_window_starts_clamped(self):
        assert T.window_starts(10, 4, 3) == [0, 3, 6]
        assert T.window_starts(11, 4, 3) == [0, 3, 6, 7]
        assert T.window_starts(4, 4, 2) == [0]
        with pytest.raises(CropTooLarge):
            T.window_starts(3, 4, 2)
        with pytest.raises(ValueError):
            T.window_starts(10, 4, 5)

    @pytest.mark.parametrize("shape,crop,stride", [((10, 11, 9), (4, 4, 4), (3, 2, 4)),
                                                   ((8, 8, 8), (8, 8, 8), (8, 8, 8))])
    def test_coverage_matches_enumeration(self, shape, crop, stride):
        counts = T.coverage_counts(shape, crop, stride)
        starts = [T.window_starts(L, c, s) for L, c, s in zip(shape, crop, stride)]
        for idx in itertools.product(*[range(s) for s in shape]):
            expected = sum(all(o <= i < o + c for i, o, c in zip(idx, org, crop))
                           for org in itertools.product(*starts))
            assert counts[idx] == expected
        assert counts.min() >= 1

    def test_single_window_equals_forward(self, rng):
        net = build_backbone(dict(levels=2, width=4), "seg", 0)
        x = rng.normal(size=(16, 16, 16)).astype(np.float32)
        out = T.sliding_window_predict(net, Volume(x), (16, 16, 16))
        with torch.no_grad():
            direct = net(torch.from_numpy(x)[None, None])[0, 0].double().numpy()
        assert isinstance(out, ProbabilityMap)
        np.testing.assert_array_equal(out.data, direct)

    def test_constant_network_gives_constant_map(self):
        net = build_backbone(dict(levels=2, width=4), "dis", 0)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
            net.head.bias.fill_(0.3)
        for stride in [(4, 4, 4), (8, 8, 8), (5, 7, 8)]:
            out = T.sliding_window_predict(net, np.ones((20, 17, 24), np.float32), (8, 8, 8), stride)
            assert isinstance(out, SignedDistanceMap) and out.normalized
            np.testing.assert_allclose(out.data, np.tanh(0.3), rtol=1e-6)

    def test_window_larger_than_volume(self):
        net = build_backbone(dict(levels=2, width=4), "seg", 0)
        with pytest.raises(CropTooLarge):
            T.sliding_window_predict(net, np.zeros((8, 8, 8), np.float32), (16, 16, 16))


class TestBinarize:
    def test_threshold_and_tie(self):
        assert T.binarize(np.full((2, 2, 2), 0.6)).data.all()
        assert T.binarize(np.full((2, 2, 2), 0.5), 0.5).data.all()
        assert not T.binarize(np.full((2, 2, 2), 0.4999)).data.any()
        with pytest.raises(ValueError):
            T.binarize(np.zeros((2, 2, 2)), 1.0)

    def test_round_trip(self, rng):
        m = random_blob_mask(rng, (10, 10, 10))
        out = T.binarize(sdm_to_soft_mask(compute_sdm(m), TransformConfig(1500.0))).data
        off = ~boundary_mask(m)
        assert np.array_equal(out[off], m[off])
