import numpy as np
import pytest

from ltdnet import autograd as ag
from ltdnet import data_io as dio
from ltdnet import det_head as dh
from ltdnet import seg_head as sh
from ltdnet import train as tr
from ltdnet.autograd import Tape, Tensor
from ltdnet.backbone import BackboneConfig, ConfigError
from ltdnet.ltd import LtdConfig


def small_model_cfg(input_size=32):
    return tr.ModelConfig(
        backbone=BackboneConfig(stem_channels=8, level_channels=[8, 12, 16],
                                blocks_per_level=[1, 1, 1],
                                input_size=input_size, base_stride=4),
        ltd=LtdConfig(out_channels=8),
        anchors=dh.AnchorConfig(num_classes=4, scales=[0.2, 0.45, 0.7]),
        pcm=sh.PcmConfig(target_size=(input_size // 4, input_size // 4),
                         mid_channels=12))


def tiny_dataset(tmp_path, n=12, size=32, classes=4, seed=5):
    d = tmp_path / "ds"
    dio.generate_shapes_dataset(n, size, classes, seed=seed, out_dir=str(d))
    samples, _ = dio.load_dataset(str(d))
    return samples


class TestTotalLoss:
    def test_joint_sum(self):
        det = Tensor(np.asarray(2.0))
        seg = Tensor(np.asarray(0.5))
        assert tr.total_loss(det, seg, 1.0, "joint").item() == pytest.approx(2.5, abs=1e-15)

    def test_zero_weight(self):
        det = Tensor(np.asarray(2.0))
        seg = Tensor(np.asarray(0.5))
        assert tr.total_loss(det, seg, 0.0, "joint").item() == pytest.approx(2.0, abs=1e-15)

    def test_det_only_ignores_seg_params(self, tmp_path):
        samples = tiny_dataset(tmp_path)
        mc = small_model_cfg()
        tc = tr.TrainConfig(max_steps=3, decay_milestones=(1, 2), batch_size=2,
                            seed=0, mode="det_only")
        before = tr.init_model_params(mc, "det_only", tc.seed)
        snapshot = {k: v.copy() for k, v in before.items()}
        params, _, _ = tr.train_loop(samples, mc, tc, params=before)
        for k, v in snapshot.items():
            if k.startswith("seg."):
                assert np.array_equal(params[k], v)
        # detection parameters did change
        assert any(not np.array_equal(params[k], snapshot[k])
                   for k in params if k.startswith("det."))


class TestAdam:
    def test_zero_gradient_no_change(self):
        cfg = tr.TrainConfig()
        params = {"w": np.ones((3, 3)) * 2.0}
        ref = params["w"].copy()
        tr.adam_step(params, {"w": np.zeros((3, 3))}, tr.AdamState(), 1e-2, cfg)
        assert np.array_equal(params["w"], ref)

    def test_first_step_closed_form(self):
        cfg = tr.TrainConfig()
        lr = 1e-3
        for g in (0.7, -1.3e-4):
            params = {"w": np.zeros(())}
            tr.adam_step(params, {"w": np.asarray(g)}, tr.AdamState(), lr, cfg)
            # bias-corrected first step: -lr * g / (|g| + eps)
            want = -lr * g / (abs(g) + cfg.adam_eps)
            assert params["w"] == pytest.approx(want, abs=1e-18)
            assert params["w"] == pytest.approx(-lr * np.sign(g), rel=1e-3)

    def test_matches_scalar_recurrence_oracle(self):
        cfg = tr.TrainConfig()  # beta1=0.5, beta2=0.999
        lr = 1e-2
        rng = np.random.default_rng(0)
        gs = rng.standard_normal(10)
        params = {"w": np.asarray(0.3)}
        state = tr.AdamState()
        # independent scalar recurrence
        w, m, v = 0.3, 0.0, 0.0
        for t, g in enumerate(gs, start=1):
            tr.adam_step(params, {"w": np.asarray(g)}, state, lr, cfg)
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** t)
            vhat = v / (1 - cfg.beta2 ** t)
            w -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            assert params["w"] == pytest.approx(w, abs=1e-12)

    def test_lr_zero_changes_nothing(self):
        cfg = tr.TrainConfig()
        rng = np.random.default_rng(1)
        params = {"w": rng.standard_normal((4, 2))}
        ref = params["w"].copy()
        tr.adam_step(params, {"w": rng.standard_normal((4, 2))},
                     tr.AdamState(), 0.0, cfg)
        assert np.array_equal(params["w"], ref)

    def test_shape_mismatch(self):
        cfg = tr.TrainConfig()
        with pytest.raises(ag.ShapeError):
            tr.adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)},
                         tr.AdamState(), 1e-3, cfg)


class TestSchedule:
    def test_values(self):
        cfg = tr.TrainConfig(lr0=1e-4, decay_milestones=(1500, 2400), max_steps=3000)
        assert tr.lr_at(0, cfg) == 1e-4
        assert tr.lr_at(1499, cfg) == 1e-4
        assert tr.lr_at(1500, cfg) == 1e-5
        assert tr.lr_at(2399, cfg) == 1e-5
        assert tr.lr_at(2400, cfg) == 1e-6
        assert tr.lr_at(2999, cfg) == 1e-6

    def test_only_three_values_ever(self):
        cfg = tr.TrainConfig()
        vals = {tr.lr_at(s, cfg) for s in range(0, 3000, 7)}
        assert vals <= {1e-4, 1e-5, 1e-6}

    def test_invalid_milestones(self):
        with pytest.raises(ConfigError):
            tr.TrainConfig(decay_milestones=(2400, 1500)).validate()
        with pytest.raises(ConfigError):
            tr.TrainConfig(decay_milestones=(100, 3000), max_steps=3000).validate()


class TestAugmentation:
    def sample(self):
        rng = np.random.default_rng(2)
        image = rng.random((3, 16, 16))
        mask = rng.integers(0, 3, size=(16, 16))
        boxes = [(1, (0.1, 0.2, 0.3, 0.4)), (2, (0.5, 0.5, 0.9, 0.75))]
        return dio.GroundTruthSample(image=image, boxes=boxes, mask=mask)

    def test_flip_involution(self):
        s = self.sample()
        back = tr.hflip_sample(tr.hflip_sample(s))
        assert np.array_equal(back.image, s.image)
        assert np.array_equal(back.mask, s.mask)
        for (c1, b1), (c2, b2) in zip(back.boxes, s.boxes):
            assert c1 == c2
            assert b1 == pytest.approx(b2, abs=1e-12)

    def test_flip_box_mapping(self):
        s = dio.GroundTruthSample(image=np.zeros((3, 8, 8)),
                                  boxes=[(1, (0.1, 0.2, 0.3, 0.4))],
                                  mask=np.zeros((8, 8), dtype=int))
        assert tr.hflip_sample(s).boxes[0][1] == pytest.approx(
            (0.7, 0.2, 0.9, 0.4), abs=1e-12)

    def test_full_crop_identity(self):
        s = self.sample()
        out = tr.crop_sample(s, 0, 0, 16)
        assert np.array_equal(out.image, s.image)
        assert np.array_equal(out.mask, s.mask)
        for (c1, b1), (c2, b2) in zip(out.boxes, s.boxes):
            assert c1 == c2 and b1 == pytest.approx(b2, abs=1e-12)

    def test_crop_keeps_boxes_by_center(self):
        s = self.sample()
        # crop the left half in pixels: [0, 8) x [0, 16)... use square window
        out = tr.crop_sample(s, 0, 0, 8)
        # first box center (0.2*16, 0.3*16) = (3.2, 4.8) inside; second outside
        assert out is not None
        assert [c for c, _ in out.boxes] == [1]

    def test_augment_always_keeps_a_box(self):
        s = self.sample()
        rng = np.random.default_rng(3)
        for _ in range(50):
            out = tr.augment_sample(s, rng)
            assert len(out.boxes) >= 1
            for _, (x0, y0, x1, y1) in out.boxes:
                assert 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1


class TestTrainLoop:
    def test_determinism(self, tmp_path):
        samples = tiny_dataset(tmp_path)
        mc = small_model_cfg()
        tc = tr.TrainConfig(max_steps=4, decay_milestones=(2, 3), batch_size=2,
                            seed=9)
        p1, log1, _ = tr.train_loop(samples, mc, tc)
        p2, log2, _ = tr.train_loop(samples, mc, tc)
        assert log1 == log2
        assert p1.keys() == p2.keys()
        for k in p1:
            assert np.array_equal(p1[k], p2[k])

    def test_log_format(self, tmp_path):
        samples = tiny_dataset(tmp_path)
        mc = small_model_cfg()
        tc = tr.TrainConfig(max_steps=3, decay_milestones=(1, 2), batch_size=2, seed=0)
        _, log, _ = tr.train_loop(samples, mc, tc)
        assert len(log) == 3
        for i, line in enumerate(log):
            fields = line.split("\t")
            assert len(fields) == 5
            assert int(fields[0]) == i
            float(fields[1]), float(fields[2]), float(fields[3]), float(fields[4])

    def test_smoke_training_loss_decreases(self, tmp_path):
        samples = tiny_dataset(tmp_path, n=32, size=32)
        mc = small_model_cfg()
        tc = tr.TrainConfig(max_steps=200, decay_milestones=(120, 170),
                            batch_size=4, seed=1, lr0=1e-3)
        _, log, _ = tr.train_loop(samples, mc, tc)
        totals = [float(l.split("\t")[4]) for l in log]
        assert np.mean(totals[-20:]) < np.mean(totals[:20])

    def test_joint_grad_is_sum_of_task_grads(self, tmp_path):
        samples = tiny_dataset(tmp_path, n=4, size=32)
        mc = small_model_cfg()
        params = tr.init_model_params(mc, "joint", seed=0)
        anchors = dh.generate_anchors(mc.level_shapes(), mc.anchors)
        batch = samples[:2]
        images = np.stack([s.image for s in batch])
        th, tw = mc.pcm.target_size
        targets = np.stack([tr.downsample_mask(s.mask, th, tw) for s in batch])
        assignments = [dh.match_anchors(anchors, s.boxes, 0.5) for s in batch]
        w = 0.7

        def grads_for(mode):
            tape = Tape()
            bound = {k: tape.leaf(v) for k, v in params.items()}
            det_out, seg_logits = tr.forward_model(
                bound, Tensor(images), mc, "joint",
                with_det=(mode != "seg"), with_seg=(mode != "det"))
            losses = {}
            if mode != "seg":
                losses["det"], _ = dh.detection_loss(
                    det_out, assignments, [s.boxes for s in batch], anchors,
                    mc.anchors, 3.0)
            if mode != "det":
                losses["seg"] = sh.segmentation_loss(seg_logits, targets)
            if mode == "joint":
                loss = ag.add(losses["det"], ag.scale(losses["seg"], w))
            else:
                loss = losses[mode]
            g = ag.backward(tape, loss)
            return {k: g[t.node_id].data for k, t in bound.items()}

        gj = grads_for("joint")
        gd = grads_for("det")
        gs = grads_for("seg")
        for k in params:
            combined = gd[k] + w * gs[k]
            assert np.max(np.abs(gj[k] - combined)) <= 1e-10

    def test_divergence_aborts_with_step(self, tmp_path):
        samples = tiny_dataset(tmp_path, n=4, size=32)
        mc = small_model_cfg()
        tc = tr.TrainConfig(max_steps=5, decay_milestones=(2, 3), batch_size=2,
                            seed=0)
        params = tr.init_model_params(mc, "joint", 0)
        params["det.det0.cls.w"][:] = np.nan
        with pytest.raises(tr.TrainingDiverged, match=r"step \d"):
            tr.train_loop(samples, mc, tc, params=params)

    def test_no_ltd_mode_runs(self, tmp_path):
        samples = tiny_dataset(tmp_path, n=4, size=32)
        mc = small_model_cfg()
        tc = tr.TrainConfig(max_steps=3, decay_milestones=(1, 2), batch_size=2,
                            seed=0, mode="no_ltd")
        params, log, _ = tr.train_loop(samples, mc, tc)
        assert any(k.startswith("neck.proj") for k in params)
        assert len(log) == 3


class TestCheckpointRoundTrip:
    def test_config_snapshot(self, tmp_path):
        mc = small_model_cfg()
        tc = tr.TrainConfig(mode="joint", seed=4)
        params = tr.init_model_params(mc, "joint", 4)
        ckpt = tr.train_checkpoint(params, 17, mc, tc)
        path = tmp_path / "m.ckpt"
        dio.save_checkpoint(ckpt, str(path))
        back = dio.load_checkpoint(str(path))
        cfg2, mode = tr.model_config_from_checkpoint(back)
        assert mode == "joint"
        assert cfg2.backbone.level_channels == mc.backbone.level_channels
        assert cfg2.ltd.out_channels == mc.ltd.out_channels
        assert cfg2.pcm.mid_channels == mc.pcm.mid_channels
        assert back.step == 17


class TestPredict:
    def test_inference_shapes(self, tmp_path):
        samples = tiny_dataset(tmp_path, n=2, size=32)
        mc = small_model_cfg()
        params = tr.init_model_params(mc, "joint", 0)
        dets, mask = tr.predict(params, samples[0].image, mc, "joint")
        assert mask.shape == (32, 32)
        assert isinstance(dets, list)
