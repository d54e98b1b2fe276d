import json
import math

import numpy as np
import pytest

from confgrasp import autodiff as ad
from confgrasp.data import Sample
from confgrasp.geometry import GraspRect
from confgrasp.model import BackboneConfig, Detection, PoseOutput, encode, group, init_params, normalize_rect, pose_heads
from confgrasp.optim import SGD, make_optimizer, step_decay
from confgrasp.synth import source_config, synth_generate
from confgrasp.trainer import (
    TrainConfig,
    _batches,
    annotation_targets,
    evaluate,
    evaluate_detections,
    heatmap_batch_targets,
    pose_loss,
    stack_inputs,
    train_locnet,
    train_posenet,
    write_log,
)

CFG = BackboneConfig()


@pytest.fixture(scope="module")
def tiny():
    d_l, _, d_e = synth_generate(source_config(0), 4, 0, 3)
    return d_l, d_e


# ---------------------------------------------------------------- schedule and batching


def test_lr_decay():
    assert step_decay(1e-4, 20, 20) == pytest.approx(5e-5)
    assert step_decay(1e-4, 19, 20) == 1e-4
    assert step_decay(3e-4, 45, 20) == pytest.approx(7.5e-5)


def test_batches_cover_without_replacement():
    rng = np.random.default_rng(0)
    for n in (1, 15, 16, 17, 200):
        bs = _batches(n, 16, rng)
        assert len(bs) == math.ceil(n / 16)
        assert sorted(np.concatenate(bs).tolist()) == list(range(n))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_pose=0)
    with pytest.raises(ValueError):
        make_optimizer("lbfgs", {}, [], 1.0)


def test_empty_or_unlabelled_rejected(tiny):
    with pytest.raises(ValueError):
        train_posenet([], CFG, TrainConfig())
    with pytest.raises(ValueError):
        train_posenet([tiny[0][0].unlabelled()], CFG, TrainConfig())
    with pytest.raises(ValueError):
        train_locnet(tiny[0], {}, CFG, TrainConfig())


def test_heatmap_targets_nonempty():
    d_l, _, _ = synth_generate(source_config(1), 30, 0)
    t = heatmap_batch_targets(d_l, CFG)
    assert t.shape == (30, 1, 32, 32)
    assert np.all(t.reshape(30, -1).sum(axis=1) >= 1)


# ---------------------------------------------------------------- training behaviour


def test_steps_per_epoch_and_reproducible(tiny):
    d_l, _ = tiny
    d = d_l * 5  # 20 samples -> 2 steps per epoch
    tc = TrainConfig(epochs_pose=2, batch_size=16)
    a = train_posenet(d, CFG, tc)
    b = train_posenet(d, CFG, tc)
    assert len(a.log) == 2 * math.ceil(20 / 16)
    assert a.losses("pose") == b.losses("pose")
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_small_lr_never_increases_batch_loss(tiny):
    d_l, _ = tiny
    p = init_params(CFG, 0)
    rgb, depth = stack_inputs(d_l, CFG)
    bi, xs, ys, tgt = annotation_targets(d_l, CFG)
    opt = SGD(p, group(p, "enc.") + group(p, "pose."), 1e-6)
    losses = []
    for _ in range(10):
        opt.zero_grad()
        loss = pose_loss(pose_heads(encode(rgb, depth, p, CFG), bi, xs, ys, p, CFG), tgt)
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))


def test_single_sample_pose_overfit(tiny):
    s = tiny[0][0]
    tc = TrainConfig(batch_size=1, lr_pose=1e-4, augment=False, decay_every=10_000)
    res = train_posenet([s], CFG, tc, epochs=1000)
    losses = res.losses("pose")
    assert min(losses) < 0.01


def test_single_sample_heatmap_overfit_and_freeze(tiny):
    s = tiny[0][1]
    pose = init_params(CFG, 0)
    before = {k: v.data.copy() for k, v in pose.items()}
    tc = TrainConfig(batch_size=1, augment=False, decay_every=10_000)
    res = train_locnet([s], pose, CFG, tc, epochs=500)
    for k in group(pose, "enc.") + group(pose, "pose."):
        np.testing.assert_array_equal(res.params[k].data, before[k])
        np.testing.assert_array_equal(pose[k].data, before[k])
    losses = res.losses("loc_bce")
    assert losses[-1] <= 0.5 * losses[0]
    with ad.no_grad():
        from confgrasp.model import locnet_forward

        heat = locnet_forward(encode(s.rgb, s.depth, res.params, CFG), res.params).data[0, 0]
    i, j = np.unravel_index(np.argmax(heat), heat.shape)
    x, y = (j + 0.5) * 2, (i + 0.5) * 2
    assert min(math.hypot(a.x - x, a.y - y) for a in s.annotations) <= CFG.r_ball


def test_write_log(tmp_path):
    write_log(tmp_path / "log.csv", [(0, 0, "train", "pose", 0.1), (1, 0, "train", "pose", 1e-20)])
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines == ["step,epoch,split,loss_name,value", "0,0,train,pose,0.1", "1,0,train,pose,1e-20"]


# ---------------------------------------------------------------- evaluation


def _det(rect, cfg, m_uc=0.0):
    pose = PoseOutput(np.tile(normalize_rect(rect, cfg), (4, 1)))
    return Detection(rect, 1.0, m_uc, pose)


def _labelled(anns, sid):
    return Sample(np.zeros((3, 64, 64), np.float32), None, anns, True, "t", sid)


def test_eval_fixture_one_third():
    truth = GraspRect(30, 30, 0.3, 10, 6)
    samples = [_labelled([truth], f"s{i}") for i in range(3)]
    dets = [
        [_det(truth, CFG)],
        [_det(GraspRect(30, 30, 0.3 + math.radians(35), 10, 6), CFG)],
        [_det(GraspRect(5, 5, 0.3, 4, 4), CFG)],
    ]
    rep = evaluate_detections(samples, dets, CFG)
    assert rep.success_rate == pytest.approx(1 / 3)
    assert len(rep.records) == 3


def test_eval_oracle_and_missing_detections():
    d_l, _, _ = synth_generate(source_config(2), 5, 0)
    oracle = [[_det(s.annotations[0], CFG)] for s in d_l]
    assert evaluate_detections(d_l, oracle, CFG).success_rate == 1.0
    none = evaluate_detections(d_l, [[] for _ in d_l], CFG)
    assert none.success_rate == 0.0 and math.isnan(none.pose_loss_all)


def test_eval_most_certain_first():
    truth = GraspRect(30, 30, 0.0, 10, 6)
    good, bad = _det(truth, CFG, 0.001), _det(GraspRect(30, 30, 1.2, 10, 6), CFG, 0.5)
    rep = evaluate_detections([_labelled([truth], "a")], [[good, bad]], CFG)
    assert rep.success_rate == 1.0
    assert rep.pose_loss_most_certain == pytest.approx(0.0)
    assert rep.pose_loss_all > 0


def test_report_files(tmp_path, tiny):
    d_l, d_e = tiny
    p = init_params(CFG, 0)
    p["loc.out.b"].data[:] = 0.0
    rep = evaluate(p, d_e, CFG, top_n=3)
    rep.write(tmp_path / "r.json", tmp_path / "r.csv")
    d = json.loads((tmp_path / "r.json").read_text())
    assert {"success_rate", "pose_loss_all", "pose_loss_most_certain"} <= set(d)
    assert len((tmp_path / "r.csv").read_text().splitlines()) == len(d_e) + 1
    assert 0 <= rep.success_rate <= 1
