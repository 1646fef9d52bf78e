import numpy as np
import pytest
import torch

from crossview import trainer as T
from crossview.dataman import synth_scene
from crossview.geometry import default_region_masks


@pytest.fixture(scope="module")
def data():
    return [synth_scene(i, 64) for i in range(4)]


def tiny(method="x-pix2pix", **kw):
    base = dict(method=method, resolution=64, base_width=8, steps=4, batch_size=2, learning_rate=2e-4,
                inpaint_steps=3, car_steps=2, realism_steps=3)
    return T.TrainConfig(**{**base, **kw})


def _params_equal(a: dict, b: dict):
    return all(torch.equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(T.ConfigError):
        T.TrainConfig(method="h-pix2pix", direction="g2a")
    with pytest.raises(T.ConfigError):
        T.TrainConfig(method="y-gan")
    with pytest.raises(T.ConfigError, match="unknown config keys"):
        T.TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(T.ConfigError):
        T.preset("nope")


def test_config_text_forms():
    c = T.TrainConfig.from_text("method = x-fork\nbatch_size=4  # comment\nskip=true\nsteps=none\n")
    assert c.method == "x-fork" and c.batch_size == 4 and c.skip is True and c.steps is None
    j = T.TrainConfig.from_text('{"method": "x-seq", "learning_rate": 0.001}')
    assert j.method == "x-seq" and j.learning_rate == 1e-3
    with pytest.raises(T.ConfigError):
        T.TrainConfig.from_text("batch_size=four")


def test_published_defaults():
    c = T.TrainConfig()
    assert (c.adam_beta1, c.adam_beta2, c.smooth, c.lambda1, c.lambda2) == (0.5, 0.999, 0.9, 1.0, 100.0)
    assert (c.realism_lambda1, c.realism_lambda2) == (5.0, 2.0)
    assert (c.inpaint_epochs, c.car_epochs, c.realism_epochs) == (20, 1, 5)
    assert T.TrainConfig(method="x-so", so_half_adv=True).weights.lambda1 == 0.5


def test_presets_exist():
    for name in ("overfit8", "desk64", "desk256"):
        cfg = T.preset(name)
        assert cfg.resolution in (64, 256)
    assert T.preset("overfit8").steps == 200


# ---------------------------------------------------------------- data plumbing


def test_direction_swaps_roles(data):
    a2g = T.conditioning_and_targets(data[:2], tiny())
    g2a = T.conditioning_and_targets(data[:2], tiny(direction="g2a"))
    assert torch.equal(a2g["cond"], g2a["img"]) and torch.equal(a2g["img"], g2a["cond"])
    h = T.conditioning_and_targets(data[:2], tiny("h-pix2pix"))
    assert torch.equal(h["cond"], h["warped"]) and not torch.equal(h["cond"], a2g["cond"])


def test_batch_order_is_stateless():
    a = [T.batch_indices(3, 10, 4, s).tolist() for s in range(6)]
    b = [T.batch_indices(3, 10, 4, s).tolist() for s in range(6)]
    assert a == b
    assert sorted(sum(a[:3], [])) == list(range(10))


# ---------------------------------------------------------------- training


def test_alternation_d_then_g(data):
    sess = T.Session(tiny(), "pix2pix", data)
    batch = sess.batch(0)
    fakes = T.generate("pix2pix", sess.nets, batch)
    g0, d0 = T.param_hash(sess.nets["G"]), T.param_hash(sess.nets["D"])
    sess.d_update(batch, fakes)
    g1, d1 = T.param_hash(sess.nets["G"]), T.param_hash(sess.nets["D"])
    assert d1 != d0 and g1 == g0
    sess.g_update(batch, fakes)
    assert T.param_hash(sess.nets["D"]) == d1 and T.param_hash(sess.nets["G"]) != g1


@pytest.mark.parametrize("method", ["x-pix2pix", "x-so", "x-fork", "x-seq", "h-pix2pix", "h-fork"])
def test_every_method_trains(method, data):
    r = T.train(tiny(method, steps=2), data)
    assert len(r.log) == 2
    assert all(np.isfinite(v) for row in r.log for v in row.values())


def test_g2a_methods(data):
    r = T.train(tiny("x-fork", direction="g2a", steps=1), data)
    out = T.synthesize(r.checkpoint, data[0].ground)
    assert isinstance(out, tuple) and out[0].shape == (64, 64, 3)


def test_fork_logs_seg_from_step_one(data, tmp_path):
    r = T.train(tiny("x-fork"), data, out_dir=tmp_path)
    assert r.log[0]["l1_seg"] > 0
    rows = T.read_log(tmp_path / "log.csv")
    assert list(rows[0]) == list(T.L.LOG_COLUMNS)
    assert (tmp_path / "checkpoint.pt").exists()


def test_determinism(data):
    a = T.train(tiny(), data)
    b = T.train(tiny(), data)
    assert a.log == b.log
    assert _params_equal(a.checkpoint.nets["G"], b.checkpoint.nets["G"])


def test_resume_matches_straight_run(data):
    straight = T.train(tiny(steps=6), data)
    first = T.train(tiny(steps=3), data)
    resumed = T.train(tiny(steps=6), data, resume=first.checkpoint)
    assert straight.log[3:] == resumed.log
    for k in straight.checkpoint.nets:
        assert _params_equal(straight.checkpoint.nets[k], resumed.checkpoint.nets[k])


def test_lr_decay_schedule(data):
    sess = T.Session(tiny(lr_decay=0.5, learning_rate=1e-3), "pix2pix", data)
    sess.total_steps = 10
    lrs = [sess.lr_at(i) for i in range(10)]
    assert lrs[:5] == [1e-3] * 5
    assert np.allclose(lrs[5:], [1e-3, 8e-4, 6e-4, 4e-4, 2e-4])
    assert T.Session(tiny(), "pix2pix", data).lr_at(3) == 2e-4


def test_resume_with_lr_decay(data):
    cfg = tiny(steps=6, lr_decay=0.5)
    straight = T.train(cfg, data)
    first = T.train(tiny(steps=3, lr_decay=0.5), data)
    resumed = T.train(cfg, data, resume=first.checkpoint)
    # the schedule follows the target step count, so a 3-step prefix run is not a prefix
    assert resumed.log[-1]["step"] == 6
    again = T.train(cfg, data, resume=first.checkpoint)
    assert resumed.log == again.log


def test_checkpoint_roundtrip_and_tamper(data, tmp_path):
    r = T.train(tiny(), data)
    r.checkpoint.save(tmp_path / "c.pt")
    ck = T.Checkpoint.load(tmp_path / "c.pt")
    x = data[0].aerial
    assert np.array_equal(T.synthesize(ck, x), T.synthesize(r.checkpoint, x))
    ck.config["learning_rate"] = 1.0
    with pytest.raises(T.CheckpointError):
        ck.build_nets()


def test_divergence_guard(data):
    with pytest.raises(T.TrainingDiverged):
        T.train(tiny(learning_rate=1e3, lambda2=1e6, steps=30, batch_size=1), data)


def test_empty_training_set():
    with pytest.raises(T.ConfigError):
        T.train(tiny(), [])


# ---------------------------------------------------------------- inference


def test_synthesize_deterministic(data):
    r = T.train(tiny(), data)
    a = T.synthesize(r.checkpoint, data[1].aerial)
    assert np.array_equal(a, T.synthesize(r.checkpoint, data[1].aerial))
    assert a.shape == (64, 64, 3) and a.min() >= -1 and a.max() <= 1


def test_seq_synthesize_is_two_stage(data):
    r = T.train(tiny("x-seq"), data)
    img, seg = T.synthesize(r.checkpoint, data[0].aerial)
    nets = r.checkpoint.build_nets()
    with torch.no_grad():
        again = nets["G2"](torch.from_numpy(img).permute(2, 0, 1)[None])[0].permute(1, 2, 0).numpy()
    assert np.allclose(seg, again, atol=1e-6)


def test_h_method_warps_internally(data):
    from crossview.dataman import synthetic_homography

    r = T.train(tiny("h-pix2pix"), data, homography=synthetic_homography(64))
    a = T.synthesize(r.checkpoint, data[0].aerial)
    b = T.synthesize(r.checkpoint, data[0].warped_aerial, prewarped=True)
    assert np.allclose(a, b, atol=1e-5)
    bare = T.train(tiny("h-pix2pix"), data)
    with pytest.raises(T.CheckpointError):
        T.synthesize(bare.checkpoint, data[0].aerial)


def test_h_regions_chain(data, tmp_path):
    cfg = tiny("h-regions")
    res = T.train_h_regions(cfg, data, out_dir=tmp_path)
    for task in T.REGION_TASKS:
        assert (tmp_path / f"checkpoint_{task}.pt").exists()
    masks = default_region_masks(64)
    final, comp = T.synthesize_regions(res.checkpoints, data[0].warped_aerial, prewarped=True,
                                       return_composite=True)
    rest = masks.rest
    assert np.array_equal(comp[rest], data[0].warped_aerial[rest])
    assert final.shape == (64, 64, 3)
    with pytest.raises(T.CheckpointError):
        T.synthesize_regions(res.checkpoints[::-1], data[0].warped_aerial, prewarped=True)


def test_evaluate_l1_restores_modes(data):
    r = T.train(tiny(), data)
    nets = r.nets
    for n in nets.values():
        n.train()
    v = T.evaluate_l1(nets, data, tiny(), "pix2pix")
    assert v > 0 and all(n.training for n in nets.values())
