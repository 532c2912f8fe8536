import numpy as np
import pytest

from alikekit import trainer as tr
from alikekit.backbone import PRESETS, init_weights
from alikekit.losses import LossConfig
from alikekit.tensorgraph import Tensor
from alikekit.trainer import AdamState, TrainConfig


# -- config -------------------------------------------------------------------

def test_config_defaults_match_training_setup():
    c = TrainConfig()
    assert c.lr_peak == 3e-3 and c.warmup_steps == 500
    assert c.accumulation == 16
    assert c.top_k_train == 400 and c.n_random == 400


def test_config_validation():
    with pytest.raises(ValueError, match="divisible by 32"):
        TrainConfig(size=100)
    with pytest.raises(ValueError, match="preset"):
        TrainConfig(model="huge")


def test_lr_schedule():
    c = TrainConfig()
    assert c.lr(0) == 0.0
    assert c.lr(250) == pytest.approx(1.5e-3)
    assert c.lr(500) == pytest.approx(3e-3)
    assert c.lr(2000) == pytest.approx(3e-3)


def test_parse_config_file(tmp_path):
    p = tmp_path / "train.cfg"
    p.write_text("# toy run\nmodel = tiny\nsteps = 32\nlr_peak = 0.001\n"
                 "w_de = 2.5\n\nseed=9\n")
    c = tr.parse_train_config(p)
    assert c.model == "tiny" and c.steps == 32 and c.seed == 9
    assert c.lr_peak == 0.001 and c.loss.w_de == 2.5


def test_parse_config_rejects_unknown_key(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("banana = 3\n")
    with pytest.raises(ValueError, match="banana"):
        tr.parse_train_config(p)


# -- synthetic pairs ----------------------------------------------------------

def test_pair_deterministic():
    a = tr.generate_pair(42, 96)
    b = tr.generate_pair(42, 96)
    assert np.array_equal(a.image_A, b.image_A)
    assert np.array_equal(a.image_B, b.image_B)
    assert np.array_equal(a.homography, b.homography)


def test_pair_identity_mode():
    p = tr.generate_pair(3, 64, jitter=False)
    np.testing.assert_array_equal(p.image_A, p.image_B)
    np.testing.assert_array_equal(p.homography, np.eye(3))


def test_pair_shapes_and_range():
    p = tr.generate_pair(5, 96)
    assert p.image_A.shape == (96, 96, 3) and p.image_B.shape == (96, 96, 3)
    for img in (p.image_A, p.image_B):
        assert img.min() >= 0.0 and img.max() <= 1.0
    assert abs(np.linalg.det(p.homography)) > 1e-6


def test_pair_homography_bounds():
    for seed in range(20):
        h = tr.generate_pair(seed, 96).homography
        # scale/rotation block stays within the sampling bounds
        s = np.sqrt(abs(np.linalg.det(h[:2, :2])))
        assert 0.7 < s < 1.4
        assert np.abs(h[2, :2]).max() < 5e-3


def test_warp_image_corner_transfer():
    # a bright dot must land where the homography sends it
    img = np.zeros((96, 96, 3))
    img[40, 30] = 1.0
    h = tr._sample_homography(np.random.default_rng(1), 96)
    out = tr.warp_image(img, h, (96, 96))
    q = h @ [30.0, 40.0, 1.0]
    expect = q[:2] / q[2]
    v, u = np.unravel_index(out[:, :, 0].argmax(), (96, 96))
    assert np.hypot(u - expect[0], v - expect[1]) <= 0.5 + np.sqrt(0.5)


# -- keypoint sampling --------------------------------------------------------

def _many_peaks_map(h, w, spacing=6):
    s = np.full((h, w), 0.05)
    s[spacing // 2:h:spacing, spacing // 2:w:spacing] = 0.9
    return s


def test_sampling_top_k_contract():
    cfg = TrainConfig(top_k_train=40, n_random=40)
    s = _many_peaks_map(96, 96)  # 256 peaks
    det, rnd = tr.sample_training_keypoints(s, cfg, np.random.default_rng(0))
    assert len(det) == 40 and len(rnd) == 40


def test_sampling_low_map_all_random():
    cfg = TrainConfig(top_k_train=40, n_random=40)
    det, rnd = tr.sample_training_keypoints(np.full((96, 96), 0.1), cfg,
                                            np.random.default_rng(0))
    assert len(det) == 0 and len(rnd) == 40


def test_sampling_distance_invariant():
    cfg = TrainConfig(top_k_train=30, n_random=30)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        s = _many_peaks_map(96, 96, spacing=12)
        det, rnd = tr.sample_training_keypoints(s, cfg, rng)
        if len(det) and len(rnd):
            cheb = np.abs(rnd[:, None] - det.coords.data[None]).max(axis=2)
            assert cheb.min() >= cfg.window


def test_sampling_saturated_image_warns():
    # peaks every 4 px leave no spot >= window away from all of them
    cfg = TrainConfig(top_k_train=100, n_random=10)
    s = _many_peaks_map(32, 32, spacing=4)
    with pytest.warns(UserWarning, match="non-salient"):
        det, rnd = tr.sample_training_keypoints(s, cfg, np.random.default_rng(0))
    assert len(det) > 0 and len(rnd) < 10


# -- Adam ---------------------------------------------------------------------

def test_adam_first_step_hand_value():
    params = {"p": np.array([1.0])}
    state = AdamState.init(params)
    tr.adam_step(params, {"p": np.array([2.0])}, state, lr=0.1)
    np.testing.assert_allclose(params["p"], [1.0 - 0.1 * 2.0 / (2.0 + 1e-8)],
                               rtol=1e-9)


def test_adam_zero_grad_keeps_param():
    params = {"p": np.array([1.5])}
    state = AdamState.init(params)
    state.m["p"][:] = 0.3
    state.v["p"][:] = 0.2
    tr.adam_step(params, {"p": np.zeros(1)}, state, lr=0.0)
    np.testing.assert_allclose(params["p"], [1.5])
    assert state.m["p"][0] == pytest.approx(0.27)  # moments decay


def test_adam_symmetry():
    params = {"a": np.array([1.0]), "b": np.array([1.0])}
    state = AdamState.init(params)
    tr.adam_step(params, {"a": np.array([0.5]), "b": np.array([0.5])},
                 state, lr=0.01)
    assert params["a"][0] == params["b"][0]


def test_accumulation_equivalent_to_mean_loss_step():
    # two pairs accumulated at 1/2 each == one step on the mean loss
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(4)
    c1, c2 = rng.standard_normal(4), rng.standard_normal(4)

    def grads_accumulated():
        p = Tensor(w0.copy(), requires_grad=True)
        for c in (c1, c2):
            (((p * c) ** 2).sum() / 2).backward()
        return p.grad

    def grads_mean():
        p = Tensor(w0.copy(), requires_grad=True)
        ((((p * c1) ** 2).sum() + ((p * c2) ** 2).sum()) / 2).backward()
        return p.grad

    ga, gm = grads_accumulated(), grads_mean()
    np.testing.assert_allclose(ga, gm, rtol=1e-6)

    pa, pm = {"w": w0.copy()}, {"w": w0.copy()}
    tr.adam_step(pa, {"w": ga}, AdamState.init(pa), lr=0.01)
    tr.adam_step(pm, {"w": gm}, AdamState.init(pm), lr=0.01)
    np.testing.assert_allclose(pa["w"], pm["w"], rtol=1e-6)


# -- train loop ---------------------------------------------------------------

def _tiny_run_config(steps):
    return TrainConfig(steps=steps, accumulation=2, top_k_train=50,
                       n_random=50, checkpoint_every=0)


def test_train_zero_steps_is_init():
    res = tr.train(_tiny_run_config(0))
    init = init_weights(PRESETS["tiny"], seed=0, dtype=np.float32)
    for k, v in init.items():
        np.testing.assert_array_equal(res.weights[k], v)


def test_train_smoke_and_determinism():
    r1 = tr.train(_tiny_run_config(2))
    r2 = tr.train(_tiny_run_config(2))
    assert r1.rows == r2.rows
    assert len(r1.rows) == 3 and r1.rows[0] == tr.TrainResult.CSV_HEADER
    total = float(r1.rows[1].split(",")[-1])
    assert np.isfinite(total) and total > 0


def test_train_writes_artifacts(tmp_path):
    cfg = TrainConfig(steps=2, accumulation=2, top_k_train=30, n_random=30,
                      checkpoint_every=1, keep_checkpoints=1)
    tr.train(cfg, out_dir=str(tmp_path))
    assert (tmp_path / "loss_curve.csv").exists()
    assert (tmp_path / "checkpoint_final.ckpt").exists()
    cks = sorted(tmp_path.glob("checkpoint_0*.ckpt"))
    assert len(cks) == 1  # pruned to keep_checkpoints


def test_train_aborts_on_nonfinite(monkeypatch):
    def bad_pair_loss(pair, weights, config):
        import alikekit.losses as ls
        return ls.total_loss(float("nan"), 0.0, 0.0, 0.0)

    monkeypatch.setattr(tr, "pair_loss", bad_pair_loss)
    with pytest.raises(tr.TrainError, match="non-finite"):
        tr.train(_tiny_run_config(1))
