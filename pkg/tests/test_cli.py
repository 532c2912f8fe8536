import numpy as np
import pytest

from alikekit import cli, netpbm
from alikekit.backbone import PRESETS, init_weights
from alikekit.geometry import read_homography
from alikekit.tensorgraph import save_checkpoint
from alikekit.trainer import generate_pair


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    save_checkpoint(path, init_weights(PRESETS["tiny"], seed=0))
    return str(path)


def _passthrough_weights():
    """Hand-crafted tiny weights whose score map is a sharpened sigmoid of
    image brightness: bright dots become keypoints at known positions, and
    the four pyramid levels carry pooled brightness so descriptors vary
    spatially."""
    from alikekit.backbone import weight_shapes
    w = {k: np.zeros(s) for k, s in weight_shapes(PRESETS["tiny"]).items()}
    w["block1.conv1.w"][0, :, 1, 1] = 1 / 3          # channel 0 = brightness
    w["block1.conv2.w"][0, 0, 1, 1] = 1.0
    for blk in ("block2", "block3", "block4"):       # keep channel 0 flowing
        w[f"{blk}.conv1.w"][0, 0, 1, 1] = 1.0
        w[f"{blk}.conv2.w"][0, 0, 1, 1] = 1.0
    for i in range(1, 5):                            # one feature per level
        w[f"agg{i}.w"][0, 0, 0, 0] = 1.0
    w["head.pre.w"][0, 0, 0, 0] = 1.0
    w["head.conv1.w"][0, 0, 1, 1] = 30.0
    w["head.conv1.b"][0] = -6.0                      # sigmoid(30 b - 6)
    return w


@pytest.fixture(scope="module")
def crafted_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "crafted.ckpt"
    save_checkpoint(path, _passthrough_weights())
    return str(path)


@pytest.fixture(scope="module")
def dots_image(tmp_path_factory):
    """Dark image with bright dots of distinct intensities at known spots."""
    rng = np.random.default_rng(12)
    img = np.full((96, 96, 3), 0.1)
    spots = [(12, 20), (30, 70), (55, 40), (80, 15), (70, 80), (45, 10)]
    for k, (v, u) in enumerate(spots):
        img[v, u] = 0.5 + 0.08 * k + rng.uniform(0, 0.01)
    path = tmp_path_factory.mktemp("img") / "dots.ppm"
    netpbm.write_netpbm(path, img)
    return str(path), spots


@pytest.fixture(scope="module")
def pair_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("pairs")
    assert cli.main(["synth-gen", "--seed", "3", "--count", "2",
                     "--size", "96", "--out", str(d)]) == 0
    return d


def test_model_info_receptive_field(capsys):
    assert cli.main(["model-info", "--config", "normal"]) == 0
    out = capsys.readouterr().out
    assert "receptive field: 204" in out


def test_model_info_params(capsys):
    assert cli.main(["model-info", "--config", "tiny"]) == 0
    out = capsys.readouterr().out
    line = [ln for ln in out.splitlines() if ln.startswith("parameters")][0]
    params = int(line.split()[1])
    assert abs(params - 80_000) <= 0.15 * 80_000


def test_model_info_bad_preset_exits_2():
    with pytest.raises(SystemExit) as e:
        cli.main(["model-info", "--config", "bogus"])
    assert e.value.code == 2


def test_synth_gen_deterministic(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    for d in (d1, d2):
        assert cli.main(["synth-gen", "--seed", "7", "--count", "2",
                         "--size", "96", "--out", str(d)]) == 0
    for sub in ("pair0000", "pair0001"):
        for name in ("imageA.ppm", "imageB.ppm", "H.txt"):
            assert (d1 / sub / name).read_bytes() == \
                (d2 / sub / name).read_bytes()


def test_synth_gen_h_is_invertible(pair_dir):
    h = read_homography(pair_dir / "pair0000" / "H.txt")
    assert h.shape == (3, 3) and abs(np.linalg.det(h)) > 1e-9


def test_detect_writes_keypoints(dots_image, crafted_ckpt, tmp_path):
    img, spots = dots_image
    out = tmp_path / "kps.txt"
    rc = cli.main(["detect", "--image", img, "--checkpoint", crafted_ckpt,
                   "--top-k", "100", "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# alike-kpts v1 dim=64")
    got = np.array([[float(t) for t in ln.split()[:2]] for ln in lines[1:]])
    assert len(got) == len(spots)
    for v, u in spots:  # each dot detected within a pixel
        assert np.abs(got - [u, v]).max(axis=1).min() < 1.0


def test_detect_deterministic(pair_dir, tiny_ckpt, tmp_path):
    outs = []
    for name in ("x.txt", "y.txt"):
        out = tmp_path / name
        assert cli.main(["detect", "--image",
                         str(pair_dir / "pair0000/imageA.ppm"),
                         "--checkpoint", tiny_ckpt, "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_detect_missing_image_exits_1(tiny_ckpt, tmp_path, capsys):
    rc = cli.main(["detect", "--image", str(tmp_path / "nope.ppm"),
                   "--checkpoint", tiny_ckpt, "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "nope.ppm" in capsys.readouterr().err


def test_detect_malformed_image_exits_1(tiny_ckpt, tmp_path, capsys):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6\n9 9\n255\nxx")
    rc = cli.main(["detect", "--image", str(bad), "--checkpoint", tiny_ckpt,
                   "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "byte" in capsys.readouterr().err


def test_match_self_identity(dots_image, crafted_ckpt, tmp_path):
    img, spots = dots_image
    kps = tmp_path / "kps.txt"
    cli.main(["detect", "--image", img, "--checkpoint", crafted_ckpt,
              "--top-k", "50", "--out", str(kps)])
    out = tmp_path / "matches.txt"
    assert cli.main(["match", "--kpts-a", str(kps), "--kpts-b", str(kps),
                     "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == len(spots)
    for line in lines:
        i, j, sim = line.split()
        assert i == j and abs(float(sim) - 1.0) < 1e-5


def test_match_empty_files(tmp_path):
    kps = tmp_path / "empty.txt"
    kps.write_text("# alike-kpts v1 dim=4\n")
    out = tmp_path / "m.txt"
    assert cli.main(["match", "--kpts-a", str(kps), "--kpts-b", str(kps),
                     "--out", str(out)]) == 0
    assert out.read_text() == ""


def test_match_dim_mismatch_exits_1(tmp_path, capsys):
    a = tmp_path / "a.txt"
    b = tmp_path / "b.txt"
    a.write_text("# alike-kpts v1 dim=4\n1 1 0.5 1 0 0 0\n")
    b.write_text("# alike-kpts v1 dim=8\n1 1 0.5 1 0 0 0 0 0 0 0\n")
    assert cli.main(["match", "--kpts-a", str(a), "--kpts-b", str(b),
                     "--out", str(tmp_path / "m")]) == 1
    assert "mismatch" in capsys.readouterr().err


def test_match_viz_layout(dots_image, crafted_ckpt, tmp_path):
    img, _ = dots_image
    kps = tmp_path / "kps.txt"
    cli.main(["detect", "--image", img, "--checkpoint", crafted_ckpt,
              "--top-k", "20", "--out", str(kps)])
    viz = tmp_path / "viz.ppm"
    assert cli.main(["match", "--kpts-a", str(kps), "--kpts-b", str(kps),
                     "--image-a", img, "--image-b", img,
                     "--viz-out", str(viz), "--out", str(tmp_path / "m")]) == 0
    canvas = netpbm.read_netpbm(viz)
    assert canvas.shape == (96, 192, 3)
    greens = (canvas[:, :, 1] == 255) & (canvas[:, :, 0] == 0)
    assert greens.any()


def test_eval_homography_identity_pair(dots_image, crafted_ckpt, tmp_path):
    img, _ = dots_image
    hfile = tmp_path / "H.txt"
    hfile.write_text("1 0 0\n0 1 0\n0 0 1\n")
    manifest = tmp_path / "pairs.txt"
    manifest.write_text(f"{img} {img} {hfile}\n")
    out = tmp_path / "metrics.csv"
    assert cli.main(["eval-homography", "--pairs", str(manifest),
                     "--checkpoint", crafted_ckpt, "--top-k", "200",
                     "--estimate", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == cli.mm.MetricCounts.CSV_HEADER
    row = lines[1].split(",")
    rep, mma3 = float(row[7]), float(row[10])
    assert rep == 1.0 and mma3 == 1.0
    assert lines[-1].startswith("mean,")
    assert float(lines[-1].split(",")[-1]) == 1.0  # mha-correct@3


def test_eval_homography_empty_manifest_exits_1(tiny_ckpt, tmp_path, capsys):
    manifest = tmp_path / "pairs.txt"
    manifest.write_text("")
    assert cli.main(["eval-homography", "--pairs", str(manifest),
                     "--checkpoint", tiny_ckpt,
                     "--out", str(tmp_path / "m.csv")]) == 1


def test_eval_homography_skips_missing(pair_dir, tiny_ckpt, tmp_path, capsys):
    img = pair_dir / "pair0000/imageA.ppm"
    hfile = tmp_path / "H.txt"
    hfile.write_text("1 0 0\n0 1 0\n0 0 1\n")
    manifest = tmp_path / "pairs.txt"
    manifest.write_text(f"missing.ppm missing.ppm {hfile}\n{img} {img} {hfile}\n")
    out = tmp_path / "metrics.csv"
    assert cli.main(["eval-homography", "--pairs", str(manifest),
                     "--checkpoint", tiny_ckpt, "--top-k", "50",
                     "--out", str(out)]) == 0
    assert "pair 0" in capsys.readouterr().err
    assert len(out.read_text().splitlines()) == 3  # header + 1 pair + mean


def test_train_toy_zero_steps_matches_init(tmp_path, tiny_ckpt):
    cfgfile = tmp_path / "train.cfg"
    cfgfile.write_text("steps = 0\nmodel = tiny\nseed = 0\n")
    out = tmp_path / "run"
    assert cli.main(["train-toy", "--config", str(cfgfile),
                     "--out", str(out)]) == 0
    from alikekit.tensorgraph import load_checkpoint
    got = load_checkpoint(out / "checkpoint_final.ckpt")
    init = init_weights(PRESETS["tiny"], seed=0, dtype=np.float32)
    for k, v in init.items():
        np.testing.assert_array_equal(got[k], v)


def test_train_toy_bad_config_exits_1(tmp_path, capsys):
    cfgfile = tmp_path / "train.cfg"
    cfgfile.write_text("nonsense = 1\n")
    assert cli.main(["train-toy", "--config", str(cfgfile),
                     "--out", str(tmp_path / "run")]) == 1
