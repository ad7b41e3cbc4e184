import csv
import json
import shutil

import numpy as np
import pytest

from deformwarp import data_io
from deformwarp.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, RunConfig, UsageError, main
from deformwarp.data_io import read_container, read_png, write_container, write_pose
from deformwarp.metrics import mask_ssim, ssim
from deformwarp.pose import J, Pose, decompose_regions, heatmap_from_pose
from deformwarp.synth import SyntheticFigureSpec, generate_synthetic_pair
from deformwarp.warp import build_warp_plan, deform

W, H = 32, 64


@pytest.fixture(scope="module")
def pair():
    return generate_synthetic_pair(SyntheticFigureSpec(), 4)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", str(out), "--count", "3", "--seed", "7"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--variant", "dsc", "--iters", "2", "--manifest", str(dataset / "manifest.csv"),
                 "--out", str(out), "--batch-size", "2"]) == EXIT_OK
    return out


def write_poses(tmp_path, pose_a, pose_b):
    pa, pb = tmp_path / "a.json", tmp_path / "b.json"
    write_pose(pa, pose_a, W, H)
    write_pose(pb, pose_b, W, H)
    return pa, pb


def features(tmp_path, c=5, seed=0):
    # non-negative, like the post-activation maps the skips carry; max-merge against empty parts clips negatives
    F = np.abs(np.random.default_rng(seed).normal(size=(H // 2, W // 2, c)))
    path = tmp_path / "f.dwt"
    write_container(path, {"features": F})
    return F, path


# -- heatmap ----------------------------------------------------------------------------

@pytest.mark.parametrize("extra,sigma,squared", [([], 6.0, False), (["--sigma", "2.5", "--squared"], 2.5, True)])
def test_heatmap_matches_library(tmp_path, pair, extra, sigma, squared):
    pa, _ = write_poses(tmp_path, pair.pose_a, pair.pose_b)
    assert main(["heatmap", str(pa), str(tmp_path / "h.dwt")] + extra) == EXIT_OK
    entries = read_container(tmp_path / "h.dwt")
    assert entries["heatmaps"].shape == (18, H, W)
    assert f"sigma{sigma:g}" in entries
    pose = data_io.read_pose(pa)
    ref = heatmap_from_pose(pose, W, H, sigma, squared=squared).maps
    assert entries["heatmaps"].tobytes() == ref.tobytes()


def test_heatmap_default_metadata(tmp_path, pair):
    pa, _ = write_poses(tmp_path, pair.pose_a, pair.pose_b)
    main(["heatmap", str(pa), str(tmp_path / "h.dwt")])
    assert "sigma6" in read_container(tmp_path / "h.dwt")


def test_heatmap_bad_pose_exits_with_data_error(tmp_path, capsys):
    (tmp_path / "p.json").write_text(json.dumps({"width": 3, "height": 3, "joints": [[0, 0, 1]] * 17}))
    assert main(["heatmap", str(tmp_path / "p.json"), str(tmp_path / "h.dwt")]) == EXIT_DATA
    assert "expected 18 joints" in capsys.readouterr().err


# -- warp -------------------------------------------------------------------------------

def test_warp_matches_library(tmp_path, pair):
    pa, pb = write_poses(tmp_path, pair.pose_a, pair.pose_b)
    F, fpath = features(tmp_path)
    assert main(["warp", str(fpath), str(pa), str(pb), str(tmp_path / "o.dwt")]) == EXIT_OK
    ra = decompose_regions(data_io.read_pose(pa), W, H)
    rb = decompose_regions(data_io.read_pose(pb), W, H)
    ref, _ = deform(F, build_warp_plan(ra, rb, (H, W), F.shape[:2]))
    assert read_container(tmp_path / "o.dwt")["features"].tobytes() == ref.tobytes()


def test_warp_identity_pose_reproduces_input(tmp_path, pair):
    pa, pb = write_poses(tmp_path, pair.pose_a, pair.pose_a)
    F, fpath = features(tmp_path, seed=1)
    assert main(["warp", str(fpath), str(pa), str(pb), str(tmp_path / "o.dwt")]) == EXIT_OK
    assert np.abs(read_container(tmp_path / "o.dwt")["features"] - F).max() < 1e-6


def test_warp_missing_limb_warns(tmp_path, pair, capsys):
    vis = pair.pose_a.visible.copy()
    vis[J["r_wrist"]] = False
    pose_a = Pose(pair.pose_a.xy, vis)
    pose_b = Pose(pair.pose_b.xy, vis)
    pa, pb = write_poses(tmp_path, pose_a, pose_b)
    _, fpath = features(tmp_path)
    assert main(["warp", str(fpath), str(pa), str(pb), str(tmp_path / "o.dwt")]) == EXIT_OK
    err = capsys.readouterr().err
    assert "warning" in err and "R_LOWER_ARM" in err


def test_warp_degenerate_geometry_names_part(tmp_path, pair, capsys):
    xy = pair.pose_a.xy.copy()
    # every visible head joint on one horizontal line: zero-height head box
    for name in ("nose", "neck", "r_eye", "l_eye", "r_ear", "l_ear"):
        xy[J[name], 1] = 10.0
    pa, pb = write_poses(tmp_path, Pose(xy, pair.pose_a.visible), pair.pose_b)
    _, fpath = features(tmp_path)
    assert main(["warp", str(fpath), str(pa), str(pb), str(tmp_path / "o.dwt")]) == EXIT_DATA
    assert "HEAD" in capsys.readouterr().err


def test_warp_missing_entry(tmp_path, pair):
    pa, pb = write_poses(tmp_path, pair.pose_a, pair.pose_b)
    _, fpath = features(tmp_path)
    assert main(["warp", str(fpath), str(pa), str(pb), str(tmp_path / "o.dwt"), "--entry", "nope"]) == EXIT_DATA


# -- synth / train / generate / eval ----------------------------------------------------

def test_synth_layout(dataset):
    rows = data_io.read_manifest(dataset / "manifest.csv")
    assert len(rows) == 3 and all(r.mask_b is not None and r.mask_b.is_file() for r in rows)
    assert read_png(rows[0].image_a).shape == (H, W, 3)


def test_train_outputs(trained):
    assert (trained / "final.dwt").is_file()
    rows = list(csv.reader((trained / "log.csv").open()))
    assert rows[0] == ["iteration", "loss_D", "loss_G_adv", "recon", "wall_time"] and len(rows) == 3
    assert (trained / "losses.csv").read_text().splitlines()[0] == "iteration,loss_D,loss_G_adv,recon"


def test_train_twice_identical_losses(tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--variant", "full", "--iters", "3", "--seed", "0", "--pairs", "4",
                     "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()


def test_train_resume_matches(tmp_path):
    common = ["--variant", "baseline", "--seed", "2", "--pairs", "4", "--checkpoint-every", "2"]
    assert main(["train", *common, "--iters", "4", "--out", str(tmp_path / "full")]) == EXIT_OK
    assert main(["train", *common, "--iters", "2", "--out", str(tmp_path / "part")]) == EXIT_OK
    assert main(["train", "--resume", str(tmp_path / "part" / "checkpoint_000002.dwt"), "--iters", "4"]) == EXIT_OK
    assert (tmp_path / "full" / "losses.csv").read_bytes() == (tmp_path / "part" / "losses.csv").read_bytes()
    a = read_container(tmp_path / "full" / "final.dwt")
    b = read_container(tmp_path / "part" / "final.dwt")
    tensors = [k for k in a if not k.startswith("meta/config=")]  # the config names each run's out_dir
    assert all(a[k].tobytes() == b[k].tobytes() for k in tensors)


def test_train_config_file(tmp_path):
    (tmp_path / "run.toml").write_text(f'variant = "dsc"\niterations = 1\nlam = 0.5\nout_dir = "{tmp_path / "o"}"\n'
                                       "synthetic_pairs = 2\n")
    assert main(["train", "--config", str(tmp_path / "run.toml"), "--lam", "0.25"]) == EXIT_OK
    _, cfg, it = data_io.load_checkpoint(tmp_path / "o" / "final.dwt")
    assert it == 1 and cfg["train"]["lam"] == 0.25 and cfg["run"]["variant"] == "dsc"


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "run.toml").write_text("iterations = 1\nlearning_rat = 3\n")
    assert main(["train", "--config", str(tmp_path / "run.toml")]) == EXIT_USAGE
    assert "learning_rat" in capsys.readouterr().err
    with pytest.raises(UsageError, match="bogus"):
        RunConfig.from_mapping({"bogus": 1})


def test_train_divergence_exit_code(tmp_path, trained, capsys):
    stores, cfg, it = data_io.load_checkpoint(trained / "final.dwt")
    cfg["run"]["out_dir"] = str(tmp_path / "div")
    for name in stores["G"].params:
        stores["G"].params[name][...] = np.nan
    data_io.save_checkpoint(tmp_path / "nan.dwt", stores, cfg, it)
    assert main(["train", "--resume", str(tmp_path / "nan.dwt"), "--iters", str(it + 2)]) == EXIT_DIVERGED
    assert f"iteration {it}" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path, dataset):
    code = main(["eval", str(dataset / "manifest.csv"), str(tmp_path / "e.csv"),
                 "--checkpoint", str(tmp_path / "none.dwt")])
    assert code == EXIT_DATA


def test_bad_flag_is_usage_error():
    assert main(["train", "--no-such-flag"]) == EXIT_USAGE
    assert main(["generate", "ckpt.dwt", "out.png"]) == EXIT_DATA  # checkpoint checked before arguments


def test_generate_single(tmp_path, dataset, trained):
    row = data_io.read_manifest(dataset / "manifest.csv")[0]
    out = tmp_path / "g.png"
    assert main(["generate", str(trained / "final.dwt"), str(row.image_a), str(row.pose_a), str(row.pose_b),
                 str(out)]) == EXIT_OK
    assert read_png(out).shape == read_png(row.image_a).shape


def test_generate_manifest_then_eval_matches_library(tmp_path, dataset, trained):
    gen = tmp_path / "gen"
    assert main(["generate", str(trained / "final.dwt"), str(gen), "--manifest", str(dataset / "manifest.csv")]) == 0
    assert main(["eval", str(dataset / "manifest.csv"), str(tmp_path / "e.csv"), "--generated", str(gen)]) == 0
    rows = list(csv.DictReader((tmp_path / "e.csv").open()))
    assert [r["pair"] for r in rows] == ["0", "1", "2", "mean"]
    for i, r in enumerate(data_io.read_manifest(dataset / "manifest.csv")):
        x, y = read_png(gen / f"{i:05d}.png"), read_png(r.image_b)
        assert float(rows[i]["ssim"]) == ssim(x, y)
        assert float(rows[i]["mask_ssim"]) == mask_ssim(x, y, data_io.read_mask_png(r.mask_b))
    assert float(rows[3]["ssim"]) == pytest.approx(np.mean([float(r["ssim"]) for r in rows[:3]]), abs=1e-15)


def test_eval_identical_images_score_one(tmp_path, dataset):
    gen = tmp_path / "gen"
    gen.mkdir()
    for i, r in enumerate(data_io.read_manifest(dataset / "manifest.csv")):
        shutil.copy(r.image_b, gen / f"{i:05d}.png")
    assert main(["eval", str(dataset / "manifest.csv"), str(tmp_path / "e.csv"), "--generated", str(gen)]) == 0
    rows = list(csv.DictReader((tmp_path / "e.csv").open()))
    assert all(float(r["ssim"]) == 1.0 and float(r["mask_ssim"]) == 1.0 for r in rows)


def test_eval_with_checkpoint(tmp_path, dataset, trained):
    assert main(["eval", str(dataset / "manifest.csv"), str(tmp_path / "e.csv"),
                 "--checkpoint", str(trained / "final.dwt")]) == EXIT_OK
    assert len(list(csv.DictReader((tmp_path / "e.csv").open()))) == 4


def test_thread_env_validation(monkeypatch, tmp_path, pair):
    pa, _ = write_poses(tmp_path, pair.pose_a, pair.pose_b)
    monkeypatch.setenv("DEFORMWARP_THREADS", "zero")
    assert main(["heatmap", str(pa), str(tmp_path / "h.dwt")]) == EXIT_USAGE
    monkeypatch.setenv("DEFORMWARP_THREADS", "1")
    assert main(["heatmap", str(pa), str(tmp_path / "h.dwt")]) == EXIT_OK
