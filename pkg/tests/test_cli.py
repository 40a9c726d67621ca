import hashlib
import json

import numpy as np
import pytest

from fusesplat.cli import main
from fusesplat.dataio import load_dataset
from fusesplat.rasterizer import render_fused
from fusesplat.scene import load_scene

FAST = ["--densify-from", "100", "--densify-interval", "100", "--densify-grad-threshold", "1e-3",
        "--max-gaussians", "60", "--n-init-points", "30"]


def digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha1(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    data, s1, s2 = base / "data", base / "s1", base / "s2"
    assert main(["synth", "--out", str(data), "--seed", "2", "--views", "8", "--gaussians", "16",
                 "--width", "48", "--height", "48", "--save-ground-truth"]) == 0
    assert main(["train-stage1", "--data", str(data), "--out", str(s1), "--iters", "500",
                 "--checkpoint-every", "200", "--seed", "1", *FAST]) == 0
    assert main(["train-stage2", "--data", str(data), "--scene", str(s1 / "scene.ply"), "--out", str(s2),
                 "--iters", "300", "--seed", "1"]) == 0
    return base


def test_stage1_artifacts(pipeline):
    s1 = pipeline / "s1"
    log = json.loads((s1 / "stage1_log.json").read_text())
    assert log["status"] == "complete"
    assert [r["iteration"] for r in log["history"]] == list(range(500))
    assert all(np.isfinite(r["loss"]) for r in log["history"])
    assert (s1 / "stage1_checkpoint.ply").is_file()
    scene = load_scene(s1 / "scene.ply")
    assert (scene.n_visible, scene.n_infrared) == (log["n_visible"], log["n_infrared"])
    assert log["config"]["stage1_iters"] == 500 and log["config"]["lambda2"] == 2.0


def test_stage2_artifacts(pipeline):
    log = json.loads((pipeline / "s2" / "stage2_log.json").read_text())
    assert log["status"] == "complete" and len(log["history"]) == 300
    assert (pipeline / "s2" / "cma.bin").is_file()


def test_render_and_evaluate_fused_beats_single(pipeline):
    data, out = pipeline / "data", pipeline
    means = {}
    for mode in ("fused", "visible", "infrared"):
        extra = ["--cma", str(out / "s2" / "cma.bin")] if mode == "fused" else []
        assert main(["render", "--scene", str(out / "s1" / "scene.ply"), "--data", str(data), "--split", "all",
                     "--modality", mode, "--out", str(out / f"r_{mode}"), *extra]) == 0
        assert main(["evaluate", "--data", str(data), "--renders", str(out / f"r_{mode}"), "--split", "all",
                     "--out", str(out / f"eval_{mode}")]) == 0
        doc = json.loads((out / f"eval_{mode}.json").read_text())
        means[mode] = doc["scene_means"]["data"]["ssim_avg"]
    assert means["fused"] >= max(means["visible"], means["infrared"]), means


def test_tau_override_one_matches_concatenated_render(pipeline):
    scene_path = pipeline / "s1" / "scene.ply"
    out = pipeline / "r_tau1"
    assert main(["render", "--scene", str(scene_path), "--data", str(pipeline / "data"), "--tau-override", "1",
                 "--raw", "--out", str(out)]) == 0
    scene = load_scene(scene_path)
    index = load_dataset(pipeline / "data")
    for v in index.split("test"):
        expected = render_fused(scene, v.camera, np.ones(len(scene))).image
        assert np.abs(np.load(out / f"{v.name}.npy") - expected).max() <= 1e-6


def test_evaluate_identical_images_is_perfect(tmp_path, pipeline):
    data = pipeline / "data"
    index = load_dataset(data)
    renders = tmp_path / "same"
    renders.mkdir()
    # Dataset with identical visible and infrared images, and a fused image equal to both.
    same = tmp_path / "same_data"
    for sub in ("visible", "infrared"):
        (same / sub).mkdir(parents=True)
    for v in index.views:
        png = v.visible_path.read_bytes()
        (same / "visible" / f"{v.name}.png").write_bytes(png)
        (same / "infrared" / f"{v.name}.png").write_bytes(png)
        (renders / f"{v.name}.png").write_bytes(png)
    (same / "cameras.json").write_bytes((data / "cameras.json").read_bytes())
    assert main(["evaluate", "--data", str(same), "--renders", str(renders), "--out", str(tmp_path / "rep")]) == 0
    doc = json.loads((tmp_path / "rep.json").read_text())
    assert doc["scene_means"]["same_data"]["ssim_avg"] == pytest.approx(1.0, abs=1e-12)
    assert doc["scene_means"]["same_data"]["psnr_avg"] is None


def test_missing_dataset_exit_2(tmp_path, capsys):
    missing = tmp_path / "no_such_dataset"
    assert main(["train-stage1", "--data", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_stage1_seed_determinism(tmp_path, pipeline):
    outs = []
    for k in range(2):
        o = tmp_path / f"run{k}"
        assert main(["train-stage1", "--data", str(pipeline / "data"), "--out", str(o), "--iters", "40",
                     "--seed", "5", *FAST]) == 0
        outs.append((o / "scene.ply").read_bytes())
    assert outs[0] == outs[1]


def test_commands_do_not_mutate_inputs_and_are_repeatable(tmp_path, pipeline):
    before = digest(pipeline / "data"), digest(pipeline / "s1"), digest(pipeline / "s2")
    for k in range(2):
        assert main(["render", "--scene", str(pipeline / "s1" / "scene.ply"), "--cma",
                     str(pipeline / "s2" / "cma.bin"), "--data", str(pipeline / "data"),
                     "--out", str(tmp_path / f"r{k}")]) == 0
    assert digest(tmp_path / "r0") == digest(tmp_path / "r1")
    assert (digest(pipeline / "data"), digest(pipeline / "s1"), digest(pipeline / "s2")) == before


def test_cma_width_mismatch_exit_2(tmp_path, pipeline, capsys):
    # Ground truth has degree-1 SH; a degree-0 scene has a different network input width.
    assert main(["synth", "--out", str(tmp_path / "d0"), "--views", "2", "--gaussians", "4", "--width", "16",
                 "--height", "16", "--sh-degree", "0", "--test-every", "0", "--save-ground-truth"]) == 0
    code = main(["render", "--scene", str(tmp_path / "d0" / "ground_truth.ply"), "--cma",
                 str(pipeline / "s2" / "cma.bin"), "--data", str(tmp_path / "d0"), "--split", "all",
                 "--out", str(tmp_path / "r")])
    assert code == 2
    assert "d_c" in capsys.readouterr().err


def test_usage_errors(tmp_path, pipeline):
    scene = str(pipeline / "s1" / "scene.ply")
    assert main(["render", "--scene", scene, "--data", str(pipeline / "data"), "--out", str(tmp_path)]) == 2
    assert main(["render", "--scene", scene, "--data", str(pipeline / "data"), "--tau-override", "2",
                 "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["train-stage1", "--data", "x", "--out", "y", "--no-such-flag"])
    assert exc.value.code == 2


def test_corrupt_scene_exit_2(tmp_path, pipeline):
    bad = tmp_path / "bad.ply"
    bad.write_bytes((pipeline / "s1" / "scene.ply").read_bytes()[:-5])
    assert main(["render", "--scene", str(bad), "--data", str(pipeline / "data"), "--modality", "visible",
                 "--out", str(tmp_path / "r")]) == 2
