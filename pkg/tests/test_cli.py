import subprocess
import sys

import pytest

from compinv import images
from compinv.cli import run_command
from compinv.inversion import InversionResult, PipelineConfig
from compinv.toygen import DatasetConfig, PretrainConfig

from conftest import tiny_generator

FAST = PipelineConfig(stage_a_epochs=1, stage_b_epochs=1, stage_c_epochs=1, ood_resolution=8, ood_channels=4,
                      phi_dim=8, ood_hidden=(8,), sr_hidden=4, reg_delay=0)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "ds.txt").write_text(DatasetConfig(n_frames=2, resolution=10, n_samples=12).dump())
    (root / "inv.txt").write_text(FAST.dump())
    tiny_generator().save(root / "gen.ckpt")
    assert run_command(["gen-dataset", "--out", str(root / "ds"), "--config", str(root / "ds.txt")]) == 0
    assert run_command(["invert", "--dataset", str(root / "ds"), "--gen", str(root / "gen.ckpt"),
                        "--config", str(root / "inv.txt"), "--out", str(root / "inv.ckpt")]) == 0
    return root


def scene(work, *extra):
    return ["--dataset", str(work / "ds"), "--inv", str(work / "inv.ckpt"), *extra]


def test_usage_errors_exit_2(capsys):
    assert run_command([]) == 2
    assert run_command(["invert", "--dataset", "x"]) == 2
    assert run_command(["frobnicate"]) == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    code = run_command(["invert", "--dataset", str(tmp_path / "missing"), "--gen", str(tmp_path / "g.ckpt"),
                        "--out", str(tmp_path / "o.ckpt")])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")


def test_main_exit_code_subprocess(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "compinv.cli", "eval", "--dataset", str(tmp_path),
                           "--inv", str(tmp_path / "none.ckpt"), "--report", str(tmp_path / "r.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr.startswith("error: ")


def test_invert_writes_checkpoint_and_manifest(work):
    res = InversionResult.load(work / "inv.ckpt")
    assert res.stage == "C" and res.upsampler is not None
    manifest = (work / "inv.ckpt.manifest.txt").read_text()
    assert "stage = C" in manifest and "dataset = " in manifest


def test_resume_runs_remaining_stages(work):
    out_a = work / "a.ckpt"
    args = ["invert", "--dataset", str(work / "ds"), "--gen", str(work / "gen.ckpt"), "--config", str(work / "inv.txt")]
    assert run_command([*args, "--stage", "A", "--out", str(out_a)]) == 0
    assert InversionResult.load(out_a).stage == "A"
    assert run_command(["invert", "--dataset", str(work / "ds"), "--resume", str(out_a),
                        "--out", str(work / "resumed.ckpt")]) == 0
    assert InversionResult.load(work / "resumed.ckpt").stage == "C"


def test_invert_is_deterministic(work):
    args = ["invert", "--dataset", str(work / "ds"), "--gen", str(work / "gen.ckpt"), "--config", str(work / "inv.txt")]
    assert run_command([*args, "--out", str(work / "again.ckpt")]) == 0
    assert (work / "again.ckpt").read_bytes() == (work / "inv.ckpt").read_bytes()


def test_eval_report(work, capsys):
    before = (work / "inv.ckpt").read_bytes()
    assert run_command(["eval", *scene(work, "--report", str(work / "r.csv"))]) == 0
    lines = (work / "r.csv").read_text().splitlines()
    assert lines[0] == "frame,psnr,ssim,l2,psnr_masked,psnr_unmasked"
    assert len(lines) == 3
    assert (work / "inv.ckpt").read_bytes() == before


@pytest.mark.parametrize("cmd,extra,shape", [
    ("render", [], (10, 10, 3)),
    ("render", ["--hr"], (20, 20, 3)),
    ("remove-ood", ["--frame", "1"], (10, 10, 3)),
    ("edit", ["--direction", "radius", "--strength", "1"], (10, 10, 3)),
    ("novel-view", ["--yaw", "10", "--low-res"], (10, 10, 3)),
    ("novel-view", ["--yaw", "10"], (20, 20, 3)),
])
def test_image_commands(work, cmd, extra, shape):
    out = work / f"{cmd}{len(extra)}.ppm"
    assert run_command([cmd, *scene(work, *extra, "--out", str(out))]) == 0
    assert images.read_pnm(out).shape == shape


def test_edit_unknown_direction(work, capsys):
    assert run_command(["edit", *scene(work, "--direction", "smile", "--out", str(work / "x.ppm"))]) == 1
    assert "available" in capsys.readouterr().err


def test_edit_registry_round_trip(work):
    reg = work / "dirs.txt"
    a, b = work / "e1.ppm", work / "e2.ppm"
    assert run_command(["edit", *scene(work, "--direction", "color", "--write-registry", str(reg), "--out", str(a))]) == 0
    assert run_command(["edit", *scene(work, "--direction", "color", "--registry", str(reg), "--out", str(b))]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_frame_out_of_range(work):
    assert run_command(["render", *scene(work, "--frame", "5", "--out", str(work / "x.ppm"))]) == 1


def test_pretrain_deterministic(tmp_path):
    cfg = PretrainConfig(resolution=8, channels=4, n_basis=4, coeff_hidden=8, decoder_hidden=(8, 8), point_iters=3,
                         render_iters=1, render_resolution=8, points_per_latent=32, batch_latents=2, n_samples=8)
    (tmp_path / "p.txt").write_text(cfg.dump())
    for name in ("a", "b"):
        assert run_command(["pretrain", "--config", str(tmp_path / "p.txt"), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_grad_check(work, capsys):
    assert run_command(["grad-check", "--gen", str(work / "gen.ckpt"), "--probes", "20", "--resolution", "4"]) == 0
    out = capsys.readouterr().out
    assert "max_rel_err" in out
