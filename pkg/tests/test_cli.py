import filecmp
import subprocess
import sys

import numpy as np
import pytest

from denoisegan.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY, main
from denoisegan.config import load_config
from denoisegan.data import read_image, read_pgm

TINY_FLAGS = ["--set", "image_size=16", "--set", "jitter_size=18", "--set", "base_width=4", "--set",
              "disc_base_width=4", "--set", "num_res_blocks=1", "--set", "disc_layers=2", "--set",
              "cascade_widths=4,4,8,8,8"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synthesize-dataset", "--count", "3", "--heldout", "2", "--size", "16", "--out",
                 str(root / "data")]) == EXIT_OK
    assert main(["train", "--out", str(root / "run"), "--epochs", "1", "--no-plot", "--train-manifest",
                 str(root / "data" / "manifest.tsv"), "--heldout-manifest", str(root / "data" / "heldout.tsv")]
                + TINY_FLAGS) == EXIT_OK
    return root


def dirs_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    same, diff, err = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not diff and not err and all(dirs_equal(a / d, b / d) for d in cmp.common_dirs)


def test_synthesize_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synthesize-dataset", "--count", "4", "--size", "16", "--out", str(tmp_path / name)]) == 0
    assert dirs_equal(tmp_path / "a", tmp_path / "b")
    assert (tmp_path / "a" / "dataset.cfg").exists()


def test_synthesize_count_zero(tmp_path):
    assert main(["synthesize-dataset", "--count", "0", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "manifest.tsv").read_text() == "layout_path\ttarget_path\tseed\n"


def test_synthesize_desk_corpus_speed(tmp_path):
    import time

    t0 = time.perf_counter()
    assert main(["synthesize-dataset", "--count", "200", "--size", "64", "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - t0 < 60


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["synthesize-dataset", "--size", "30", "--out", str(tmp_path)]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == EXIT_USAGE
    assert main(["gradcheck", "--op", "nope"]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == EXIT_USAGE


def test_config_error_names_line(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("epochs = 1\nlearning_rate = 0.1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "bad.cfg:2: unknown key 'learning_rate'" in capsys.readouterr().err


def test_runtime_error_exit_2(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--epochs", "0"]) == EXIT_RUNTIME
    assert "train_manifest" in capsys.readouterr().err


def test_resume_on_fresh_dir(trained, tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path / "fresh"), "--resume", "--train-manifest",
                 str(trained / "data" / "manifest.tsv")] + TINY_FLAGS)
    assert code == EXIT_RUNTIME
    assert "no checkpoint" in capsys.readouterr().err


def test_train_writes_resolved_config(trained):
    cfg = load_config(trained / "run" / "run.cfg")
    assert cfg.epochs == 1 and cfg.base_width == 4
    assert (trained / "run" / "final.dgz").exists()


def test_epochs_zero_writes_init_checkpoint(trained, tmp_path):
    assert main(["train", "--out", str(tmp_path), "--epochs", "0", "--no-plot", "--train-manifest",
                 str(trained / "data" / "manifest.tsv")] + TINY_FLAGS) == EXIT_OK
    assert (tmp_path / "final.dgz").exists() and (tmp_path / "latest.dgz").exists()


def test_infer_dims_and_noise(trained, tmp_path):
    ck = str(trained / "run" / "final.dgz")
    layouts = str(trained / "data" / "layouts")
    for name in ("a", "b"):
        assert main(["infer", "--checkpoint", ck, "--layout", layouts, "--out", str(tmp_path / name)]) == 0
    assert dirs_equal(tmp_path / "a", tmp_path / "b")
    first = sorted((trained / "data" / "layouts").glob("*.pgm"))[0]
    out = read_image(tmp_path / "a" / (first.stem + ".ppm"))
    assert out.shape[1:] == read_pgm(first).shape
    for name, seed in (("n1", "1"), ("n2", "2")):
        assert main(["infer", "--checkpoint", ck, "--layout", str(first), "--out", str(tmp_path / name),
                     "--sigma", "0.1", "--seed", seed]) == 0
    a = (tmp_path / "n1" / (first.stem + ".ppm")).read_bytes()
    b = (tmp_path / "n2" / (first.stem + ".ppm")).read_bytes()
    assert a != b
    assert load_config(tmp_path / "n1" / "run.cfg").noise_sigma == 0.1


def test_evaluate_identical_pair(trained, tmp_path, capsys):
    # score the targets against themselves
    code = main(["evaluate", "--images", str(trained / "data" / "targets"), "--manifest",
                 str(trained / "data" / "heldout.tsv"), "--out", str(tmp_path)])
    assert code == EXIT_OK
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["Method", "P-SNR", "MSE", "R-MSE", "SSIM"]
    assert table[2].split()[1:] == ["inf", "0", "0", "1"]
    rows = (tmp_path / "per_image.csv").read_text().splitlines()
    assert len(rows) == 3 and all(r.endswith(",inf,0,0,1") for r in rows[1:])
    assert (tmp_path / "psnr_hist.png").exists()


def test_evaluate_checkpoint(trained, tmp_path, capsys):
    assert main(["evaluate", "--checkpoint", str(trained / "run" / "final.dgz"), "--manifest",
                 str(trained / "data" / "heldout.tsv"), "--out", str(tmp_path), "--sigma", "0"]) == 0
    vals = [float(v) for v in capsys.readouterr().out.splitlines()[2].split()[1:]]
    # corpus rows are means of per-image values, so mean rmse <= sqrt(mean mse)
    assert np.isfinite(vals).all() and vals[2] <= vals[1] ** 0.5 + 1e-6
    assert load_config(tmp_path / "run.cfg").noise_sigma == 0


def test_evaluate_empty_manifest(trained, tmp_path):
    (tmp_path / "empty.tsv").write_text("layout_path\ttarget_path\tseed\n")
    assert main(["evaluate", "--checkpoint", str(trained / "run" / "final.dgz"), "--manifest",
                 str(tmp_path / "empty.tsv"), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert main(["evaluate", "--manifest", str(tmp_path / "empty.tsv"), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_ablate_single_grid_row(trained, tmp_path, capsys, monkeypatch):
    from denoisegan import trainer

    monkeypatch.setattr(trainer, "NAMED_ROWS", trainer.NAMED_ROWS[:2])
    code = main(["ablate", "--out", str(tmp_path), "--epochs", "1", "--no-plot", "--train-manifest",
                 str(trained / "data" / "manifest.tsv"), "--heldout-manifest",
                 str(trained / "data" / "heldout.tsv")] + TINY_FLAGS)
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in out[2:]] == ["Z0.1", "Z0.04"]


def test_gradcheck_subset_and_failure(capsys):
    assert main(["gradcheck", "--op", "tanh", "--op", "conv2d"]) == EXIT_OK
    assert "2/2 passed" in capsys.readouterr().out
    # a tolerance nobody can meet turns into a verification failure
    assert main(["gradcheck", "--op", "tanh", "--tol", "0"]) == EXIT_VERIFY


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "denoisegan.cli", "gradcheck", "--op", "relu"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "1/1 passed" in proc.stdout
