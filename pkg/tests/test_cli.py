import json

import numpy as np
import pytest

from starvqa.cli import main

TINY = {"n_frames": 2, "crop": 8, "patch": 4, "embed_dim": 16, "heads": 2, "blocks": 1, "batch": 4}


def test_encode_mos_prints_vector(capsys):
    assert main(["encode-mos", "--mos", "2", "--anchors", "6", "--lo", "0", "--hi", "5"]) == 0
    y = np.array([float(v) for v in capsys.readouterr().out.split()])
    assert y.shape == (6,) and int(np.argmax(y)) == 2
    assert y.sum() == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("argv", [["bogus"], ["encode-mos", "--nope"], []])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_error_is_one_line(tmp_path, capsys):
    assert main(["infer", "--checkpoint", str(tmp_path / "missing"), "--video", "x"]) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("starvqa infer:")


def test_bad_config_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"widht": 3}')
    assert main(["flops", "--config", str(tmp_path / "c.json")]) == 1
    assert "widht" in capsys.readouterr().err


def test_flops_default_and_image(capsys):
    assert main(["flops"]) == 0
    video = int(capsys.readouterr().out)
    assert main(["flops", "--mode", "image"]) == 0
    assert int(capsys.readouterr().out) < video


def test_grad_check_ops_only(capsys):
    assert main(["grad-check", "--ops-only"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["--seed", "4", "make-synth", "--out", str(data), "--count", "6", "--frames", "3", "--size", "12"]) == 0
    man = str(data / "manifest.json")
    img, vid = str(tmp_path / "img.svqc"), str(tmp_path / "vid.svqc")
    assert main(["--seed", "4", "train", "--manifest", man, "--config", str(cfg), "--mode", "image",
                 "--epochs", "1", "--out", img]) == 0
    assert main(["--seed", "4", "train", "--manifest", man, "--config", str(cfg), "--init", img,
                 "--epochs", "2", "--out", vid]) == 0
    assert (tmp_path / "vid.csv").read_text().startswith("epoch,lr,mean_loss,train_srocc,train_plcc\n")
    capsys.readouterr()
    assert main(["eval", "--manifest", man, "--checkpoint", vid]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "dataset,split,srocc,plcc,n" and len(lines) == 3
    assert main(["infer", "--checkpoint", vid, "--video", str(data / "synth_000.svqv"),
                 "--dataset", "synth", "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 1.0 <= out["score"] <= 5.0 and len(out["crop_scores"]) == 3
    # identical argv and seed give identical checkpoints
    again = str(tmp_path / "vid2.svqc")
    assert main(["--seed", "4", "train", "--manifest", man, "--config", str(cfg), "--init", img,
                 "--epochs", "2", "--out", again]) == 0
    assert open(vid, "rb").read() == open(again, "rb").read()


def test_image_checkpoint_evaluates(tmp_path):
    data = tmp_path / "data"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    main(["make-synth", "--out", str(data), "--count", "5", "--frames", "2", "--size", "8"])
    img = str(tmp_path / "img.svqc")
    assert main(["train", "--manifest", str(data / "manifest.json"), "--config", str(cfg),
                 "--mode", "image", "--epochs", "1", "--out", img]) == 0
    assert main(["eval", "--manifest", str(data / "manifest.json"), "--checkpoint", img]) == 0
