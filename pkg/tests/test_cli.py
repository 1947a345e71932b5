import hashlib
import os

import numpy as np
import pytest
import torch
from PIL import Image

from bionet.cli import load_bundle, main, overlay
from bionet.metrics import evaluate_dataset
from bionet.networks import NetworkConfig, build_bio_net, save_checkpoint
from bionet.phantom import read_dataset
from bionet.training import TrainConfig, evaluate_model


def tree_hashes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = hashlib.sha256(open(p, "rb").read()).hexdigest()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["phantom", "--out", str(data), "--train", "4", "--test", "2",
                 "--height", "64", "--width", "32", "--seed", "7"]) == 0
    cfg = root / "tiny.txt"
    TrainConfig(epochs=1, batch_size=2, base_width=4, depth=2, bio_head_width=8).save(cfg)
    assert main(["train-bio", "--data", str(data), "--config", str(cfg), "--out", str(root / "bio.pt")]) == 0
    assert main(["train", "--data", str(data), "--config", str(cfg), "--bio", str(root / "bio.pt"),
                 "--mode", "bionet", "--out", str(root / "bionet")]) == 0
    assert main(["train", "--data", str(data), "--config", str(cfg), "--mode", "unet",
                 "--out", str(root / "unet")]) == 0
    return root


def test_phantom_command(workspace, tmp_path):
    ds = read_dataset(workspace / "data")
    assert len(ds) == 6
    assert len(read_dataset(workspace / "data", "train")) == 4
    assert main(["phantom", "--out", str(tmp_path / "again"), "--train", "4", "--test", "2",
                 "--height", "64", "--width", "32", "--seed", "7"]) == 0
    assert tree_hashes(workspace / "data") == tree_hashes(tmp_path / "again")


def test_phantom_rejects_small_height(tmp_path, capsys):
    assert main(["phantom", "--out", str(tmp_path / "x"), "--height", "15"]) != 0
    assert "height >= 16" in capsys.readouterr().err


def test_training_outputs(workspace):
    for name in ("bio.pt", "bio_log.tsv", "bio_log.json"):
        assert (workspace / name).exists()
    for f in ("u_g.pt", "u_c.pt", "model.json", "trainlog.tsv", "trainlog.json", "config.txt", "metrics.json"):
        assert (workspace / "bionet" / f).exists()
    assert not (workspace / "unet" / "u_g.pt").exists()


def test_bionet_requires_bio(workspace, tmp_path, capsys):
    code = main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.txt"),
                 "--mode", "bionet", "--out", str(tmp_path / "x")])
    assert code != 0
    assert "--bio" in capsys.readouterr().err


def test_unfrozen_checkpoint_rejected(workspace, tmp_path, capsys):
    net = build_bio_net(NetworkConfig(1, 1, base_width=4, depth=2, bio_head_width=8))
    save_checkpoint(net, tmp_path / "loose.pt", stage="bio", kind="bio")
    code = main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.txt"),
                 "--bio", str(tmp_path / "loose.pt"), "--mode", "bionet", "--out", str(tmp_path / "x")])
    assert code != 0
    assert "not frozen" in capsys.readouterr().err


def test_missing_data_reported(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nope"), "--mode", "unet", "--out", str(tmp_path / "x")])
    assert code != 0
    assert "not found" in capsys.readouterr().err


def test_eval_oracle_row(workspace, capsys):
    assert main(["eval", "--data", str(workspace / "data")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split("\t")[1:] == ["IOU", "AUSDE", "DI", "Acc", "Sen"]
    assert out[1].split("\t")[1:] == ["100.00", "0.00", "100.00", "100.00", "100.00"]
    assert out[2].startswith("units:")


def test_predict_then_eval_matches_in_memory(workspace, tmp_path, capsys):
    masks = tmp_path / "masks"
    assert main(["predict", "--data", str(workspace / "data"), "--model", str(workspace / "bionet"),
                 "--out", str(masks)]) == 0
    capsys.readouterr()
    assert main(["eval", "--data", str(workspace / "data"), "--masks", str(masks)]) == 0
    from_files = capsys.readouterr().out.splitlines()[1].split("\t")[1:]
    assert main(["eval", "--data", str(workspace / "data"), "--model", str(workspace / "bionet")]) == 0
    in_memory = capsys.readouterr().out.splitlines()[1].split("\t")[1:]
    assert from_files == in_memory
    test = list(read_dataset(workspace / "data", "test"))
    preds = [np.array(Image.open(masks / f"{s.id}.png")) // 255 for s in test]
    direct = evaluate_model(load_bundle(workspace / "bionet"), test)
    assert evaluate_dataset(preds, [s.choroid for s in test]) == direct


def test_eval_reports_missing_mask(workspace, tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["eval", "--data", str(workspace / "data"), "--masks", str(tmp_path / "empty")]) != 0
    assert "predicted mask missing" in capsys.readouterr().err


def test_report_table_and_artifacts(workspace, tmp_path, capsys):
    out = tmp_path / "report"
    assert main(["report", "--data", str(workspace / "data"), "--runs", str(workspace / "unet"),
                 str(workspace / "bionet"), "--out", str(out), "--n-overlays", "1"]) == 0
    lines = (out / "table.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["Method", "IOU", "AUSDE", "DI", "Acc", "Sen"]
    assert [l.split("\t")[0] for l in lines[1:]] == ["unet", "bionet"]
    assert (out / "loss_curves.png").exists()
    overlays = sorted(p.name for p in (out / "overlays").iterdir())
    assert len(overlays) == 3 and any(n.endswith("_gt.png") for n in overlays)


def test_overlay_tints_only_mask():
    img = np.full((4, 4), 0.5)
    mask = np.zeros((4, 4), np.uint8)
    mask[1, 1] = 1
    rgb = overlay(img, mask)
    assert rgb.shape == (4, 4, 3) and rgb.dtype == np.uint8
    assert tuple(rgb[0, 0]) == (128, 128, 128)
    assert tuple(rgb[1, 1]) != (128, 128, 128)


def test_cli_runs_are_deterministic(workspace, tmp_path):
    cfg = workspace / "tiny.txt"
    for name in ("a", "b"):
        assert main(["train", "--data", str(workspace / "data"), "--config", str(cfg), "--mode", "unet",
                     "--out", str(tmp_path / name), "--seed", "3"]) == 0
    a = (tmp_path / "a" / "metrics.json").read_text()
    b = (tmp_path / "b" / "metrics.json").read_text()
    assert a == b
    ua = torch.load(tmp_path / "a" / "u_c.pt", weights_only=False)["digest"]
    ub = torch.load(tmp_path / "b" / "u_c.pt", weights_only=False)["digest"]
    assert ua == ub
