"""End-to-end exercise of every CLI subcommand on a miniature corpus."""

import json

import pytest

from vlpt.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    out = root / "run"
    assert (
        main(
            [
                "gen-data", "--out", str(data), "--seed", "3",
                "--pairs", "6", "--images", "8", "--texts", "12", "--vocab-size", "330",
            ]
        )
        == 0
    )
    return root, data, out


def test_gen_data_outputs(workspace):
    _, data, _ = workspace
    for name in ("pairs.jsonl", "images.jsonl", "texts.txt", "vocab.txt"):
        assert (data / name).exists()


def test_index_and_augment(workspace, capsys):
    _, data, _ = workspace
    assert main(["index", "--data", str(data), "--seed", "3"]) == 0
    assert (data / "image.idx").exists() and (data / "text.idx").exists()
    assert (
        main(
            [
                "augment", "--data", str(data), "--seed", "3",
                "--positives", "2", "--negatives", "3",
                "--retrieved-images", "2", "--retrieved-texts", "2",
                "--text-filter-k", "40", "--text-rerank-k", "6",
            ]
        )
        == 0
    )
    assert (data / "groups.jsonl").exists()
    capsys.readouterr()


def test_train_probe_export(workspace, capsys):
    root, data, out = workspace
    cfg = root / "cfg.json"
    cfg.write_text(
        json.dumps(
            {
                "model": {"n_layers": 1, "hidden": 32, "ffn": 32, "heads": 4,
                          "max_text": 28, "dropout": 0.0, "attn_dropout": 0.0},
                "train": {"max_steps": 6, "warmup_steps": 1, "batch_size": 2,
                          "peak_lr": 1e-4, "ratio": [1, 1, 2]},
            }
        )
    )
    assert (
        main(
            [
                "train", "--data", str(data), "--seed", "3", "--out", str(out),
                "--config", str(cfg),
            ]
        )
        == 0
    )
    captured = capsys.readouterr()
    lines = [json.loads(l) for l in captured.out.strip().splitlines() if l.startswith("{")]
    assert len(lines) == 6
    assert all(
        abs(r["total"] - (r["v_loss"] + r["l_loss"] + r["cmcl_loss"])) < 1e-6 for r in lines
    )
    assert (out / "model.ckpt").exists()
    assert (out / "train_log.jsonl").exists()

    # flag overrides beat the config file
    assert (
        main(
            [
                "train", "--data", str(data), "--seed", "3", "--out", str(root / "run2"),
                "--config", str(cfg), "--max_steps", "2",
            ]
        )
        == 0
    )
    lines2 = [
        json.loads(l)
        for l in capsys.readouterr().out.strip().splitlines()
        if l.startswith("{")
    ]
    assert len(lines2) == 2

    assert (
        main(
            [
                "probe", "--checkpoint", str(out / "model.ckpt"), "--data", str(data),
                "--k", "1,3", "--generate", "2", "--seed", "3",
            ]
        )
        == 0
    )
    report = json.loads(capsys.readouterr().out)
    assert set(report["text_to_image"]) == {"1", "3"} or set(report["text_to_image"]) == {1, 3}
    assert "generation_token_accuracy" in report

    assert main(["export", "--checkpoint", str(out / "model.ckpt")]) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest["step"] == 6
    assert manifest["parameter_count"] > 0
    assert any(k.startswith("p/") for k in manifest["arrays"])


def test_resume_from_checkpoint(workspace, capsys):
    root, data, out = workspace
    resumed_out = root / "resumed"
    assert (
        main(
            [
                "train", "--data", str(data), "--seed", "3", "--out", str(resumed_out),
                "--resume", str(out / "model.ckpt"),
            ]
        )
        == 0
    )
    # picked up at step 6 and ran to max_steps from the stored train config
    lines = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines() if l.startswith("{")]
    assert lines == [] or lines[0]["step"] == 6


def test_seed_is_mandatory_for_train(workspace):
    _, data, _ = workspace
    with pytest.raises(SystemExit):
        main(["train", "--data", str(data), "--out", "/tmp/x"])
