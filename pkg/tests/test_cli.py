"""Command-line wiring: exit codes, file outputs, config file handling."""

import json
import subprocess
import sys

import numpy as np
import pytest

from relvae.cli import main
from relvae.dataio import load_scenes


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "relvae" in capsys.readouterr().out


def test_unknown_subcommand_exits_one(capsys):
    assert main(["frobnicate"]) == 1
    assert "error" in capsys.readouterr().err


def test_no_subcommand_exits_one(capsys):
    assert main([]) == 1


def test_missing_required_flag_exits_one(capsys):
    assert main(["gen-data"]) == 1
    assert "--out" in capsys.readouterr().err


def test_missing_input_file_is_runtime_error(tmp_path, capsys):
    code = main(["pretrain", "--scenes", str(tmp_path / "none.jsonl"),
                 "--embeddings", str(tmp_path / "none.tsv"),
                 "--out", str(tmp_path / "m.rvck")])
    assert code == 2


def test_console_script_help_runs():
    proc = subprocess.run([sys.executable, "-m", "relvae.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0


def test_gen_data_deterministic_bytes(tmp_path):
    for sub in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / sub), "--seed", "3",
                     "--n-scenes", "6"]) == 0
    assert (tmp_path / "a" / "scenes.jsonl").read_bytes() == \
        (tmp_path / "b" / "scenes.jsonl").read_bytes()
    assert (tmp_path / "a" / "embeddings.tsv").read_bytes() == \
        (tmp_path / "b" / "embeddings.tsv").read_bytes()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> pretrain -> fewshot -> eval, all through the CLI."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    assert main(["gen-data", "--out", str(root), "--seed", "1", "--n-scenes", "8"]) == 0
    scenes = str(root / "scenes.jsonl")
    emb = str(root / "embeddings.tsv")
    ckpt = str(root / "model.rvck")
    assert main(["pretrain", "--scenes", scenes, "--embeddings", emb, "--out", ckpt,
                 "--steps", "4", "--batch-size", "8", "--seed", "1"]) == 0
    from relvae.dataio import build_fewshot_split, save_split

    split = build_fewshot_split(load_scenes(scenes), k=2, seed=1)
    save_split(split, root / "split.json")
    assert main(["fewshot", "--ckpt", ckpt, "--scenes", scenes, "--embeddings", emb,
                 "--split", str(root / "split.json"), "--head", "ffn",
                 "--head-steps", "30", "--out", str(root / "preds.jsonl"),
                 "--save-head", str(root / "head.rvhd")]) == 0
    return root, scenes, emb, ckpt


def test_pipeline_outputs(pipeline):
    root, scenes, emb, ckpt = pipeline
    assert (root / "model.loss.csv").exists()
    rows = [json.loads(l) for l in (root / "preds.jsonl").read_text().splitlines()]
    assert rows and set(rows[0]) == {"image_id", "subject_id", "object_id", "scores"}
    n_pairs = len({(s.image_id, r.subject_id, r.object_id)
                   for s in load_scenes(scenes) for r in s.relations})
    assert len(rows) == n_pairs


def test_eval_command(pipeline, tmp_path):
    root, scenes, emb, ckpt = pipeline
    out = tmp_path / "report.json"
    assert main(["eval", "--ckpt", ckpt, "--head", str(root / "head.rvhd"),
                 "--scenes", scenes, "--embeddings", emb, "--k", "50",
                 "--rare-n", "3", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert {"recall_at_k", "k", "n_gt", "per_predicate", "accuracy", "rare"} <= set(report)
    assert 0.0 <= report["recall_at_k"] <= 1.0


def test_inspect_chain(pipeline, tmp_path):
    root, scenes, emb, ckpt = pipeline
    latents = tmp_path / "latents.csv"
    assert main(["inspect", "export-latents", "--ckpt", ckpt, "--scenes", scenes,
                 "--embeddings", emb, "--out", str(latents)]) == 0
    points = tmp_path / "points.tsv"
    assert main(["inspect", "project", "--latents", str(latents), "--method", "pca",
                 "--out", str(points)]) == 0
    assert len(points.read_text().splitlines()) == len(latents.read_text().splitlines()) - 1

    loaded = load_scenes(scenes)
    with_rel = [s for s in loaded if s.relations]
    src, tgt = with_rel[0], with_rel[1]
    rel = src.relations[0]
    assert main(["inspect", "cross-recon", "--ckpt", ckpt, "--scenes", scenes,
                 "--embeddings", emb, "--source-image", src.image_id,
                 "--subject", str(rel.subject_id), "--object", str(rel.object_id),
                 "--target-image", tgt.image_id, "--out-dir", str(tmp_path / "ov"),
                 "--overlay-id", "t1"]) == 0
    assert (tmp_path / "ov" / "t1_subj.png").exists()
    assert (tmp_path / "ov" / "t1_obj.png").exists()

    probe = tmp_path / "probe.json"
    assert main(["inspect", "perturb", "--ckpt", ckpt, "--scenes", scenes,
                 "--embeddings", emb, "--image", src.image_id,
                 "--subject", str(rel.subject_id), "--object", str(rel.object_id),
                 "--override", "0,0,16,16", "--out", str(probe)]) == 0
    data = json.loads(probe.read_text())
    assert "object_mass_in_override_box" in data


def test_config_file_defaults_and_override(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[gen-data]\nn-scenes = 5\nseed = 9\n")
    assert main(["--config", str(cfg), "gen-data", "--out", str(tmp_path / "d1")]) == 0
    assert len(load_scenes(tmp_path / "d1" / "scenes.jsonl")) == 5
    # explicit flag beats the file value
    assert main(["--config", str(cfg), "gen-data", "--out", str(tmp_path / "d2"),
                 "--n-scenes", "3"]) == 0
    assert len(load_scenes(tmp_path / "d2" / "scenes.jsonl")) == 3


def test_config_file_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[gen-data]\nbogus-knob = 1\n")
    assert main(["--config", str(cfg), "gen-data", "--out", str(tmp_path / "x")]) == 1
    assert "bogus-knob" in capsys.readouterr().err


def test_jobs_flag_only_supports_one(tmp_path, capsys):
    assert main(["reproduce-synthetic", "--out", str(tmp_path), "--jobs", "2"]) == 1
