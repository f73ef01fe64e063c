import json

import pytest

from cattle_interaction._records import read_records
from cattle_interaction.cli import main, read_config
from cattle_interaction.synth_data import hash_directory


def run(tmp_path, *argv):
    return main([*argv, "--runs", str(tmp_path / "runs.jsonl")])


def manifests(tmp_path):
    return [json.loads(l) for l in (tmp_path / "runs.jsonl").read_text().splitlines()]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset and a briefly trained model shared by the tests below."""
    root = tmp_path_factory.mktemp("ws")
    runs = ["--runs", str(root / "runs.jsonl")]
    assert main(["synth", "--out", str(root / "data"), "--frames", "16", "--seed", "3", *runs]) == 0
    assert main(["pretrain", "--data", str(root / "data/train"), "--out", str(root / "pre"), "--steps", "2",
                 "--batch-size", "4", *runs]) == 0
    assert main(["train", "--data", str(root / "data/train"), "--out", str(root / "model"), "--steps", "3",
                 "--batch-size", "8", "--mode", "finetune", "--checkpoint", str(root / "pre/encoder.safetensors"),
                 *runs]) == 0
    return root


def _model(ws):
    return ["--weights", str(ws / "model/network.safetensors"), "--prior", str(ws / "model/prior.json")]


def test_synth_twice_same_hash(tmp_path):
    for name in ("a", "b"):
        assert run(tmp_path, "synth", "--out", str(tmp_path / name), "--frames", "6", "--seed", "7") == 0
    m = manifests(tmp_path)
    assert len(m) == 2 and m[0]["hashes"]["dataset"] == m[1]["hashes"]["dataset"]
    assert hash_directory(tmp_path / "a") == hash_directory(tmp_path / "b")


def test_manifest_is_append_only(tmp_path):
    run(tmp_path, "synth", "--out", str(tmp_path / "a"), "--frames", "4")
    first = (tmp_path / "runs.jsonl").read_text()
    run(tmp_path, "synth", "--out", str(tmp_path / "a"), "--frames", "4", "--seed", "1")
    text = (tmp_path / "runs.jsonl").read_text()
    assert text.startswith(first) and len(text.splitlines()) == 2
    entry = manifests(tmp_path)[1]
    assert entry["command"] == "synth" and entry["seed"] == 1 and entry["seconds"] >= 0
    assert entry["config"]["frames"] == 4


def test_linear_without_checkpoint(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run(tmp_path, "train", "--data", str(tmp_path), "--out", str(tmp_path / "m"), "--mode", "linear")
    assert exc.value.code == 2
    assert "--checkpoint" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["synth", "--out", "x", "--bogus"], []])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    assert run(tmp_path, "eval", "--data", str(tmp_path / "missing"), "--weights", "w", "--prior", "p",
               "--out", str(tmp_path / "r.json")) == 1
    assert "error" in capsys.readouterr().err


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# synthetic set\nframes = 5\ntest-fraction = 0.4\n")
    assert run(tmp_path, "synth", "--out", str(tmp_path / "d"), "--config", str(cfg)) == 0
    assert run(tmp_path, "synth", "--out", str(tmp_path / "e"), "--config", str(cfg), "--frames", "7") == 0
    m = manifests(tmp_path)
    assert m[0]["config"]["frames"] == 5 and m[0]["config"]["test_fraction"] == 0.4
    assert m[1]["config"]["frames"] == 7


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("nonsense = 1\n")
    with pytest.raises(SystemExit) as exc:
        run(tmp_path, "synth", "--out", str(tmp_path / "d"), "--config", str(cfg))
    assert exc.value.code == 2


def test_read_config(tmp_path):
    (tmp_path / "c").write_text("a-b = 1 # note\n\nc=x\n")
    assert read_config(tmp_path / "c") == {"a_b": "1", "c": "x"}


def test_infer_stride_on_ten_frame_clip(workspace, tmp_path):
    # the training split of the 16-frame set holds 12 frames; take a 10-frame clip from it
    from cattle_interaction.proposal import read_detections, write_detections

    dets = read_detections(workspace / "data/train/detections.jsonl")
    clip = dict(sorted(dets.items())[:10])
    write_detections(tmp_path / "clip.jsonl", clip)
    out = tmp_path / "inter.jsonl"
    assert run(tmp_path, "infer", "--frames", str(workspace / "data/train/frames"), "--detections",
               str(tmp_path / "clip.jsonl"), "--out", str(out), *_model(workspace)) == 0
    ids = sorted(clip)
    recs = [r for _, r in read_records(out)]
    assert [r["frame_id"] for r in recs] == [ids[0], ids[5]]
    assert manifests(tmp_path)[0]["frames_processed"] == [ids[0], ids[5]]
    for r in recs:
        for it in r["interactions"]:
            assert len(it["scores"]) == 3 and it["interaction"] in ("mounting", "fighting", "smelling")


def test_infer_empty_frame(workspace, tmp_path):
    from cattle_interaction.proposal import Detection, write_detections
    from cattle_interaction.geometry import BoundingBox

    write_detections(tmp_path / "d.jsonl", {0: [Detection(BoundingBox(0, 0, 10, 10), 0.9, 0, 0)]})
    frames = tmp_path / "frames"
    frames.mkdir()
    import shutil
    src = sorted((workspace / "data/train/frames").iterdir())[0]
    shutil.copy(src, frames / "frame_000000.png")
    out = tmp_path / "o.jsonl"
    assert run(tmp_path, "infer", "--frames", str(frames), "--detections", str(tmp_path / "d.jsonl"),
               "--out", str(out), *_model(workspace)) == 0
    assert [r for _, r in read_records(out)] == [{"frame_id": 0, "interactions": []}]


def test_infer_reports_format_errors(workspace, tmp_path, capsys):
    bad = tmp_path / "d.jsonl"
    bad.write_text('{"format_version": 1}\n{"frame_id": "x"}\n')
    assert run(tmp_path, "infer", "--frames", str(tmp_path), "--detections", str(bad),
               "--out", str(tmp_path / "o.jsonl"), *_model(workspace)) == 1
    assert "d.jsonl:2" in capsys.readouterr().err


def _outputs(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "runs.jsonl"}


@pytest.mark.filterwarnings("ignore::cattle_interaction.train_eval.FlatHeatmapWarning")
def test_every_command_is_reproducible(workspace, tmp_path):
    data = workspace / "data"
    commands = [
        ["synth", "--out", "{d}/synth", "--frames", "6", "--seed", "5"],
        ["pretrain", "--data", f"{data}/train", "--out", "{d}/pre", "--steps", "2", "--batch-size", "4"],
        ["train", "--data", f"{data}/train", "--out", "{d}/model", "--steps", "3", "--batch-size", "8"],
        ["eval", "--data", f"{data}/test", "--out", "{d}/eval.json", *_model(workspace)],
        ["infer", "--frames", f"{data}/train/frames", "--detections", f"{data}/train/detections.jsonl",
         "--out", "{d}/inter.jsonl", *_model(workspace)],
        ["viz", "--data", f"{data}/test", "--out", "{d}/viz", "--count", "2", *_model(workspace)],
        ["ablate", "--data", f"{data}/train", "--test", f"{data}/test", "--out", "{d}/abl.tsv", "--steps", "2",
         "--batch-size", "8"],
    ]
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        for cmd in commands:
            argv = [a.format(d=d) for a in cmd] + ["--seed", "11", "--threads", "1", "--runs", str(d / "runs.jsonl")]
            assert main(argv) == 0, cmd[0]
    a, b = _outputs(tmp_path / "a"), _outputs(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) > 10
    for k in a:
        assert a[k] == b[k], k
