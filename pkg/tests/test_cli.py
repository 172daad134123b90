import json
from pathlib import Path

import pytest

from flowguide import formats
from flowguide.cli import main
from flowguide.sampler import montage
from flowguide.toy_world import get_codec, load_dataset

FAST = ["--steps", "8", "--t-opt", "2", "--k-opt", "2"]


def _tree(directory: Path) -> dict:
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out)]) == 0
    return out


def test_gen_data_is_reproducible(data_dir, tmp_path):
    ds = load_dataset(data_dir)
    assert len(ds) == 8 and sorted(ds.classes) == [0, 1]
    assert main(["gen-data", "--out", str(tmp_path / "again")]) == 0
    assert _tree(tmp_path / "again") == _tree(data_dir)


@pytest.mark.parametrize("argv", [["--size", "4"], ["--classes", "hexagon"], ["--motions", "999"],
                                  ["--frames", "1"]])
def test_gen_data_rejects_bad_input(tmp_path, argv):
    assert main(["gen-data", "--out", str(tmp_path / "d"), *argv]) == 2


def test_unguided_transfer_matches_sample(data_dir, tmp_path):
    assert main(["sample", "--data", str(data_dir), "--target-class", "1", "--out", str(tmp_path / "s"),
                 "--steps", "8"]) == 0
    assert main(["transfer", "--data", str(data_dir), "--source-index", "0", "--target-class", "1",
                 "--out", str(tmp_path / "t"), "--steps", "8", "--t-opt", "0"]) == 0
    for name in ("latent.fmlt", "video.fmlt"):
        assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "t" / name).read_bytes()


def test_transfer_report_and_evals(data_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["transfer", "--data", str(data_dir), "--source-index", "2", "--target-class", "1",
                 "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["evals"] == {"target": 160, "source": 10, "vjp": 0}
    rows = formats.read_csv(out / "report.csv")
    assert len(rows) == 10 * 3
    assert (out / "report.csv").read_bytes().count(b"\r\n") == 31
    assert len(list((out / "frames").glob("*.pgm"))) == 8


def test_clean_latent_skips_source_evals(data_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["transfer", "--data", str(data_dir), "--source-index", "2", "--target-class", "1",
                 "--out", str(out), "--source-rep", "clean-latent", *FAST]) == 0
    assert json.loads((out / "manifest.json").read_text())["evals"]["source"] == 0


def test_transfer_validation(data_dir, tmp_path):
    base = ["transfer", "--data", str(data_dir), "--out", str(tmp_path / "x")]
    assert main(base + ["--source-index", "99", "--target-class", "1"]) == 2
    assert main(base + ["--source-index", "0", "--target-class", "7"]) == 2
    assert main(base + ["--source-index", "0", "--target-class", "1", "--steps", "4", "--t-opt", "5"]) == 2
    assert main(base + ["--source-index", "0"]) == 2
    assert main(base + ["--source-index", "0", "--target-class", "1", "--alpha-beta", "4"]) == 2


def test_rerun_from_manifest(data_dir, tmp_path):
    first = tmp_path / "first"
    assert main(["transfer", "--data", str(data_dir), "--source-index", "5", "--target-class", "0",
                 "--out", str(first), "--seed", "4", "--lr", "0.02", "--gamma", "0.3", *FAST]) == 0
    again = tmp_path / "again"
    assert main(["transfer", "--from-manifest", str(first / "manifest.json"), "--out", str(again)]) == 0
    assert _tree(first) == _tree(again)


def test_inspect_trace(data_dir, tmp_path):
    run = tmp_path / "run"
    assert main(["transfer", "--data", str(data_dir), "--source-index", "0", "--target-class", "1",
                 "--out", str(run), *FAST]) == 0
    assert main(["inspect-trace", str(run)]) == 0
    trace = json.loads((run / "trace" / "trace.json").read_text())
    montages = sorted((run / "inspect").glob("step_*.pgm"))
    assert len(montages) == len(trace["records"]) == 9
    assert main(["inspect-trace", str(tmp_path / "nowhere")]) == 2


def test_inspect_trace_shows_the_item_for_one_item_data(tmp_path):
    data = tmp_path / "one"
    assert main(["gen-data", "--out", str(data), "--classes", "disk", "--motions", "1"]) == 0
    run = tmp_path / "run"
    assert main(["sample", "--data", str(data), "--target-class", "0", "--out", str(run), "--steps", "4"]) == 0
    assert main(["inspect-trace", str(run)]) == 0
    ds = load_dataset(data)
    # with one item every clean-latent prediction is the item itself
    expected = formats.pgm_bytes(montage(get_codec(ds.codec).decode(ds.latents[0])))
    steps = sorted((run / "inspect").glob("step_*.pgm"))
    assert len(steps) == 5
    assert all(p.read_bytes() == expected for p in steps)


def test_corrupted_fmlt_is_rejected(data_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["transfer", "--data", str(data_dir), "--source-index", "0", "--target-class", "1",
                 "--out", str(run), *FAST]) == 0
    bad = tmp_path / "bad.fmlt"
    bad.write_bytes(b"XXXX" + (run / "video.fmlt").read_bytes()[4:])
    assert main(["metrics", "--source", str(bad), "--generated", str(run / "video.fmlt"),
                 "--target-shape", "square"]) == 2
    assert "bad magic" in capsys.readouterr().err


def test_metrics_subcommand(data_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["transfer", "--data", str(data_dir), "--source-index", "0", "--target-class", "1",
                 "--out", str(run), *FAST]) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    source = tmp_path / "source.fmlt"
    ds = load_dataset(data_dir)
    formats.save_fmlt(source, get_codec(ds.codec).decode(ds.latents[0]))
    capsys.readouterr()
    assert main(["metrics", "--source", str(source), "--generated", str(run / "frames"),
                 "--target-shape", "square"]) == 0
    printed = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    # PGM frames are 8-bit, so scores agree with the run's own metrics only to quantization
    assert float(printed["motion_fidelity"]) == pytest.approx(manifest["metrics"]["motion_fidelity"], abs=0.05)
    csv_path = tmp_path / "scores.csv"
    for _ in range(2):
        assert main(["metrics", "--source", str(source), "--generated", str(run / "video.fmlt"),
                     "--target-shape", "square", "--out", str(csv_path)]) == 0
    rows = formats.read_csv(csv_path)
    assert len(rows) == 2
    assert float(rows[0]["motion_fidelity"]) == pytest.approx(manifest["metrics"]["motion_fidelity"], abs=1e-6)


def test_ablate_writes_fresh_sweeps(tmp_path):
    argv = ["ablate", "--out", str(tmp_path), "--grid-gamma", "0", "0.1", "0.3", "0.5", "1",
            "--jobs", "easy", "--seeds", "1", "--steps", "6", "--t-opt", "2", "--k-opt", "1"]
    assert main(argv) == 0
    assert main(argv) == 0
    sweeps = sorted(p for p in tmp_path.glob("ablation_*.csv") if "_agg" not in p.name)
    assert len(sweeps) == 2
    for path in sweeps:
        rows = formats.read_csv(path)
        assert len(rows) == 5 * 4 * 1 * 2
        assert all(r["status"] == "ok" for r in rows)
    assert len(list(tmp_path.glob("ablation_*_agg*.csv"))) == 2


def test_ablate_empty_grid(tmp_path):
    assert main(["ablate", "--out", str(tmp_path)]) == 2
    assert main(["ablate", "--out", str(tmp_path), "--grid-gamma"]) == 2
    assert not list(tmp_path.glob("*.csv"))


def test_help_mentions_defaults(capsys):
    assert main(["transfer", "--help"]) == 0
    text = capsys.readouterr().out
    assert "published default 10" in text and "published default 0.003" in text
