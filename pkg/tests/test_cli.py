import json
import time

import numpy as np
import pytest

from crossmodal import io
from crossmodal.cli import CONFIG_ENV, main
from crossmodal.features import AudioClip, write_vectors, write_wav


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def wav_manifest(tmp_path):
    rng = np.random.default_rng(0)
    src = tmp_path / "src"
    src.mkdir()
    for i in range(3):
        write_wav(src / f"s{i}.wav", AudioClip(rng.uniform(-0.3, 0.3, 2 * 44_100), 44_100))
    write_vectors(src / "text.tsv", [(f"s{i}", rng.standard_normal(4)) for i in range(3)])
    lines = ["id\taudio\ttext"] + [f"s{i}\ts{i}.wav\ttext.tsv#s{i}" for i in range(3)]
    (src / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return src


def test_extract_three_wavs_and_idempotence(tmp_path, capsys, wav_manifest):
    out = tmp_path / "feat"
    code, stdout, _ = run(capsys, "extract", wav_manifest / "manifest.tsv", "--out", out)
    assert code == 0
    assert sorted(p.name for p in out.glob("*.xmf")) == ["s0.mfcc.xmf", "s1.mfcc.xmf", "s2.mfcc.xmf"]
    values, kind = io.read_features(out / "s0.mfcc.xmf")
    assert kind == "mfcc" and values.shape == (20, 44)
    index = (out / "index.tsv").read_text().splitlines()
    assert index[0] == "id\tpath\tshape\tsha256\tsource_sha256"
    assert len(index) == 4 and index[1].split("\t")[2] == "20x44"
    before = {p.name: p.stat().st_mtime_ns for p in out.iterdir()}
    code, stdout, _ = run(capsys, "extract", wav_manifest / "manifest.tsv", "--out", out)
    assert code == 0 and "0 file(s) written" in stdout
    assert {p.name: p.stat().st_mtime_ns for p in out.iterdir()} == before
    assert len(io.load_dataset(out / "manifest.tsv")) == 3


def test_extract_reports_corrupt_wav(tmp_path, capsys, wav_manifest):
    (wav_manifest / "s1.wav").write_bytes(b"RIFF garbage")
    out = tmp_path / "feat"
    code, _, err = run(capsys, "extract", wav_manifest / "manifest.tsv", "--out", out)
    assert code == 3
    assert "s1:" in err
    assert sorted(p.name for p in out.glob("*.xmf")) == ["s0.mfcc.xmf", "s2.mfcc.xmf"]


def test_config_errors_exit_before_work(tmp_path, capsys, monkeypatch):
    code, _, _ = run(capsys, "synth", "--out", tmp_path / "d", "--pairs", 40, "--latent", 2, "--text-dim", 8,
                     "--audio-dim", 8)
    assert code == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochz": 3}}))
    model = tmp_path / "m.xmm"
    code, _, err = run(capsys, "train", tmp_path / "d" / "manifest.tsv", "--out", model, "--config", bad)
    assert code == 2 and "epochz" in err
    assert not model.exists()
    monkeypatch.setenv(CONFIG_ENV, str(bad))
    code, _, _ = run(capsys, "train", tmp_path / "d" / "manifest.tsv", "--out", model)
    assert code == 2
    monkeypatch.delenv(CONFIG_ENV)
    code, _, _ = run(capsys, "train", tmp_path / "d" / "manifest.tsv", "--out", model, "--batch-size", 1)
    assert code == 2
    code, _, _ = run(capsys, "train", tmp_path / "nowhere.tsv", "--out", model)
    assert code == 3


def test_gradcheck_pass_and_corrupted(capsys):
    code, out, _ = run(capsys, "gradcheck", "--batches", 3)
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 11
    assert all(line.startswith("PASS") for line in lines)
    code, out, _ = run(capsys, "gradcheck", "--batches", 2, "--corrupt", 0.01)
    assert code == 1
    assert "FAIL" in out


def test_synth_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "synth", "--out", tmp_path / name, "--pairs", 30, "--seed", 4)[0] == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 30 + 4
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    truth = json.loads((tmp_path / "a" / "truth.json").read_text())
    assert len(truth["population_correlations"]) == 3
    splits = [r.split for r in io.read_manifest(tmp_path / "a" / "manifest.tsv")]
    assert splits.count("train") == 24 and splits.count("test") == 6


def test_train_eval_round_trip(tmp_path, capsys):
    data = tmp_path / "d"
    assert run(capsys, "synth", "--out", data, "--pairs", 120, "--latent", 3, "--audio-dim", 16,
               "--text-dim", 20, "--seed", 1)[0] == 0
    model = tmp_path / "m.xmm"
    argv = ["train", data / "manifest.tsv", "--out", model, "--variant", "feature-dcca", "--epochs", 5,
            "--batch-size", 48, "--shared-dim", 10, "--hidden", 32]
    assert run(capsys, *argv)[0] == 0
    trace = (tmp_path / "m.xmm.trace.tsv").read_bytes()
    blob = model.read_bytes()
    assert run(capsys, *argv)[0] == 0
    assert (tmp_path / "m.xmm.trace.tsv").read_bytes() == trace
    assert model.read_bytes() == blob
    meta = json.loads(io.decode_sections(blob)["meta"])
    assert meta["seed"] == 0 and meta["config"]["epochs"] == 5

    code, out, _ = run(capsys, "eval", model, data / "manifest.tsv", "--out", tmp_path / "rep",
                       "--components", "5,10,20", "--recall", "1,5")
    assert code == 0
    rows = (tmp_path / "rep.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["direction", "level", "k", "mrr1", "recall@1", "recall@5", "queries"]
    assert len(rows) == 1 + 2 * 3
    na = [r for r in rows[1:] if r.split("\t")[2] == "20"]
    assert all(r.split("\t")[3] == "N/A" for r in na)
    report = json.loads((tmp_path / "rep.json").read_text())
    assert report["variant"] == "feature-dcca"
    assert all(r["n_queries"] == 24 for r in report["reports"] if r["available"])

    code, out, _ = run(capsys, "plot-data", tmp_path / "rep.json", "--metric", "recall@5")
    assert code == 0
    triples = out.strip().splitlines()
    assert triples[0] == "x\ty\tseries" and len(triples) == 1 + 4


def test_linear_cca_trains_quickly(tmp_path, capsys):
    data = tmp_path / "d"
    assert run(capsys, "synth", "--out", data, "--pairs", 400)[0] == 0
    start = time.perf_counter()
    assert run(capsys, "train", data / "manifest.tsv", "--out", tmp_path / "lin.xmm", "--variant", "linear-cca",
               "--shared-dim", 30)[0] == 0
    assert time.perf_counter() - start < 10
    code, _, _ = run(capsys, "eval", tmp_path / "lin.xmm", data / "manifest.tsv", "--out", tmp_path / "r",
                     "--components", "3")
    assert code == 0


def test_symmetric_toy_model_directions_agree(tmp_path, capsys):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((40, 6))
    rows = [(f"p{i:02d}", x[i]) for i in range(40)]
    write_vectors(tmp_path / "v.tsv", rows)
    lines = ["id\taudio\ttext\tcategory\tsplit"] + [f"{pid}\tv.tsv#{pid}\tv.tsv#{pid}\tc\ttrain" for pid, _ in rows]
    lines += [f"{pid}x\tv.tsv#{pid}\tv.tsv#{pid}\tc\ttest" for pid, _ in rows]
    (tmp_path / "m.tsv").write_text("\n".join(lines) + "\n")
    assert run(capsys, "train", tmp_path / "m.tsv", "--out", tmp_path / "sym.xmm", "--variant", "linear-cca",
               "--shared-dim", 6, "--ridge", 1e-8)[0] == 0
    assert run(capsys, "eval", tmp_path / "sym.xmm", tmp_path / "m.tsv", "--out", tmp_path / "r",
               "--components", "6")[0] == 0
    reports = json.loads((tmp_path / "r.json").read_text())["reports"]
    a2t = [r["mrr1"] for r in reports if r["direction"] == "audio-to-text"]
    t2a = [r["mrr1"] for r in reports if r["direction"] == "text-to-audio"]
    assert a2t == t2a == [1.0]


def test_crossval_command(tmp_path, capsys):
    data = tmp_path / "d"
    assert run(capsys, "synth", "--out", data, "--pairs", 100, "--audio-dim", 10, "--text-dim", 10)[0] == 0
    code, out, _ = run(capsys, "crossval", data / "manifest.tsv", "--out", tmp_path / "cv", "--variant",
                       "linear-cca", "--shared-dim", 5, "--components", "2,5", "--runs", 3, "--seed", 7)
    assert code == 0
    doc = json.loads((tmp_path / "cv.json").read_text())
    assert doc["seeds"] == [7, 8, 9]
    assert len(doc["reports"]) == 4
