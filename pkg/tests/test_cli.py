import json

import numpy as np
import pytest

from hyperspotter import cli, frontend, hypernet, metrics, trainer
from hyperspotter.checkpoint import Checkpoint, save_checkpoint
from hyperspotter.config import DESK
from hyperspotter.detector import detect
from hyperspotter.encoder import encode


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth-corpus", "--out", str(d), "--clips", "6", "--held-clips", "4",
                     "--pretrain-clips", "4"]) == 0
    save_checkpoint(d / "init.hsck", Checkpoint(trainer.init_model(DESK, 0), DESK))
    return d


def test_synth_corpus_outputs(workdir):
    vocab = json.loads((workdir / "vocabulary.json").read_text())
    assert len(vocab["train"]) == 8 and len(vocab["held"]) == 4
    for name in ("train.jsonl", "held.jsonl", "pretrain.jsonl"):
        assert (workdir / name).exists()
    pre = (workdir / "pretrain.jsonl").read_text()
    assert not any(f'"{w}"' in pre for w in vocab["held"])


def test_gen_weights_then_detect_matches_in_memory(workdir, capsys):
    kw = json.loads((workdir / "vocabulary.json").read_text())["train"][0]
    hskw = workdir / "kw.hskw"
    assert cli.main(["gen-weights", "--keyword", kw, "--checkpoint", str(workdir / "init.hsck"),
                     "--out", str(hskw)]) == 0
    params = trainer.init_model(DESK, 0)
    mem = hypernet.generate_weights(kw, params, DESK.hypernet)
    assert hypernet.read_filter(hskw).weights.tobytes() == mem.weights.tobytes()

    wav = json.loads((workdir / "train.jsonl").read_text().splitlines()[0])["audio"]
    wav = str(workdir / wav)
    capsys.readouterr()
    code = cli.main(["detect", "--audio", wav, "--filter", str(hskw),
                     "--checkpoint", str(workdir / "init.hsck"), "--threshold", "0"])
    printed = float(capsys.readouterr().out)
    assert code == 0
    z = encode(frontend.log_mel(frontend.load_wav(wav)), DESK.encoder, params)
    assert printed == pytest.approx(detect(z, mem, params, DESK.detector).probability, abs=1e-6)
    assert cli.main(["detect", "--audio", wav, "--filter", str(hskw),
                     "--checkpoint", str(workdir / "init.hsck"), "--threshold", "1.01"]) == 1


def test_corrupt_filter_is_io_error(workdir):
    blob = bytearray(hypernet.FILTER_MAGIC + bytes(40))
    (workdir / "bad.hskw").write_bytes(bytes(blob))
    wav = workdir / "wav" / "train_0000.wav"
    assert cli.main(["detect", "--audio", str(wav), "--filter", str(workdir / "bad.hskw"),
                     "--checkpoint", str(workdir / "init.hsck")]) == cli.EXIT_IO


def test_missing_file_and_bad_keyword(workdir):
    assert cli.main(["gen-weights", "--keyword", "x", "--checkpoint", str(workdir / "nope.hsck"),
                     "--out", str(workdir / "x.hskw")]) == cli.EXIT_IO
    assert cli.main(["gen-weights", "--keyword", "c@t", "--checkpoint", str(workdir / "init.hsck"),
                     "--out", str(workdir / "x.hskw")]) == cli.EXIT_USAGE


def test_usage_errors(workdir):
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == 2
    (workdir / "cfg.json").write_text(json.dumps({"preset": "desk", "bogus": 1}))
    assert cli.main(["--config", str(workdir / "cfg.json"), "evaluate", "--scores", "x",
                     "--out", "y"]) == cli.EXIT_USAGE
    assert cli.main(["evaluate", "--out", str(workdir / "r.csv")]) == cli.EXIT_USAGE


def test_help_documents_formats(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    for magic in ("HSKW0001", "HSCK0001", "HSFEAT01"):
        assert magic in out


def test_evaluate_external_scores(workdir, capsys):
    rows = [metrics.ScoreRow(f"c{i}", "k", i % 2, 0.9 if i % 2 else 0.1) for i in range(10)]
    metrics.write_scores(workdir / "s.csv", rows)
    assert cli.main(["evaluate", "--scores", str(workdir / "s.csv"), "--out", str(workdir / "r.csv"),
                     "--roc", str(workdir / "roc.csv")]) == 0
    report = metrics.load_report(workdir / "r.csv")
    assert report["all"]["auc"] == 100.0 and report["all"]["eer"] == 0.0
    assert (workdir / "roc.csv").read_text().startswith("threshold,far,frr")


def test_evaluate_checkpoint_with_noise(workdir):
    args = ["evaluate", "--manifest", str(workdir / "train.jsonl"), "--checkpoint",
            str(workdir / "init.hsck"), "--snr", "10", "--max-span-words", "1"]
    assert cli.main(args + ["--out", str(workdir / "e1.csv"), "--scores-out", str(workdir / "p1.csv")]) == 0
    assert cli.main(args + ["--out", str(workdir / "e2.csv"), "--scores-out", str(workdir / "p2.csv")]) == 0
    assert (workdir / "p1.csv").read_bytes() == (workdir / "p2.csv").read_bytes()


def test_train_logs_identical_without_timing(workdir):
    logs = []
    for i in range(2):
        assert cli.main(["train", "--train", str(workdir / "train.jsonl"), "--init",
                         str(workdir / "init.hsck"), "--out", str(workdir / f"t{i}.hsck"),
                         "--max-steps", "2", "--batch-size", "4", "--log", str(workdir / f"l{i}.csv"),
                         "--no-timing"]) == 0
        logs.append((workdir / f"l{i}.csv").read_bytes())
    assert logs[0] == logs[1]
    assert (workdir / "t0.hsck").read_bytes() == (workdir / "t1.hsck").read_bytes()


def test_train_divergence_exit_code(workdir):
    params = trainer.init_model(DESK, 0)
    params["encoder.in_proj.b"].data[:] = np.nan
    save_checkpoint(workdir / "nan.hsck", Checkpoint(params, DESK))
    assert cli.main(["train", "--train", str(workdir / "train.jsonl"), "--init",
                     str(workdir / "nan.hsck"), "--out", str(workdir / "d.hsck"),
                     "--max-steps", "2", "--batch-size", "4"]) == cli.EXIT_DIVERGED


def test_export_attention(workdir):
    kw = json.loads((workdir / "vocabulary.json").read_text())["train"][1]
    hskw = workdir / "k2.hskw"
    cli.main(["gen-weights", "--keyword", kw, "--checkpoint", str(workdir / "init.hsck"),
              "--out", str(hskw)])
    wav = workdir / "wav" / "train_0001.wav"
    assert cli.main(["export-attention", "--audio", str(wav), "--filter", str(hskw), "--checkpoint",
                     str(workdir / "init.hsck"), "--out", str(workdir / "att")]) == 0
    mat = np.loadtxt(workdir / "att.csv", delimiter=",")
    assert mat.shape[0] == DESK.detector.latent_size
    np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-5)
    assert cli.main(["export-attention", "--audio", str(wav), "--filter", str(hskw), "--checkpoint",
                     str(workdir / "init.hsck"), "--out", str(workdir / "a"), "--layer", "7"]) == 2


def test_mix_noise_command(workdir):
    wav = workdir / "wav" / "train_0002.wav"
    out = workdir / "noisy.wav"
    assert cli.main(["mix-noise", "--audio", str(wav), "--snr", "5", "--out", str(out)]) == 0
    clean, noisy = frontend.load_wav(wav), frontend.load_wav(out)
    assert len(noisy.samples) == len(clean.samples)
    assert not np.array_equal(noisy.samples, clean.samples)
