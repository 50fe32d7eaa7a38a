import os

import numpy as np
import pytest

from stemsep import cli
from stemsep.arch import canonical_text, toy_arch
from stemsep.dsp import read_wav
from stemsep.evaluation import read_report
from stemsep.model import load_checkpoint_model


@pytest.fixture(scope="module")
def toy_arch_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "toy.cfg"
    path.write_text(canonical_text(toy_arch()))
    return str(path)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-data")
    rc = cli.main(["synth-data", str(out), "--seed", "3", "--tracks", "2",
                   "--duration", "2.5", "--sample-rate", "8000"])
    assert rc == 0
    return str(out)


def test_synth_data_layout(data_dir):
    for track in ("track00", "track01"):
        files = sorted(os.listdir(os.path.join(data_dir, track)))
        assert files == ["bass.wav", "drums.wav", "mixture.wav",
                         "other.wav", "vocals.wav"]


def test_synth_data_deterministic(tmp_path, data_dir):
    rc = cli.main(["synth-data", str(tmp_path), "--seed", "3", "--tracks", "1",
                   "--duration", "2.5", "--sample-rate", "8000"])
    assert rc == 0
    a = read_wav(os.path.join(data_dir, "track00", "mixture.wav"))
    b = read_wav(tmp_path / "track00" / "mixture.wav")
    np.testing.assert_array_equal(a.samples, b.samples)


@pytest.fixture(scope="module")
def trained_ckpt(tmp_path_factory, toy_arch_file, data_dir):
    out = tmp_path_factory.mktemp("ckpt") / "vocals.ckpt"
    rc = cli.main(["train", data_dir, "--out", str(out), "--arch", toy_arch_file,
                   "--source", "vocals", "--epochs", "1", "--steps", "2",
                   "--frames", "16", "--seed", "1"])
    assert rc == 0
    return str(out)


def test_train_epochs_zero_writes_init_checkpoint(tmp_path, toy_arch_file, data_dir):
    from stemsep.model import build_model, save_checkpoint
    from stemsep.arch import load_arch_file

    out = tmp_path / "init.ckpt"
    rc = cli.main(["train", data_dir, "--out", str(out), "--arch", toy_arch_file,
                   "--epochs", "0", "--seed", "7"])
    assert rc == 0
    ref = tmp_path / "ref.ckpt"
    save_checkpoint(ref, build_model(load_arch_file(toy_arch_file), seed=7),
                    extra={"source": "vocals", "seed": 7, "epochs": 0})
    assert out.read_bytes() == ref.read_bytes()


def test_train_then_load_round_trip(trained_ckpt):
    model = load_checkpoint_model(trained_ckpt)
    assert model.spec.fft_size == toy_arch().fft_size


def test_separate_writes_stems(tmp_path, trained_ckpt, data_dir):
    out = tmp_path / "est" / "track00"
    rc = cli.main(["separate", os.path.join(data_dir, "track00", "mixture.wav"),
                   "--checkpoints", trained_ckpt, "--out", str(out)])
    assert rc == 0
    assert sorted(os.listdir(out)) == ["accompaniment.wav", "vocals.wav"]
    mix = read_wav(os.path.join(data_dir, "track00", "mixture.wav"))
    voc = read_wav(out / "vocals.wav")
    acc = read_wav(out / "accompaniment.wav")
    assert voc.samples.shape == mix.samples.shape
    np.testing.assert_allclose(voc.samples + acc.samples, mix.samples, atol=1e-4)


def test_separate_then_evaluate_compose(tmp_path, trained_ckpt, data_dir):
    est_root = tmp_path / "est"
    for track in ("track00", "track01"):
        rc = cli.main(["separate", os.path.join(data_dir, track, "mixture.wav"),
                       "--checkpoints", trained_ckpt,
                       "--out", str(est_root / track)])
        assert rc == 0
    scores = tmp_path / "scores.json"
    rc = cli.main(["evaluate", "--estimates", str(est_root),
                   "--references", data_dir, "--out", str(scores),
                   "--filter-len", "16", "--window", "1.0", "--hop", "0.5",
                   "--sample-rate", "8000"])
    assert rc == 0
    report = read_report(scores)
    assert "vocals" in report["medians"]
    assert "accompaniment" in report["medians"]


def test_evaluate_jobs_flag_gives_same_scores(tmp_path, trained_ckpt, data_dir):
    est_root = tmp_path / "est"
    for track in ("track00", "track01"):
        cli.main(["separate", os.path.join(data_dir, track, "mixture.wav"),
                  "--checkpoints", trained_ckpt, "--out", str(est_root / track)])
    args = ["--estimates", str(est_root), "--references", data_dir,
            "--filter-len", "8", "--window", "1.0", "--hop", "0.5",
            "--sample-rate", "8000"]
    s1, s2 = tmp_path / "s1.json", tmp_path / "s2.json"
    assert cli.main(["evaluate", *args, "--out", str(s1), "--jobs", "1"]) == 0
    assert cli.main(["evaluate", *args, "--out", str(s2), "--jobs", "2"]) == 0
    assert read_report(s1) == read_report(s2)


def test_inspect_arch_reports_counts(capsys, toy_arch_file):
    from stemsep.arch import load_arch_file
    from stemsep.model import build_model, count_params

    rc = cli.main(["inspect", "--arch", toy_arch_file])
    assert rc == 0
    out = capsys.readouterr().out
    total, _ = count_params(build_model(load_arch_file(toy_arch_file), seed=0))
    assert "total parameters: %d" % total in out
    assert "receptive field" in out


def test_inspect_checkpoint_with_feature_norms(capsys, trained_ckpt, data_dir):
    rc = cli.main(["inspect", "--checkpoint", trained_ckpt,
                   "--input", os.path.join(data_dir, "track00", "mixture.wav"),
                   "--slot", "band1/d1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "feature-map RMS at band1/d1" in out


def test_config_echo(capsys, tmp_path):
    cli.main(["synth-data", str(tmp_path), "--tracks", "1", "--duration", "1.0",
              "--sample-rate", "8000"])
    out = capsys.readouterr().out
    assert out.startswith("config:")
    assert "tracks=1" in out


def test_missing_input_exit_code(tmp_path):
    rc = cli.main(["separate", str(tmp_path / "nope.wav"),
                   "--checkpoints", str(tmp_path), "--out", str(tmp_path / "o")])
    assert rc == 3


def test_bad_arch_exit_code(tmp_path, data_dir):
    bad = tmp_path / "bad.cfg"
    bad.write_text("mode = Q\n")
    rc = cli.main(["train", data_dir, "--out", str(tmp_path / "c.ckpt"),
                   "--arch", str(bad)])
    assert rc == 4


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit):
        cli.main(["synth-data", "out", "--bogus"])
