"""Command-line contracts: flags, exit codes, artifacts, reproducibility."""

import json
from pathlib import Path

import numpy as np
import pytest

from masksep.cli import main
from masksep.separator import load_model


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_ds") / "ds"
    assert main(["synth", "--out", str(out), "--items", "16", "--seed", "5",
                 "--duration", "16384"]) == 0
    return out


def run_dirs(tmp_path, *names):
    return [tmp_path / n for n in names]


class TestSynth:
    def test_creates_manifest_and_store(self, small_dataset):
        assert (small_dataset / "manifest.jsonl").exists()
        assert (small_dataset / "embeddings.embd").exists()
        assert (small_dataset / "embeddings.manifest").exists()
        assert (small_dataset / "audio_embedder.json").exists()
        assert (small_dataset / "effective_config.json").exists()

    def test_rerun_is_byte_identical(self, small_dataset, tmp_path):
        again = tmp_path / "again"
        assert main(["synth", "--out", str(again), "--items", "16", "--seed",
                     "5", "--duration", "16384"]) == 0
        for rel in ("manifest.jsonl", "embeddings.embd", "dataset.json",
                    "items/item_0003_mix.wav"):
            assert (small_dataset / rel).read_bytes() == (
                again / rel
            ).read_bytes(), rel

    def test_missing_out_is_config_error(self):
        assert main(["synth"]) == 2


class TestTrainRl:
    def test_zero_steps_initial_checkpoint_only(self, small_dataset, tmp_path):
        run = tmp_path / "run0"
        assert main(["train-rl", "--dataset", str(small_dataset), "--run-dir",
                     str(run), "--steps", "0", "--warm-start-steps", "5"]) == 0
        assert (run / "checkpoints" / "init.json").exists()
        assert not (run / "checkpoints" / "best.json").exists()
        assert (run / "effective_config.json").exists()
        assert (run / "reports" / "run_summary.json").exists()

    def test_short_run_writes_log_and_checkpoints(self, small_dataset, tmp_path):
        run = tmp_path / "run1"
        assert main(["train-rl", "--dataset", str(small_dataset), "--run-dir",
                     str(run), "--steps", "4", "--batch-size", "4",
                     "--val-interval", "2", "--warm-start-steps", "5"]) == 0
        log = (run / "logs" / "train.jsonl").read_text().splitlines()
        steps = [json.loads(l) for l in log if "mean_reward" in l]
        assert len(steps) == 4
        load_model(run / "checkpoints" / "best.json")
        load_model(run / "checkpoints" / "last.json")

    def test_reward_mode_flag(self, small_dataset, tmp_path):
        run = tmp_path / "run2"
        assert main(["train-rl", "--dataset", str(small_dataset), "--run-dir",
                     str(run), "--steps", "1", "--batch-size", "2",
                     "--reward-mode", "audio", "--warm-start-steps", "5"]) == 0
        cfg = json.loads((run / "effective_config.json").read_text())
        assert cfg["reward_mode"] == "audio"

    def test_config_file_precedence(self, small_dataset, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"steps": 1, "batch_size": 2,
                                        "lr": 0.123}))
        run = tmp_path / "run3"
        assert main(["train-rl", "--dataset", str(small_dataset), "--run-dir",
                     str(run), "--config", str(cfg_file), "--steps", "2",
                     "--warm-start-steps", "5"]) == 0
        effective = json.loads((run / "effective_config.json").read_text())
        assert effective["steps"] == 2      # flag beats file
        assert effective["lr"] == 0.123     # file beats default

    def test_unknown_config_key_rejected(self, small_dataset, tmp_path):
        cfg_file = tmp_path / "bad.json"
        cfg_file.write_text(json.dumps({"nonsense": 1}))
        assert main(["train-rl", "--dataset", str(small_dataset), "--run-dir",
                     str(tmp_path / "run4"), "--config", str(cfg_file)]) == 2

    def test_missing_dataset_is_config_error(self, tmp_path):
        assert main(["train-rl", "--run-dir", str(tmp_path / "r")]) == 2


@pytest.fixture(scope="module")
def trained_run(small_dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("cli_run") / "run"
    assert main(["train-rl", "--dataset", str(small_dataset), "--run-dir",
                 str(run), "--steps", "2", "--batch-size", "4",
                 "--warm-start-steps", "5"]) == 0
    return run


class TestSeparate:
    def test_split_mode_writes_estimates_and_manifest(self, small_dataset,
                                                      trained_run, tmp_path):
        out = tmp_path / "sep"
        assert main(["separate", "--checkpoint",
                     str(trained_run / "checkpoints" / "best.json"),
                     "--dataset", str(small_dataset), "--split", "test",
                     "--out", str(out)]) == 0
        manifest = out / "eval_manifest.jsonl"
        records = [json.loads(l) for l in manifest.read_text().splitlines()]
        assert records
        for rec in records:
            assert Path(rec["estimates"][0]).exists()

    def test_single_file_mode_with_store_query(self, small_dataset,
                                               trained_run, tmp_path):
        rec = json.loads(
            (small_dataset / "manifest.jsonl").read_text().splitlines()[0]
        )
        out = tmp_path / "single.wav"
        assert main(["separate", "--checkpoint",
                     str(trained_run / "checkpoints" / "best.json"),
                     "--dataset", str(small_dataset),
                     "--mixture", str(small_dataset / rec["mixture"]),
                     "--query", f"store:text:{rec['item_id']}",
                     "--out", str(out)]) == 0
        assert out.exists()

    def test_single_file_mode_with_vector_file(self, small_dataset,
                                               trained_run, tmp_path):
        rec = json.loads(
            (small_dataset / "manifest.jsonl").read_text().splitlines()[0]
        )
        qfile = tmp_path / "q.json"
        qfile.write_text(json.dumps({"vector": list(np.ones(16) / 4.0)}))
        out = tmp_path / "single2.wav"
        assert main(["separate", "--checkpoint",
                     str(trained_run / "checkpoints" / "best.json"),
                     "--mixture", str(small_dataset / rec["mixture"]),
                     "--query", str(qfile), "--out", str(out)]) == 0
        assert out.exists()

    def test_missing_query_is_config_error(self, small_dataset, trained_run,
                                           tmp_path):
        rec = json.loads(
            (small_dataset / "manifest.jsonl").read_text().splitlines()[0]
        )
        assert main(["separate", "--checkpoint",
                     str(trained_run / "checkpoints" / "best.json"),
                     "--mixture", str(small_dataset / rec["mixture"]),
                     "--out", str(tmp_path / "x.wav")]) == 2

    def test_identity_like_checkpoint_on_all_ones_proposal(self, small_dataset,
                                                           tmp_path):
        # saturate the output bias so the proposal is ~1 everywhere: the
        # separation then reproduces the mixture
        from masksep import separator
        from masksep.wavio import read_wav

        model = separator.init_model(np.random.default_rng(0), query_dim=16)
        model.w1[:] = 0; model.b1[:] = 0; model.w2[:] = 0; model.b2[:] = 40.0
        ckpt = tmp_path / "ones.json"
        separator.save_model(ckpt, model)
        rec = json.loads(
            (small_dataset / "manifest.jsonl").read_text().splitlines()[0]
        )
        out = tmp_path / "identity.wav"
        assert main(["separate", "--checkpoint", str(ckpt),
                     "--dataset", str(small_dataset),
                     "--mixture", str(small_dataset / rec["mixture"]),
                     "--query", f"store:text:{rec['item_id']}",
                     "--out", str(out)]) == 0
        mix = read_wav(small_dataset / rec["mixture"])
        est = read_wav(out)
        err = np.linalg.norm(est.samples - mix.samples) / np.linalg.norm(
            mix.samples
        )
        assert err <= 1e-4  # float32 wav quantization dominates


@pytest.fixture(scope="module")
def sep_out(small_dataset, trained_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_eval") / "sep"
    assert main(["separate", "--checkpoint",
                 str(trained_run / "checkpoints" / "best.json"),
                 "--dataset", str(small_dataset), "--split", "test",
                 "--out", str(out)]) == 0
    return out


class TestEval:

    def test_eval_writes_reports(self, sep_out, tmp_path):
        out = tmp_path / "eval"
        assert main(["eval", "--manifest", str(sep_out / "eval_manifest.jsonl"),
                     "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_scored"] >= 1
        lines = (out / "report.jsonl").read_text().splitlines()
        assert len(lines) == summary["n_scored"] + summary["n_skipped"]

    def test_eval_determinism(self, sep_out, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["eval", "--manifest",
                         str(sep_out / "eval_manifest.jsonl"),
                         "--out", str(out), "--seed", "9"]) == 0
        assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
        assert (a / "report.jsonl").read_bytes() == (b / "report.jsonl").read_bytes()

    def test_all_skipped_is_runtime_error(self, small_dataset, tmp_path):
        from masksep.spectral import Waveform
        from masksep.wavio import write_wav

        silent = tmp_path / "silent.wav"
        write_wav(silent, Waveform(np.zeros(4096), 16000))
        loud = tmp_path / "loud.wav"
        write_wav(loud, Waveform(np.random.default_rng(0).standard_normal(4096) * 0.1,
                                 16000))
        manifest = tmp_path / "m.jsonl"
        manifest.write_text(json.dumps({
            "item_id": "x", "mixture": str(loud),
            "references": [str(silent)], "estimates": [str(loud)],
        }) + "\n")
        assert main(["eval", "--manifest", str(manifest),
                     "--out", str(tmp_path / "out")]) == 3


class TestTrainAlign:
    def test_zero_epochs_returns_identity_heads(self, small_dataset, tmp_path):
        run = tmp_path / "align0"
        assert main(["train-align", "--dataset", str(small_dataset),
                     "--run-dir", str(run), "--epochs", "0"]) == 0
        from masksep.align import load_heads

        heads = load_heads(run / "checkpoints" / "heads_best.json")
        assert np.array_equal(heads.audio.weight, np.eye(16))
        report = (run / "reports" / "curriculum.txt").read_text()
        assert "discrimination gap" in report

    def test_seed_determinism(self, small_dataset, tmp_path):
        runs = []
        for name in ("a", "b"):
            run = tmp_path / name
            assert main(["train-align", "--dataset", str(small_dataset),
                         "--run-dir", str(run), "--epochs", "2",
                         "--steps-per-epoch", "5", "--seed", "7"]) == 0
            runs.append(run)
        assert (runs[0] / "checkpoints" / "heads_best.json").read_bytes() == (
            runs[1] / "checkpoints" / "heads_best.json"
        ).read_bytes()
        assert (runs[0] / "reports" / "gap.json").read_bytes() == (
            runs[1] / "reports" / "gap.json"
        ).read_bytes()


def test_train_rl_reproducibility(small_dataset, tmp_path):
    runs = []
    for name in ("r1", "r2"):
        run = tmp_path / name
        assert main(["train-rl", "--dataset", str(small_dataset), "--run-dir",
                     str(run), "--steps", "3", "--batch-size", "4",
                     "--seed", "11", "--warm-start-steps", "5"]) == 0
        runs.append(run)
    assert (runs[0] / "logs" / "train.jsonl").read_bytes() == (
        runs[1] / "logs" / "train.jsonl"
    ).read_bytes()
    for ckpt in ("init.json", "best.json", "last.json"):
        assert (runs[0] / "checkpoints" / ckpt).read_bytes() == (
            runs[1] / "checkpoints" / ckpt
        ).read_bytes()
