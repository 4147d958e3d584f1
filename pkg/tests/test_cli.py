import json

import numpy as np
import pytest

from klflow.cli import main
from klflow.data import MarkovToyLanguage


@pytest.fixture(scope="module")
def toy_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    lang = MarkovToyLanguage.random(8, seed=5, concentration=0.4)
    spec = root / "lang.json"
    spec.write_text(lang.to_json())
    cfg = {
        "corpus": {"kind": "toy", "spec_path": str(spec), "seq_len": 8,
                   "num_sequences": 256, "sample_seed": 1},
        "train": {"steps": 30, "batch_size": 8, "lr": 1e-3,
                  "lr_warmup_steps": 5, "eval_every": 10, "seed": 2},
        "model": {"layers": 1, "heads": 2, "embed_dim": 16, "vocab_size": 8,
                  "max_seq_len": 8},
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    return root, cfg_path


@pytest.fixture(scope="module")
def trained(toy_config):
    root, cfg_path = toy_config
    out = root / "train_out"
    code = main(["train", "--config", str(cfg_path), "--output-dir", str(out)])
    assert code == 0
    return root, cfg_path, out / "model_final.ckpt"


class TestTrain:
    def test_success_writes_artifacts(self, trained):
        _, _, ckpt = trained
        assert ckpt.exists()
        out = ckpt.parent
        assert (out / "metrics.csv").exists()
        assert (out / "config_resolved.json").exists()
        header = (out / "metrics.csv").read_text().splitlines()[0]
        assert header == "step,loss,lr,wall_ms"

    def test_missing_corpus_path_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "corpus": {"kind": "text", "path": str(tmp_path / "nope.txt"),
                       "seq_len": 8},
            "train": {"steps": 1},
            "model": {"layers": 1, "heads": 1, "embed_dim": 8, "vocab_size": 256,
                      "max_seq_len": 8},
        }))
        code = main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "o")])
        assert code == 2
        assert "corpus.path" in capsys.readouterr().err

    def test_unknown_config_field_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "corpus": {"kind": "toy", "vocab_size": 4, "seq_len": 4,
                       "num_sequences": 8},
            "train": {"steps": 1, "warp_factor": 9},
        }))
        code = main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "o")])
        assert code == 2
        assert "warp_factor" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_forced_divergence_exit_3(self, toy_config, tmp_path, capsys):
        _, cfg_path = toy_config
        code = main(["train", "--config", str(cfg_path),
                     "--output-dir", str(tmp_path / "div"),
                     "--lr", "1e6", "--steps", "50"])
        assert code == 3
        err = capsys.readouterr().err
        assert "step" in err

    def test_cli_flag_overrides_config(self, toy_config, tmp_path):
        _, cfg_path = toy_config
        out = tmp_path / "override"
        code = main(["train", "--config", str(cfg_path), "--output-dir", str(out),
                     "--steps", "5", "--eval-every", "5"])
        assert code == 0
        resolved = json.loads((out / "config_resolved.json").read_text())
        assert resolved["train"]["steps"] == 5


class TestGenerate:
    def test_deterministic_given_seed(self, trained, tmp_path):
        _, _, ckpt = trained
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = main(["generate", str(ckpt), "--scheme", "sampling",
                         "--steps", "4", "--top-k", "1", "--seed", "7",
                         "--count", "3", "--output-dir", str(out)])
            assert code == 0
            outs.append((out / "generated.txt").read_bytes())
        assert outs[0] == outs[1]

    def test_hybrid_extremes_match_pure_schemes(self, trained, tmp_path):
        _, _, ckpt = trained
        blobs = {}
        for name, extra in (
            ("basic", ["--scheme", "basic"]),
            ("hyb1", ["--scheme", "hybrid", "--t-star", "1.0"]),
            ("sampling", ["--scheme", "sampling"]),
            ("hyb0", ["--scheme", "hybrid", "--t-star", "0.0"]),
        ):
            out = tmp_path / name
            code = main(["generate", str(ckpt), *extra, "--steps", "4",
                         "--top-k", "1", "--seed", "11", "--count", "2",
                         "--output-dir", str(out)])
            assert code == 0
            blobs[name] = (out / "generated.txt").read_bytes()
        assert blobs["basic"] == blobs["hyb1"]
        assert blobs["sampling"] == blobs["hyb0"]

    def test_full_clamp_reproduces_tokens(self, trained, tmp_path):
        _, _, ckpt = trained
        clamp = ",".join(f"{i}={i % 8}" for i in range(8))
        out = tmp_path / "clamped"
        code = main(["generate", str(ckpt), "--scheme", "sampling", "--steps", "4",
                     "--seed", "3", "--count", "2", "--clamp", clamp,
                     "--output-dir", str(out)])
        assert code == 0
        lines = (out / "generated.txt").read_text().strip().splitlines()
        assert lines == ["0 1 2 3 4 5 6 7"] * 2

    def test_trajectory_csv_dump(self, trained, tmp_path):
        _, _, ckpt = trained
        out = tmp_path / "traj"
        csv_path = tmp_path / "traj.csv"
        code = main(["generate", str(ckpt), "--scheme", "basic", "--steps", "3",
                     "--seed", "1", "--count", "1", "--output-dir", str(out),
                     "--trajectory-csv", str(csv_path)])
        assert code == 0
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "step,t,position,argmax_token,argmax_prob"
        assert len(lines) == 1 + 4 * 8 + 1  # header + (steps+1)*S + decoded line
        assert lines[-1].startswith("decoded,")

    def test_bad_checkpoint_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOTAMAGIC" + b"\x00" * 32)
        code = main(["generate", str(bad), "--count", "1",
                     "--output-dir", str(tmp_path / "o")])
        assert code == 2


class TestEvalAndSweep:
    def test_eval_emits_report(self, trained, toy_config, tmp_path):
        root, cfg_path, ckpt = trained
        gen_out = tmp_path / "gen"
        assert main(["generate", str(ckpt), "--scheme", "sampling", "--steps", "4",
                     "--seed", "5", "--count", "32",
                     "--output-dir", str(gen_out)]) == 0
        out = tmp_path / "eval"
        code = main(["eval", "--config", str(cfg_path),
                     "--generated", str(gen_out / "generated.txt"),
                     "--output-dir", str(out)])
        assert code == 0
        report = json.loads((out / "eval_report.json").read_text())
        assert set(report) == {"entropy_nats", "ref_perplexity", "unigram_tv",
                               "bigram_tv", "num_sequences"}
        assert (out / "eval_log.csv").exists()

    def test_sweep_writes_one_row_per_value(self, trained, toy_config, tmp_path):
        root, cfg_path, ckpt = trained
        out = tmp_path / "sweep"
        code = main(["sweep", str(ckpt), "--config", str(cfg_path),
                     "--axis", "t_star", "--values", "0,0.25,0.5,0.75,1.0",
                     "--count", "8", "--output-dir", str(out)])
        assert code == 0
        lines = (out / "sweep.csv").read_text().strip().splitlines()
        assert lines[0] == "t_star,entropy_nats,ref_perplexity,unigram_tv,bigram_tv"
        assert len(lines) == 6

    def test_sweep_nfe_axis(self, trained, toy_config, tmp_path):
        root, cfg_path, ckpt = trained
        out = tmp_path / "sweep_nfe"
        code = main(["sweep", str(ckpt), "--config", str(cfg_path),
                     "--axis", "nfe", "--values", "2,4,8", "--scheme", "sampling",
                     "--count", "8", "--output-dir", str(out)])
        assert code == 0
        assert len((out / "sweep.csv").read_text().strip().splitlines()) == 4

    def test_sweep_dedupes_with_warning(self, trained, toy_config, tmp_path, capsys):
        root, cfg_path, ckpt = trained
        out = tmp_path / "sweep_dup"
        code = main(["sweep", str(ckpt), "--config", str(cfg_path),
                     "--axis", "top_k", "--values", "1,2,2,4",
                     "--count", "8", "--output-dir", str(out)])
        assert code == 0
        assert "duplicate" in capsys.readouterr().err
        assert len((out / "sweep.csv").read_text().strip().splitlines()) == 4

    def test_sweep_rejects_single_value(self, trained, toy_config, tmp_path):
        root, cfg_path, ckpt = trained
        code = main(["sweep", str(ckpt), "--config", str(cfg_path),
                     "--axis", "top_k", "--values", "3,3",
                     "--output-dir", str(tmp_path / "x")])
        assert code == 2


class TestOracleCheck:
    def test_small_report(self, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        code = main(["oracle-check", "--vocab-size", "2", "--p1", "0.7,0.3",
                     "--samples", "50000", "--grid-resolution", "16",
                     "--time-buckets", "8", "--grid-points", "60",
                     "--ode-trajectories", "4000", "--ode-steps", "64",
                     "--report-json", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert {"instance", "resolution", "mean_tv", "max_tv", "ode_tv",
                "pass"} <= set(report)
        assert report["pass"] in (True, False)
        assert report["ode_tv"] < 0.1
