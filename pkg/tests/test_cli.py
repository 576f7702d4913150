import json
from pathlib import Path

import pytest

from tilab.checkpoint import load_checkpoint
from tilab.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_IO,
    EXIT_OK,
    ConfigError,
    load_config,
    main,
    verify_manifest,
)

EXAMPLES = Path(__file__).resolve().parents[1] / "configs"
TINY = ["--set", "iterations=20", "--set", "eval_every=10", "--set", "checkpoint_every=10",
        "--set", "batch_size=8", "--set", "eval_episodes=2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out.strip().splitlines()[-1] if out.out.strip() else "", out.err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    dirs = {}
    for regime in ("iwl", "icl_adjacent", "linreg_pretrain"):
        assert main(["--out", str(out), "train", "--regime", regime, *TINY]) == EXIT_OK
        dirs[regime] = sorted(out.glob(f"{regime}-seed42-*"))[-1]
    return out, dirs


class TestConfig:
    def test_unknown_key_named(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"regime": "iwl", "learning_rat": 0.1}))
        with pytest.raises(ConfigError, match="learning_rat"):
            load_config(p)

    def test_bad_value_named(self):
        with pytest.raises(ConfigError, match="iterations"):
            load_config(None, {"iterations": "0"})
        with pytest.raises(ConfigError, match="batch_size"):
            load_config(None, {"batch_size": "lots"})

    def test_typed_overrides(self):
        cfg, analysis = load_config(None, {"learning_rate": "0.01", "scale_attention": "true", "pca": "1"})
        assert cfg.learning_rate == 0.01 and cfg.scale_attention is True and analysis["pca"] is True

    @pytest.mark.parametrize("name", ["iwl", "icl_adjacent", "icl_all_pairs", "linreg_pretrain", "transfer"])
    def test_shipped_examples_parse(self, name):
        cfg, _ = load_config(EXAMPLES / f"{name}.json")
        assert (cfg.n_items, cfg.P, cfg.D, cfg.n_layers, cfg.n_heads) == (7, 32, 64, 2, 4)

    def test_exit_code_and_message(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"regimen": "iwl"}))
        code, _, err = run(capsys, "--config", p, "--out", tmp_path, "train")
        assert code == EXIT_CONFIG and "regimen" in err


class TestTrain:
    def test_run_directory(self, trained):
        _, dirs = trained
        d = dirs["iwl"]
        assert (d / "loss.csv").read_text().startswith("iteration,loss\n")
        assert len(list((d / "checkpoints").glob("ckpt_*.tlc"))) == 3
        assert verify_manifest(d / "manifest.json") == []
        echo = json.loads((d / "config.json").read_text())
        cfg, _ = load_config(d / "config.json")
        assert cfg.to_dict().items() <= echo.items()

    def test_rerun_is_identical_in_new_directory(self, trained):
        out, dirs = trained
        assert main(["--out", str(out), "train", "--regime", "iwl", *TINY]) == EXIT_OK
        runs = sorted(out.glob("iwl-seed42-*"))
        assert len(runs) == 2
        for name in ("loss.csv", "accuracy.csv", "checkpoints/ckpt_0000020.tlc"):
            assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()

    def test_divergence_exit_code(self, tmp_path, capsys):
        code, _, err = run(capsys, "--out", tmp_path, "train", *TINY, "--set", "learning_rate=1e300")
        assert code == EXIT_DIVERGED and "diverged" in err


class TestEval:
    def test_pairs_csv(self, trained, capsys):
        _, dirs = trained
        code, out, _ = run(capsys, "eval", dirs["icl_adjacent"], "--episodes", 2, "--svg")
        assert code == EXIT_OK
        rows = (Path(out) / "pairs.csv").read_text().splitlines()
        assert len(rows) == 43
        assert (Path(out) / "pairs.svg").read_text().startswith("<svg")
        assert "distance_effect" in (Path(out) / "effects.txt").read_text()

    def test_svg_off_by_default(self, trained, capsys):
        _, dirs = trained
        _, out, _ = run(capsys, "eval", dirs["iwl"], "--episodes", 1)
        assert not list(Path(out).glob("*.svg"))

    def test_transfer(self, trained, capsys):
        _, dirs = trained
        ck = sorted((dirs["linreg_pretrain"] / "checkpoints").glob("*.tlc"))[-1]
        before = ck.read_bytes()
        code, out, _ = run(capsys, "eval", ck, "--transfer", "--episodes", 2)
        assert code == EXIT_OK and ck.read_bytes() == before
        assert len((Path(out) / "pairs.csv").read_text().splitlines()) == 43

    def test_linreg_needs_transfer_flag(self, trained, capsys):
        _, dirs = trained
        code, _, err = run(capsys, "eval", dirs["linreg_pretrain"])
        assert code == EXIT_CONFIG

    def test_corrupt_checkpoint(self, trained, tmp_path, capsys):
        _, dirs = trained
        ck = sorted((dirs["iwl"] / "checkpoints").glob("*.tlc"))[-1]
        bad = tmp_path / "bad.tlc"
        raw = bytearray(ck.read_bytes())
        raw[-1] ^= 1
        bad.write_bytes(bytes(raw))
        code, _, err = run(capsys, "eval", bad)
        assert code == EXIT_IO and "checksum" in err.lower()


class TestAnalyze:
    def test_induction_rows(self, trained, capsys):
        _, dirs = trained
        code, out, _ = run(capsys, "analyze", dirs["icl_adjacent"], "induction", "--probes", 4, "--svg")
        assert code == EXIT_OK
        rows = (Path(out) / "induction.csv").read_text().splitlines()
        # 3 checkpoints x 2 layers x 4 heads
        assert rows[0] == "iteration,layer,head,strength" and len(rows) == 1 + 3 * 2 * 4
        assert (Path(out) / "induction.svg").exists()

    def test_ablation_records_anchor(self, trained, capsys):
        _, dirs = trained
        code, out, _ = run(capsys, "analyze", dirs["icl_adjacent"], "ablation", "--probes", 8)
        man = json.loads((Path(out) / "manifest.json").read_text())
        assert code == EXIT_OK and 0 <= man["info"]["anchor_head"] < 4
        assert len((Path(out) / "ablation_keep_pair.csv").read_text().splitlines()) == 4

    def test_pca_ratios(self, trained, capsys):
        _, dirs = trained
        code, out, _ = run(capsys, "analyze", dirs["iwl"], "pca")
        ratios = [float(ln.split()[1]) for ln in (Path(out) / "pca_ratios.txt").read_text().splitlines()]
        assert code == EXIT_OK and sum(ratios) <= 1 + 1e-9
        assert len((Path(out) / "pca.csv").read_text().splitlines()) == 43

    def test_missing_checkpoints(self, tmp_path, capsys):
        code, _, err = run(capsys, "analyze", tmp_path, "pca")
        assert code == EXIT_IO and "ckpt_" in err


class TestProbe:
    def test_generate_run_score(self, tmp_path, capsys):
        code, gen, _ = run(capsys, "--out", tmp_path, "probe", "generate", "--condition", "incongruent", "-n", 100)
        assert code == EXIT_OK
        qfile = Path(gen) / "questions.jsonl"
        assert len(qfile.read_text().splitlines()) == 300
        code, ran, _ = run(capsys, "--out", tmp_path, "probe", "run", qfile, "--backend", "linear_oracle")
        table = (Path(ran) / "score.csv").read_text()
        assert code == EXIT_OK and "sem" in table.splitlines()[0]
        assert all(",1.0," in ln for ln in table.splitlines()[1:4])
        code, scored, _ = run(capsys, "--out", tmp_path, "probe", "score", Path(ran) / "answers.csv")
        assert (Path(scored) / "score.csv").read_text() == table

    def test_http_without_key(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("TILAB_API_KEY", raising=False)
        run(capsys, "--out", tmp_path, "probe", "generate", "-n", 1)
        q = next(tmp_path.glob("probe-generate-*/questions.jsonl"))
        code, _, err = run(capsys, "--out", tmp_path, "probe", "run", q, "--backend", "http_api",
                           "--backend-option", "endpoint=http://localhost:1/x", "--backend-option", "model=m")
        assert code == EXIT_CONFIG and "TILAB_API_KEY" in err
