import csv
import json

import pytest

from splitpriv import harness as H
from splitpriv.cli import main
from splitpriv.report import build_report, markdown_tables

SMALL = """{
  // a desk-sized grid for tests
  "name": "tiny",
  "dataset": {"synth": {"sizes": {"train": 64, "dev": 40, "test": 16}, "markers_per_attr": 4}},
  "plm": {"embed_dim": 16, "num_blocks": 2, "num_heads": 2, "ffn_dim": 24},  /* small model */
  "session": {"epochs": 1},
  "eta_grid": [null],
  "attacks": ["eia_nn", "eia_union", "eia_opt", "aia"],
  "attack_options": {"eia_opt_samples": 4, "eia_opt_steps": 20, "aia_labeled": 16, "aia_targets": 16},
  # hash comments work too
  "url": "http://example.com/#not-a-comment"
}"""


@pytest.fixture()
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(SMALL.replace('  "url": "http://example.com/#not-a-comment"\n', '  "out": "x"\n'))
    return p


class TestConfig:
    def test_comments_stripped_but_strings_kept(self):
        d = json.loads(H.strip_json_comments(SMALL))
        assert d["url"] == "http://example.com/#not-a-comment"
        assert d["plm"]["embed_dim"] == 16

    def test_unknown_key(self):
        with pytest.raises(H.ExperimentError):
            H.ExperimentConfig.from_dict({"eta_gird": [1]})

    def test_unknown_attack(self):
        with pytest.raises(H.ExperimentError):
            H.ExperimentConfig.from_dict({"attacks": ["mia"]})

    def test_grid_size(self, cfg_path):
        cfg = H.ExperimentConfig.load(cfg_path)
        assert len(H.cells(cfg)) == 1
        cfg.eta_grid, cfg.cti_grid, cfg.repetitions = [None, 50, 60], [False, True], 2
        # CTI is skipped for the unprivatised column
        assert len(H.cells(cfg)) == (1 + 2 * 2) * 2

    def test_session_from_cell(self):
        s = H.ExperimentConfig().session_config(split=2, frozen=False, eta=50.0, cti=True, seed=7)
        assert (s.split, s.bottom_trainable, s.privacy.eta, s.privacy.cti_enabled) == (2, True, 50.0, True)
        assert s.shuffle_seed == s.lora_seed == s.privacy.seed == 7

    def test_reference_page_lists_defaults(self):
        page = H.reference_page()
        assert "eta_grid" in page and "lora_rank" in page and "zipf_exponent" in page


class TestRunCell:
    def test_rerun_identical(self, cfg_path):
        cfg = H.ExperimentConfig.load(cfg_path)
        cell = H.Cell(0, True, None, False, 0)
        a, _, _ = H.run_cell(cfg, cell)
        b, _, _ = H.run_cell(cfg, cell)
        for k in H.ROW_FIELDS:
            if k != "wall_time":
                assert a.get(k) == b.get(k), k
        assert a["EP_eia_nn"] == 0.0 and a["EP_eia_union"] == 0.0

    def test_zero_epochs_near_chance(self, cfg_path):
        cfg = H.ExperimentConfig.load(cfg_path)
        cfg.session = {"epochs": 0}
        cfg.dataset["synth"]["sizes"] = {"train": 64, "dev": 400, "test": 16}
        row, result, _ = H.run_cell(cfg, H.Cell(0, True, None, False, 0))
        assert result.customer.losses == []
        # an untrained head knows nothing about the classes
        assert abs(row["UA"] - 50) <= 15


class TestSweepAndReport:
    def test_sweep_outputs(self, cfg_path, tmp_path):
        cfg = H.ExperimentConfig.load(cfg_path)
        cfg.attacks = ["eia_nn"]
        cfg.eta_grid = [None, 40]
        cfg.spot_check = 1
        rows = H.sweep(cfg, tmp_path / "sw")
        assert len(rows) == 2 and all(r["status"] == "ok" for r in rows)
        for f in ("results.csv", "summary.csv", "curves_tiny.dat", "spotcheck.json", "config.json"):
            assert (tmp_path / "sw" / f).exists()
        checks = json.loads((tmp_path / "sw" / "spotcheck.json").read_text())
        assert len(checks) == 1 and checks[0]["reproduced"]
        md, figs = build_report(tmp_path / "sw" / "results.csv", tmp_path / "rep")
        assert md.exists() and figs and all(f.suffix == ".png" for f in figs)

    def test_two_etas_one_table_ascending(self):
        rows = [dict(dataset="d", s="0", frozen="True", eta=e, cti="False", UA=u, EP_eia_nn="", EP_eia_union="",
                     EP_eia_opt="", EP_aia="", seed="0", wall_time="1", status="ok")
                for e, u in (("70", "90"), ("45", "60"))]
        text = markdown_tables(H.aggregate(rows))
        assert text.count("| setting |") == 1
        header = next(l for l in text.splitlines() if l.startswith("| setting"))
        assert header == "| setting | η=45 | η=70 |"
        assert "| s=0, frozen | 60.00 | 90.00 |" in text

    def test_failed_rows_are_left_out(self):
        rows = [dict(dataset="d", s="0", frozen="True", eta="50", cti="False", UA="", seed="0",
                     status="failed: boom")]
        assert H.aggregate(rows) == []

    def test_empty_csv(self, tmp_path):
        p = tmp_path / "r.csv"
        H.write_rows(p, [])
        assert main(["report", str(p), "--out", str(tmp_path / "o")]) == 0
        assert "_No rows._" in (tmp_path / "o" / "report.md").read_text()

    def test_wrong_csv(self, tmp_path, capsys):
        p = tmp_path / "r.csv"
        p.write_text("a,b\n1,2\n")
        assert main(["report", str(p)]) == 2
        assert "not a result table" in capsys.readouterr().err


class TestCli:
    def test_finetune_then_attack(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["finetune", "--config", str(cfg_path), "--out", str(out), "--dump-payloads"]) == 0
        for f in ("losses.json", "model.spck", "transcript.jsonl", "row.csv", "attack_eia_nn.json"):
            assert (out / f).exists()
        row = json.loads((out / "row.json").read_text())
        assert main(["attack", str(out), "--attack", "eia_nn", "--out", str(tmp_path / "att")]) == 0
        again = json.loads((tmp_path / "att" / "attack_eia_nn.json").read_text())
        assert round(100 * again["empirical_privacy"], 4) == row["EP_eia_nn"]

    def test_finetune_matches_centralized(self, cfg_path, tmp_path):
        assert main(["finetune", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
        assert main(["centralized", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "losses.json").read_text() == (tmp_path / "b" / "losses.json").read_text()

    def test_attack_without_dumps(self, tmp_path, capsys):
        (tmp_path / "r").mkdir()
        assert main(["attack", str(tmp_path / "r")]) == 2
        assert "no payload dumps" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text('{"eta_grid": [}')
        assert main(["finetune", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_synth_and_defaults(self, cfg_path, tmp_path):
        assert main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "data")]) == 0
        lines = (tmp_path / "data" / "train.tsv").read_text().splitlines()
        assert len(lines) == 64 and len(lines[0].split("\t")) == 3
        assert main(["defaults", "--out", str(tmp_path / "ref.md")]) == 0
        assert (tmp_path / "ref.md").read_text().startswith("#")
