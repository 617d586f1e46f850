import hashlib
import json
import math
from pathlib import Path

import pytest
import yaml

from mrp.cli import main
from mrp.config import from_dict, load_config, validate
from mrp.errors import ConfigError
from mrp.presets import FEMALE_COVARIATE, PREFERENCE_FORMULA, TURNOUT_FORMULA

FACTORS = [
    {"name": "state", "levels": ["S0", "S1", "S2"]},
    {"name": "gender", "levels": ["Female", "Male"]},
    {"name": "age", "levels": ["a1", "a2", "a3"]},
    {"name": "educ", "levels": ["e1", "e2", "e3", "e4"]},
]
SYNTH = {
    "factors": FACTORS,
    "turnout_formula": "cbind(vote, no) ~ 1 + (1 | state) + (1 | age) + (1 | educ)",
    "preference_formula": "cbind(yes, no) ~ 1 + (1 | state) + (1 | gender) + (1 | age) + (1 | educ) + (1 | educ:age)",
    "output_dir": "out",
    "seed": 4,
    "synth": {"poll_size": 4000, "bias": {"educ": {"e4": 1.0}}},
}


def write_config(tmp_path, doc, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return p


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def digests(root: Path):
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"
    }


class TestCheck:
    def test_election_term_table(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {
            "factors": "election",
            "covariates": {"female": FEMALE_COVARIATE},
            "turnout_formula": TURNOUT_FORMULA,
            "preference_formula": PREFERENCE_FORMULA,
        })
        before = sorted(tmp_path.rglob("*"))
        code, out, _ = run(["check", "-c", cfg], capsys)
        assert code == 0
        lines = out.splitlines()
        assert "state:educ:age 1000" in lines
        assert "educ:age:gender 40" in lines
        assert "marstat:state 150" in lines
        assert "1 + state_pres_vote | eth 4" in lines
        assert sorted(tmp_path.rglob("*")) == before

    def test_bad_formula(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"factors": FACTORS, "preference_formula": "cbind(y, n) ~ 1 +"})
        code, _, err = run(["check", "-c", cfg], capsys)
        assert code == 1
        diag = json.loads(err.strip().splitlines()[-1])
        assert diag["error"] == "config"
        assert "byte 17" in diag["message"]

    def test_missing_file(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"factors": FACTORS, "frame": "nope.csv"})
        code, _, err = run(["check", "-c", cfg], capsys)
        assert code == 1
        assert json.loads(err)["exit_code"] == 1

    def test_bad_data_is_exit_2(self, tmp_path, capsys):
        (tmp_path / "frame.csv").write_text("state,gender,age,educ,population\nS9,Male,a1,e1,5\n")
        cfg = write_config(tmp_path, {"factors": FACTORS, "frame": "frame.csv"})
        code, _, err = run(["check", "-c", cfg], capsys)
        assert code == 2
        assert json.loads(err)["error"] == "data"

    def test_env_default(self, tmp_path, capsys, monkeypatch):
        cfg = write_config(tmp_path, {"factors": FACTORS, "preference_formula": "cbind(y, n) ~ 1 + (1 | state:age)"})
        monkeypatch.setenv("MRP_CONFIG", str(cfg))
        code, out, _ = run(["check"], capsys)
        assert code == 0
        assert "state:age 9" in out.splitlines()

    def test_no_config(self, capsys, monkeypatch):
        monkeypatch.delenv("MRP_CONFIG", raising=False)
        code, _, err = run(["check"], capsys)
        assert code == 1

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit):
            main(["frobnicate"])


class TestPipeline:
    def test_step_by_step(self, tmp_path, capsys):
        cfg = write_config(tmp_path, SYNTH)
        out = tmp_path / "out"
        for cmd in ("simulate", "fit", "predict", "calibrate"):
            code, _, err = run([cmd, "-c", cfg], capsys)
            assert code == 0, err
        for f in ("frame.csv", "poll_preference.csv", "fit_turnout.json", "predictions.csv",
                  "calibrated_predictions.csv", "calibration.csv"):
            assert (out / f).exists()
        code, _, _ = run(["aggregate", "-c", cfg, "--by", "educ", "--by", "state,gender"], capsys)
        assert code == 0
        assert (out / "aggregate_educ.csv").exists()
        assert (out / "gender_gap_educ.csv").exists()
        assert (out / "aggregate_state_gender.csv").exists()
        assert not (out / "gender_gap_state_gender.csv").exists()
        cal = (out / "calibration.csv").read_text().splitlines()[1:]
        assert all(float(r.split(",")[3]) < 1e-8 and float(r.split(",")[4]) < 1e-8 for r in cal)

    def test_non_convergence_is_exit_3(self, tmp_path, capsys):
        cfg = write_config(tmp_path, SYNTH)
        assert run(["simulate", "-c", cfg], capsys)[0] == 0
        code, _, err = run(["fit", "-c", cfg, "--max-iter", "2"], capsys)
        assert code == 3
        assert json.loads(err.strip().splitlines()[-1])["error"] == "numeric"

    def test_predict_without_fit(self, tmp_path, capsys):
        cfg = write_config(tmp_path, SYNTH)
        run(["simulate", "-c", cfg], capsys)
        code, _, _ = run(["predict", "-c", cfg], capsys)
        assert code == 1

    def test_hmc_path(self, tmp_path, capsys):
        doc = dict(SYNTH, hmc={"enabled": True, "draws": 30, "warmup": 10, "step_size": 0.02, "leapfrog_steps": 5})
        cfg = write_config(tmp_path, doc)
        assert run(["simulate", "-c", cfg], capsys)[0] == 0
        assert run(["fit", "-c", cfg], capsys)[0] == 0
        assert (tmp_path / "out" / "samples_preference.npy").exists()
        assert run(["predict", "-c", cfg], capsys)[0] == 0

    def test_seed_flag_overrides(self, tmp_path, capsys):
        cfg = write_config(tmp_path, SYNTH)
        run(["simulate", "-c", cfg, "-o", tmp_path / "a"], capsys)
        run(["simulate", "-c", cfg, "-o", tmp_path / "b", "--seed", "5"], capsys)
        a = (tmp_path / "a" / "poll_preference.csv").read_text()
        b = (tmp_path / "b" / "poll_preference.csv").read_text()
        assert a != b


class TestAggregateCommand:
    def test_two_cell_hand_sum(self, tmp_path, capsys):
        factors = [{"name": "educ", "levels": ["HS", "College"]}, {"name": "age", "levels": ["young", "old"]}]
        (tmp_path / "frame.csv").write_text("educ,age,population\nHS,young,300\nHS,old,100\n")
        (tmp_path / "preds.csv").write_text(
            "educ,age,population,turnout,preference\nHS,young,300,0.25,0.8\nHS,old,100,0.75,0.4\n"
        )
        cfg = write_config(tmp_path, {"factors": factors, "frame": "frame.csv", "output_dir": "out"})
        code, _, _ = run(["aggregate", "-c", cfg, "--by", "educ", "--weighting", "voters",
                          "--input", tmp_path / "preds.csv"], capsys)
        assert code == 0
        rows = (tmp_path / "out" / "aggregate_educ.csv").read_text().splitlines()
        header, row = rows[0].split(","), rows[1].split(",")
        got = dict(zip(header, row))
        # voters: 300 * 0.25 = 75 and 100 * 0.75 = 75; votes 60 and 30
        assert got["educ"] == "HS"
        assert got["population"] == "400"
        assert float(got["expected_voters"]) == 150.0
        assert float(got["expected_votes"]) == 90.0
        assert float(got["vote_share"]) == 0.6
        assert float(got["turnout_rate"]) == 0.375
        assert len(rows) == 2


class TestReport:
    def test_deterministic(self, tmp_path, capsys):
        cfg = write_config(tmp_path, SYNTH)
        assert run(["report", "-c", cfg, "-o", tmp_path / "r1"], capsys)[0] == 0
        assert run(["report", "-c", cfg, "-o", tmp_path / "r2"], capsys)[0] == 0
        d1, d2 = digests(tmp_path / "r1"), digests(tmp_path / "r2")
        assert d1 == d2
        m1 = json.loads((tmp_path / "r1" / "manifest.json").read_text())
        m2 = json.loads((tmp_path / "r2" / "manifest.json").read_text())
        assert m1["outputs"] == m2["outputs"]
        assert m1["config_sha256"] == m2["config_sha256"]
        assert set(m1["outputs"]) == set(d1)

    def test_report_tables(self, tmp_path, capsys):
        cfg = write_config(tmp_path, SYNTH)
        assert run(["report", "-c", cfg], capsys)[0] == 0
        tables = {p.name for p in (tmp_path / "out" / "tables").iterdir()}
        for name in ("national.csv", "by_state.csv", "by_educ.csv", "by_age.csv",
                     "gender_gap_by_educ_age.csv", "turnout_gender_gap_by_state.csv"):
            assert name in tables
        gap = (tmp_path / "out" / "tables" / "gender_gap_by_educ_age.csv").read_text().splitlines()
        assert gap[0] == "educ,age,male_vote_share,female_vote_share,gap"
        assert len(gap) == 1 + 12
        for line in gap[1:]:
            m, f, g = map(float, line.split(",")[2:])
            assert math.isclose(g, m - f, abs_tol=0)


class TestConfig:
    def test_relative_paths(self, tmp_path):
        (tmp_path / "sub").mkdir()
        p = write_config(tmp_path / "sub", {"factors": FACTORS, "frame": "f.csv", "output_dir": "o"})
        cfg = load_config(p)
        assert cfg.frame == tmp_path / "sub" / "f.csv"
        assert cfg.output_dir == tmp_path / "sub" / "o"

    def test_defaults(self):
        cfg = from_dict({"factors": FACTORS})
        assert cfg.optimizer.tol == 1e-8
        assert cfg.hmc.draws == 1000
        assert cfg.hmc.warmup == 500
        assert not cfg.hmc.enabled

    @pytest.mark.parametrize(
        "doc",
        [
            {"factors": FACTORS, "bogus": 1},
            {"factors": FACTORS, "optimizer": {"speed": 3}},
            {"factors": FACTORS, "weighting": "both"},
            {},
            {"factors": [{"name": "x", "levels": []}]},
        ],
    )
    def test_rejects(self, doc):
        with pytest.raises(ConfigError):
            validate(from_dict(doc))

    def test_invalid_yaml(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("factors: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_digest_stable(self):
        a = from_dict({"factors": FACTORS, "seed": 1})
        b = from_dict({"seed": 1, "factors": FACTORS})
        assert a.digest() == b.digest()
