import json

import pytest

from fkc.cli import main
from fkc.errors import ConfigurationError
from fkc.scenario import SCENARIO_DIR, ScenarioParseError, build_model, load_scenario, parse_scenario, run_scenario


def _csv_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))}


def test_shipped_scenarios_parse():
    names = sorted(p.stem for p in SCENARIO_DIR.glob("*.yaml"))
    assert {"chain_reference", "quenched_reference", "negative_control"} <= set(names)
    for n in names:
        sc = load_scenario(n)
        assert isinstance(sc.seed, int) and sc.checks


def test_chain_reference_run(tmp_path, capsys):
    assert main(["run", "chain_reference", "--out", str(tmp_path)]) == 0
    files = {p.name for p in tmp_path.iterdir()}
    for stem in ("0_mixing", "1_eta", "2_qproc"):
        assert f"{stem}.json" in files
    verdict = json.loads((tmp_path / "verdict.json").read_text())
    assert [c["status"] for c in verdict["checks"]] == ["pass"] * 5
    text = (tmp_path / "0_mixing_coefficients.csv").read_bytes()
    assert b"\r" not in text and text.endswith(b"\n")


def test_rerun_is_byte_identical(tmp_path):
    sc = load_scenario("chain_reference")
    run_scenario(sc, tmp_path / "a")
    run_scenario(sc, tmp_path / "b")
    a, b = _csv_bytes(tmp_path / "a"), _csv_bytes(tmp_path / "b")
    assert a and a == b


def test_seed_flag_changes_mc_output(tmp_path):
    assert main(["smc", "--particles", "200", "--replicates", "5", "--seed", "1", "--out", str(tmp_path / "a")]) == 0
    assert main(["smc", "--particles", "200", "--replicates", "5", "--seed", "2", "--out", str(tmp_path / "b")]) == 0
    assert _csv_bytes(tmp_path / "a") != _csv_bytes(tmp_path / "b")


def test_negative_control_exits_1(capsys):
    assert main(["run", "negative_control"]) == 1
    assert "eta" in capsys.readouterr().err


def test_malformed_file_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nmodel: {kind: chain\nchecks: [x]\n")
    assert main(["run", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "line 3" in err and "column" in err


@pytest.mark.parametrize(
    "text",
    [
        "model: {kind: chain}\nchecks: [{check: eta}]\n",
        "seed: 1\nmodel: {kind: chain}\nchecks: [{check: nope}]\n",
        "seed: now\nmodel: {kind: chain}\nchecks: [{check: eta}]\n",
        "- just a list\n",
    ],
)
def test_schema_errors(text):
    with pytest.raises(ScenarioParseError):
        parse_scenario(text)


def test_bad_model_section_exits_2(tmp_path):
    f = tmp_path / "m.yaml"
    f.write_text("seed: 1\nmodel: {kind: spaceship}\nchecks: [{check: eta}]\n")
    assert main(["run", str(f)]) == 2
    with pytest.raises(ConfigurationError):
        build_model({"kind": "chain", "preset": "nope"})


def test_missing_file_exits_2():
    assert main(["run", "/nonexistent/scenario.yaml"]) == 2


def test_single_check_subcommands(tmp_path):
    assert main(["mixing", "--configs", "20", "--horizon", "20", "--out", str(tmp_path / "m")]) == 0
    assert main(["eta", "--model", "two_state", "--horizon", "40"]) == 0
    assert main(["qproc", "--configs", "10"]) == 0
    assert main(["quenched", "--out", str(tmp_path / "q")]) == 0
    assert (tmp_path / "q" / "0_quenched_segments.csv").exists()


def test_model_from_scenario_file(tmp_path):
    assert main(["mixing", "--model", str(SCENARIO_DIR / "chain_reference.yaml"), "--configs", "5"]) == 0


def test_diffusion_subcommand(tmp_path):
    out = tmp_path / "d"
    assert main(["diffusion", "--spec", "reference", "--check", "escape", "--paths", "500", "--out", str(out)]) == 0
    verdict = json.loads((out / "0_escape.json").read_text())
    assert verdict["status"] == "pass"


def test_tolerance_scale_can_break_a_check():
    # a negative scale asks for strictly positive slack beyond any roundoff
    assert main(["qproc", "--configs", "20", "--tolerance-scale=-1e9"]) == 1


def test_inconclusive_exits_0(tmp_path):
    f = tmp_path / "inc.yaml"
    f.write_text(
        "seed: 1\nmodel: {kind: diffusion, preset: brownian, dt: 0.01, horizon: 50.0}\n"
        "checks:\n  - {check: tv, x: 0.001, y: 0.002, t_list: [1.0, 50.0], n_paths: 5, method: plain}\n"
    )
    assert main(["run", str(f), "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "0_tv.json").read_text())["status"] == "inconclusive"


def test_verify_all_list(capsys):
    assert main(["verify-all", "--list"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 13 and lines[0].strip().startswith("1 ")


def test_verify_all_subset(capsys):
    assert main(["verify-all", "--only", "2", "4"]) == 0
    out = capsys.readouterr().out
    assert "[PASS]  2" in out and "[PASS]  4" in out and "2/2" in out
