import csv
import json
from pathlib import Path

import numpy as np
import pytest

from smas import cli, io
from smas import inference as inf
from smas import statespace as ss
from smas import simulate as sim

GOLDEN = Path(__file__).parent / "golden"
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _dwell(family, theta):
    entry = {"family": family, "theta": theta}
    if family == "snb":
        entry["nu"] = 2.0
    return entry


def _two_state(dwell1="geom", dwell2="geom", **extra):
    cfg = {
        "n_states": 2,
        "label": f"{dwell1}-{dwell2}",
        "dwell": [_dwell(dwell1, 0.3), _dwell(dwell2, 0.4)],
        "structure": {"phi": "c", "p": "const", "lambda": "const", "psi": "const"},
        "values": {"phi": [0.85, 0.75], "p": 0.4, "lambda": 0.3},
        "optimizer": {"n_starts": 1, "seed": 3},
    }
    cfg.update(extra)
    return cfg


def _write(tmp_path, name, data):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


# -- parsing ------------------------------------------------------------------------

def test_parse_release_resight_and_recovery():
    data = io.parse_history_lines(["3 0 0 2 3 0 0 0 D"], 3)
    h = data.histories[0]
    assert h.first == 0
    assert h.symbols[0] == 3
    assert h.symbols[3] == 2 and h.symbols[4] == 3
    assert h.symbols[-1] == ss.DEAD
    assert data.n_occasions == 9


def test_parse_late_first_capture_and_unknown_state():
    late = io.parse_history_lines(["0 0 1 0"], 2).histories[0]
    assert late.first == 2
    unk = io.parse_history_lines(["1 u 1"], 2).histories[0]
    assert unk.symbols == (1, ss.UNKNOWN, 1)
    assert io.parse_history_lines(["1 -1 1"], 2).histories[0].symbols == unk.symbols


def test_parse_ids_comments_and_blank_lines():
    lines = ["# header", "", "a: 1 0 2", "b: 0 2 D"]
    data = io.parse_history_lines(lines, 2)
    assert [h.id for h in data.histories] == ["a", "b"]


@pytest.mark.parametrize("lines, lineno", [
    (["1 0 0", "1 D 2"], 2),
    (["1 0 0", "1 0 0", "4 0 0"], 3),
    (["1 0 0", "1 0"], 2),
    (["1 x 0"], 1),
])
def test_parse_errors_report_line_numbers(lines, lineno):
    with pytest.raises(io.ParseError) as err:
        io.parse_history_lines(lines, 3)
    assert err.value.line == lineno
    assert f":{lineno}:" in str(err.value)


def test_history_file_round_trip(tmp_path):
    text = "a: 1 0 u 2 D\nb: 0 2 2 0 0\nc: 0 0 0 1 1\n"
    src = tmp_path / "h.txt"
    src.write_text(text)
    data = io.parse_histories(src, 2)
    out = tmp_path / "copy.txt"
    io.write_histories(out, data)
    assert out.read_text() == text
    assert np.array_equal(io.parse_histories(out, 2).obs, data.obs)


# -- configs ------------------------------------------------------------------------

def test_unknown_config_keys_are_rejected():
    with pytest.raises(io.ConfigError):
        io.config_from_dict(dict(_two_state(), colour="blue"))
    with pytest.raises(io.ConfigError):
        io.config_from_dict(dict(_two_state(), optimizer={"n_strats": 2}))


def test_shipped_configs_load():
    for path in CONFIGS.glob("*.json"):
        cfg = io.load_config(path)
        assert cfg.parameter_map(20).n_free > 0


# -- command line -------------------------------------------------------------------

def _simulate(tmp_path, cfg_path, n=200, t=8, seed=5, name="data.txt"):
    out = tmp_path / name
    code = cli.main(["simulate", "--config", cfg_path, "--out", str(out), "--n", str(n),
                     "--t", str(t), "--seed", str(seed), "--quiet"])
    assert code == cli.EXIT_OK
    return out


def test_simulate_writes_requested_histories(tmp_path):
    out = _simulate(tmp_path, str(CONFIGS / "sim3.json"), n=500, t=20)
    lines = out.read_text().splitlines()
    assert len(lines) == 500
    assert all(len(line.split()) == 21 for line in lines)
    truth = json.loads((tmp_path / "data.truth.json").read_text())
    assert truth["n_occasions"] == 20


def test_simulate_is_reproducible(tmp_path):
    cfg = str(CONFIGS / "sim3.json")
    a = _simulate(tmp_path, cfg, name="a.txt")
    b = _simulate(tmp_path, cfg, name="b.txt")
    c = _simulate(tmp_path, cfg, seed=6, name="c.txt")
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_simulate_rejects_empty_study(tmp_path):
    code = cli.main(["simulate", "--config", str(CONFIGS / "sim3.json"),
                     "--out", str(tmp_path / "x.txt"), "--n", "0", "--t", "5"])
    assert code == cli.EXIT_CONFIG
    assert not (tmp_path / "x.txt").exists()


def test_bad_config_and_malformed_data_exit_codes(tmp_path):
    bad = _write(tmp_path, "bad.json", dict(_two_state(), bogus=1))
    assert cli.main(["simulate", "--config", bad, "--out", str(tmp_path / "o.txt"),
                     "--n", "5", "--t", "4"]) == cli.EXIT_CONFIG
    data = tmp_path / "broken.txt"
    data.write_text("1 0 2\n1 D 1\n")
    good = _write(tmp_path, "good.json", _two_state())
    assert cli.main(["fit", "--config", good, "--data", str(data),
                     "--out", str(tmp_path / "fit.json"), "--quiet"]) == cli.EXIT_CONFIG
    assert cli.main(["fit", "--config", good, "--data", str(tmp_path / "missing.txt"),
                     "--out", str(tmp_path / "fit.json"), "--quiet"]) == cli.EXIT_RUNTIME
    assert cli.main(["nonsense"]) == cli.EXIT_CONFIG


def test_fully_fixed_fit_reports_loglik_only(tmp_path):
    truth = _two_state()
    truth["structure"] = {"phi": "fixed", "p": "fixed", "lambda": "fixed", "psi": "fixed"}
    truth["dwell"] = [dict(d, fixed=True) for d in truth["dwell"]]
    truth["init_mode"] = "stationary"
    cfg = _write(tmp_path, "fixed.json", truth)
    data = _simulate(tmp_path, cfg, n=100, t=6)
    out = tmp_path / "fit.json"
    assert cli.main(["fit", "--config", cfg, "--data", str(data), "--out", str(out), "--quiet"]) == 0
    res = json.loads(out.read_text())
    assert res["n_params"] == 0
    assert res["aic"] == pytest.approx(-2 * res["loglik"], rel=1e-12)
    report = (tmp_path / "fit.report.txt").read_text().splitlines()
    assert len(report) == 3 and report[0].startswith("log-likelihood")


def test_fit_writes_estimates_and_intervals(tmp_path):
    cfg = _write(tmp_path, "m.json", _two_state())
    data = _simulate(tmp_path, cfg, n=300, t=8)
    out = tmp_path / "fit.json"
    code = cli.main(["fit", "--config", cfg, "--data", str(data), "--out", str(out),
                     "--dwell-rmax", "6", "--quiet"])
    assert code == cli.EXIT_OK
    res = json.loads(out.read_text())
    assert res["converged"] and res["n_params"] == len(res["free_labels"])
    with open(tmp_path / "fit.dwell_ci.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12
    for row in rows:
        assert float(row["lo"]) <= float(row["d"]) <= float(row["hi"])


def test_fit_signals_non_convergence(tmp_path):
    cfg = _write(tmp_path, "m.json", _two_state(optimizer={"n_starts": 1, "max_iter": 1, "seed": 0}))
    data = _simulate(tmp_path, cfg, n=200, t=8)
    code = cli.main(["fit", "--config", cfg, "--data", str(data),
                     "--out", str(tmp_path / "fit.json"), "--quiet"])
    assert code == cli.EXIT_NOT_CONVERGED
    assert json.loads((tmp_path / "fit.json").read_text())["converged"] is False


def test_select_single_and_duplicate_candidates(tmp_path):
    cfg = _write(tmp_path, "geom.json", _two_state())
    data = _simulate(tmp_path, cfg, n=200, t=8)
    out = tmp_path / "sel.txt"
    assert cli.main(["select", "--config", cfg, "--data", str(data), "--out", str(out), "--quiet"]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 2 and lines[1].endswith("0.0")

    twin = _write(tmp_path, "twin.json", _two_state())
    assert cli.main(["select", "--config", cfg, twin, "--data", str(data),
                     "--out", str(out), "--quiet"]) == 0
    with open(tmp_path / "sel.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert rows[0]["aic"] == rows[1]["aic"]
    assert float(rows[0]["delta_aic"]) == float(rows[1]["delta_aic"]) == 0.0


def test_select_candidate_grid(tmp_path):
    cfgs = [_write(tmp_path, f"{a}_{b}.json", _two_state(a, b))
            for a in ("geom", "snb") for b in ("geom", "snb")]
    data = _simulate(tmp_path, cfgs[0], n=200, t=8)
    out = tmp_path / "sel.txt"
    assert cli.main(["select", "--config", *cfgs, "--data", str(data), "--out", str(out), "--quiet"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].split() == ["State", "1", "State", "2", "AIC", "dAIC"]
    assert len(lines) == 5
    aics = [float(line.split()[-2]) for line in lines[1:]]
    assert aics == sorted(aics)


def test_selection_table_matches_golden_file():
    reported = [
        ("geom(0.028)", "geom(0.382)", 5539.211),
        ("sNB(0.581,0.017)", "geom(0.409)", 5538.585),
        ("geom(0.029)", "sNB(0.612,0.287)", 5540.508),
        ("sNB(0.536,0.016)", "sNB(0.463,0.265)", 5539.144),
    ]
    rows = [inf.SelectionRow("", [a, b], aic, 0.0, -aic / 2, 4, True) for a, b, aic in reported]
    ordered = [rows[i] for i in inf.rank_rows(rows)]
    text = inf.format_selection_table(ordered)
    assert text.encode() == (GOLDEN / "selection_table.txt").read_bytes()


def test_study_command(tmp_path):
    cfg = _write(tmp_path, "m.json", _two_state())
    out = tmp_path / "study.csv"
    code = cli.main(["study", "--config", cfg, "--out", str(out), "--n", "150", "--t", "6",
                     "--replicates", "2", "--seed", "1", "--quiet"])
    assert code == cli.EXIT_OK
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert rows and set(rows[0]) == {"parameter", "map", "truth", "MRB", "MSD_sd", "MSD_mean_se", "n_ok"}
    for row in rows:
        assert np.isfinite(float(row["MRB"]))
    assert cli.main(["study", "--config", cfg, "--out", str(out), "--n", "10", "--t", "6",
                     "--replicates", "0"]) == cli.EXIT_CONFIG


def test_dump_command(tmp_path):
    outdir = tmp_path / "dump"
    assert cli.main(["dump", "--config", str(CONFIGS / "sim3.json"), "--out", str(outdir),
                     "--t", "5"]) == 0
    gamma = np.loadtxt(outdir / "transition.csv", delimiter=",")
    assert gamma.shape[0] == gamma.shape[1]
    assert np.allclose(gamma.sum(axis=1), 1.0)
    pi = np.loadtxt(outdir / "stationary.csv", delimiter=",", skiprows=1)[:, 1]
    assert pi.sum() == pytest.approx(1.0, abs=1e-12)


def test_wald_intervals_cover_truth():
    cfg = io.config_from_dict(_two_state())
    truth = cfg.truth(10)
    pmap = cfg.parameter_map(10)
    hits = total = 0
    for seed in range(3):
        data = sim.simulate_dataset(sim.StudyDesign(800, 10, truth, seed=seed), 0)
        res = inf.fit(data, pmap, inf.FitOptions(n_starts=1, seed=seed))
        for q in pmap.quantities():
            _, _, lo, hi = inf.delta_interval(res, q.fn, q.link)
            hits += lo <= q.fn(truth) <= hi
            total += 1
    assert hits / total >= 0.8
