import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fkhess import cli
from fkhess.config import ConfigError, load_config, parse_config, parse_override, write_config

BASE = """\
[task]
name = {task}
[manifold]
kind = {kind}
n = 3
[run]
T = 0.5
steps = 64
n_paths = 2048
seed = 7
"""


def _config(tmp_path, task="validate", kind="euclidean", extra=""):
    path = tmp_path / f"{task}_{kind}.ini"
    path.write_text(BASE.format(task=task, kind=kind) + extra)
    return str(path)


def _run(tmp_path, cfg, out="out", *args):
    out_dir = tmp_path / out
    code = cli.main(["run", cfg, "--out", str(out_dir), *args])
    return code, out_dir


def _read_matrix(filename):
    with open(filename) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == cli.CSV_HEADER
    n = max(int(r[0]) for r in rows[1:]) + 1
    value = np.zeros((n, n))
    for i, j, v, _ in rows[1:]:
        value[int(i), int(j)] = float(v)
    return value


def test_negative_horizon_is_a_config_error_naming_the_field(tmp_path, capsys):
    cfg = _config(tmp_path, extra="")
    code, _ = _run(tmp_path, cfg, "out", "--set", "run.T=-1")
    assert code == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "[run]" in err or "run.T" in err
    assert "T" in err and "positive" in err


def test_bad_value_in_file_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(BASE.format(task="validate", kind="euclidean").replace("T = 0.5", "T = -0.5"))
    assert cli.main(["run", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "bad.ini:7" in err and "T" in err


@pytest.mark.parametrize(
    "extra, field",
    [
        ("[run]\nbogus = 1\n", "bogus"),
        ("[weight]\nkind = quadratic\n", "sphere"),
    ],
)
def test_invalid_configs_exit_with_code_two(tmp_path, extra, field, capsys):
    text = BASE.format(task="kernel", kind="sphere" if field == "sphere" else "euclidean")
    if field == "bogus":
        text = text.replace("seed = 7", "seed = 7\nbogus = 1")
    else:
        text += extra
    path = tmp_path / "c.ini"
    path.write_text(text)
    assert cli.main(["run", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert field in capsys.readouterr().err


def test_missing_seed_is_rejected():
    with pytest.raises(ConfigError, match="seed"):
        parse_config("[task]\nname = kernel\n")


@pytest.mark.parametrize("kind", ["euclidean", "hyperbolic"])
def test_validate_task_passes_on_defaults(tmp_path, kind):
    code, out = _run(tmp_path, _config(tmp_path, kind=kind, extra="distance = 1.0\n"))
    assert code == cli.EXIT_OK
    with open(out / "validate.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(r["pass"] == "pass" for r in rows)


def test_results_are_byte_identical_on_rerun(tmp_path):
    cfg = _config(tmp_path, task="hess-kernel", kind="hyperbolic")
    _, a = _run(tmp_path, cfg, "a")
    _, b = _run(tmp_path, cfg, "b")
    assert (a / "results.json").read_bytes() == (b / "results.json").read_bytes()
    for name in ("normalized.csv", "log_hessian.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    timing = json.loads((a / "timing.json").read_text())
    assert timing["wall_time_seconds"] >= 0


def test_results_json_round_trip(tmp_path):
    cfg = _config(tmp_path, task="kernel", kind="hyperbolic")
    code, out = _run(tmp_path, cfg)
    assert code == cli.EXIT_OK
    doc = json.loads((out / "results.json").read_text())
    assert doc["schema"] == cli.SCHEMA_VERSION
    assert doc["seed"] == 7 and doc["task"] == "kernel"
    assert doc["config"]["run"]["T"] == 0.5
    cfg_obj = load_config(cfg)
    in_memory = cli.build_document(cfg_obj, cli.run_task(cfg_obj))
    assert doc == json.loads(json.dumps(in_memory))
    est = doc["estimates"]["kernel"]
    assert math.isclose(est["value"], doc["constants"]["exact_kernel"], rel_tol=0.01)


def test_hessian_csv_is_symmetric_within_noise(tmp_path):
    cfg = _config(tmp_path, task="hess-kernel", kind="hyperbolic", extra="distance = 1.0\n")
    code, out = _run(tmp_path, cfg)
    assert code == cli.EXIT_OK
    value = _read_matrix(out / "normalized.csv")
    with open(out / "normalized.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    stderr = np.zeros_like(value)
    for i, j, _, s in rows:
        stderr[int(i), int(j)] = float(s)
    assert np.all(np.abs(value - value.T) <= 4 * (stderr + stderr.T))


def test_worker_count_does_not_change_estimates(tmp_path):
    cfg = _config(tmp_path, task="hess-semigroup", kind="hyperbolic", extra="function = gauss\n")
    _, one = _run(tmp_path, cfg, "one", "--set", "run.workers=1")
    _, two = _run(tmp_path, cfg, "two", "--set", "run.workers=2")
    a = json.loads((one / "results.json").read_text())["estimates"]
    b = json.loads((two / "results.json").read_text())["estimates"]
    assert a == b


def test_overrides_are_applied_and_echoed(tmp_path):
    cfg = _config(tmp_path, task="kernel", kind="hyperbolic")
    _, out = _run(tmp_path, cfg, "out", "--set", "run.seed=11", "--set", "run.distance=0.5")
    doc = json.loads((out / "results.json").read_text())
    assert doc["seed"] == 11 and doc["config"]["run"]["distance"] == 0.5


def test_dump_paths_writes_requested_paths(tmp_path):
    cfg = _config(tmp_path, task="kernel", kind="hyperbolic")
    code, out = _run(tmp_path, cfg, "out", "--dump-paths", "3")
    assert code == cli.EXIT_OK
    with open(out / "paths.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["path"] for r in rows} == {"0", "1", "2"}
    # every path carries the full time grid, which the bridge refines near the pin
    for b in "012":
        steps = [int(r["step"]) for r in rows if r["path"] == b]
        assert steps == list(range(len(steps))) and len(steps) >= 65


def test_bounds_suite_writes_report(tmp_path):
    cfg = _config(tmp_path, task="bounds-suite", kind="hyperbolic", extra="distance = 1.0\n")
    code, out = _run(tmp_path, cfg)
    assert code == cli.EXIT_OK
    with open(out / "bounds.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["name", "lhs", "rhs", "ratio", "stderr", "pass"]
    names = {r["name"] for r in rows}
    assert {"w2_martingale_moment", "product_term_moment", "stroock_gaussian_upper", "exponential_integrability"} <= names


def test_parse_override_rejects_malformed_items():
    assert parse_override("run.T=2") == ("run", "T", "2")
    for bad in ("runT=2", "run.T", "=2"):
        with pytest.raises(ConfigError):
            parse_override(bad)


@settings(max_examples=40, deadline=None)
@given(
    task=st.sampled_from(["kernel", "hess-kernel", "hess-semigroup", "validate"]),
    kind=st.sampled_from(["euclidean", "hyperbolic", "warped"]),
    T=st.floats(0.05, 5.0),
    half_steps=st.integers(8, 200),
    seed=st.integers(0, 2**31),
    distance=st.floats(0.0, 3.0),
)
def test_config_write_parse_round_trip(task, kind, T, half_steps, seed, distance):
    text = BASE.format(task=task, kind=kind)
    cfg = parse_config(text, overrides=[f"run.T={T!r}", f"run.steps={2 * half_steps}", f"run.seed={seed}",
                                        f"run.distance={distance!r}"])
    again = parse_config(write_config(cfg))
    assert again.echo() == cfg.echo()
