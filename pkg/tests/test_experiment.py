import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from sgnep.cli import main
from sgnep.errors import ConfigError
from sgnep.experiment import (
    CSV_COLUMNS,
    OUTPUT_ROOT_ENV,
    load_config,
    metrics_csv,
    moving_average,
    parse_schedule,
    read_metrics,
    validate_config,
)
from sgnep.solver import Schedules

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMALL = CONFIGS / "quadratic_small.toml"


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    return tmp_path


def base_raw(**over):
    raw = {
        "game": {"kind": "quadratic", "seed": 0},
        "splitting": {"rho_mu": 1.0, "rho_z": 1.0, "mode": "assumption6"},
        "schedule": {"gamma_kind": "constant", "gamma": 0.5, "T_kind": "power", "scale": 1.0, "b": 2.1, "floor": 1},
        "run": {"K": 5},
    }
    for key, value in over.items():
        section, name = key.split("__")
        raw.setdefault(section, {})[name] = value
    return raw


def test_shipped_configs_validate():
    for path in sorted(CONFIGS.glob("*.toml")):
        cfg = load_config(path)
        assert cfg.run["K"] >= 1 and cfg.name == path.stem


def test_defaults_filled():
    cfg = validate_config(base_raw())
    assert cfg.graph["kind"] == "complete" and cfg.run["seed"] == 0 and cfg.run["ma_window"] == 30
    assert cfg.splitting["safety"] == 0.99 and cfg.schedule["unsafe_schedule"] is False
    assert cfg.schedules().T_at(2) == int(np.ceil(2**2.1)) + 1


@pytest.mark.parametrize(
    "raw, field",
    [
        (base_raw(run__iterations=3), "run.iterations"),
        (base_raw(game__kind="bertrand"), "game.kind"),
        (base_raw(game__cap=3.0), "game.cap"),
        (base_raw(run__K="many"), "run.K"),
        (base_raw(run__K=0), "run.K"),
        (base_raw(splitting__rho_mu=-1.0), "splitting.rho_mu"),
        (base_raw(splitting__mode="explicit"), "splitting.tau1"),
        (base_raw(graph__kind="game"), "graph.kind"),
        (base_raw(graph__kind="edges"), "graph.edges"),
        ({**base_raw(), "extras": {}}, "extras"),
        (base_raw(schedule__gamma_kind="power", schedule__a=1.0, schedule__b=0.0), "schedule"),
        (base_raw(schedule__gamma=1.5), "schedule"),
    ],
)
def test_config_errors_name_the_field(raw, field):
    with pytest.raises(ConfigError) as info:
        validate_config(raw)
    assert info.value.field == field


def test_unsafe_schedule_opt_in():
    raw = base_raw(schedule__T_kind="constant", schedule__T=20)
    with pytest.raises(ConfigError):
        validate_config(raw)
    raw["schedule"]["unsafe_schedule"] = True
    assert not validate_config(raw).schedules().summable


def test_integers_promote_to_floats():
    cfg = validate_config(base_raw(splitting__rho_mu=2))
    assert isinstance(cfg.splitting["rho_mu"], float)


def test_malformed_toml(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[game\nkind = 1")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_parse_schedule():
    base = Schedules()
    assert parse_schedule("const:20", base).T_at(500) == 20
    s = parse_schedule("power:0.1:1:20", base)
    assert s.T_at(100) == 30 and s.gamma == base.gamma
    for bad in ("linear:3", "const:x", "power:1:2"):
        with pytest.raises(ConfigError):
            parse_schedule(bad, base)


def test_moving_average_is_trailing():
    ma = moving_average(np.arange(1.0, 7.0), 3)
    assert np.allclose(ma, [1.0, 1.5, 2.0, 3.0, 4.0, 5.0])


def test_csv_roundtrip_keeps_full_precision(tmp_path):
    rec = {c: 0.1 + i / 3 for i, c in enumerate(CSV_COLUMNS)}
    rec["k"], rec["inner_steps"] = 1, 7
    path = tmp_path / "m.csv"
    path.write_text(metrics_csv([rec]))
    back = read_metrics(path)
    assert all(back[c][0] == rec[c] for c in CSV_COLUMNS)


def test_cli_run_writes_artifacts(out_root, capsys):
    assert main(["run", str(SMALL)]) == 0
    out = out_root / "quadratic_small"
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 1 + 60
    meta = json.loads((out / "meta.json").read_text())
    assert meta["status"] == "completed" and meta["reference"]["method"] == "oracle"
    assert meta["probe"]["trials"] == 20 and meta["phi"]["min_eig"] > 0
    assert (out / "metrics.png").stat().st_size > 0
    assert "artifacts:" in capsys.readouterr().out


def test_cli_run_is_bytewise_deterministic(out_root):
    assert main(["run", str(SMALL)]) == 0
    first = (out_root / "quadratic_small" / "metrics.csv").read_bytes()
    shutil.rmtree(out_root / "quadratic_small")
    assert main(["run", str(SMALL)]) == 0
    assert (out_root / "quadratic_small" / "metrics.csv").read_bytes() == first


def test_cli_compare_identical_schedules_agree(out_root, tmp_path):
    cfg = tmp_path / "cmp.toml"
    cfg.write_text(SMALL.read_text().replace("K = 60", "K = 15"))
    assert main(["compare", str(cfg), "--schedules", "power:1:2.1:5,power:1:2.1:5"]) == 0
    out = out_root / "cmp" / "compare"
    rows = [r.split(",") for r in (out / "compare.csv").read_text().splitlines()]
    assert len(rows) == 16 and all(r[1] == r[2] for r in rows[1:])
    assert set(json.loads((out / "meta.json").read_text())["runs"].values()) == {"run0", "run1"}


def test_cli_compare_refuses_unsafe_schedule(out_root, capsys):
    assert main(["compare", str(SMALL), "--schedules", "const:20"]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_reference_and_probe(out_root, capsys):
    assert main(["reference", str(SMALL)]) == 0
    ref = json.loads((out_root / "quadratic_small" / "reference.json").read_text())
    assert ref["method"] == "oracle" and ref["residual"] < 1e-8
    capsys.readouterr()
    assert main(["probe", str(SMALL), "--trials", "10", "--draws", "200"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["monotonicity"]["eta"] > 0 and rep["oracle"]["draws"] == 200


def test_cli_reports_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('[game]\nkind = "quadratic"\ncolour = "red"\n')
    assert main(["run", str(bad)]) == 2
    assert "game.colour" in capsys.readouterr().err
