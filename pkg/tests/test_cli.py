import json

import pytest
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from tests import helpers
from dnbands import cli
from dnbands.errors import DataQualityError
from dnbands.invariants import Switches
from dnbands.models import ClusterRow, Run
from dnbands.reports import read_csv


def _status(out, command):
    return json.loads((out / f"{command}.status.json").read_text())


def test_spectrum_constant_potential(tmp_path):
    path = helpers.write_config(tmp_path)
    code = cli.main(["spectrum", "--config", str(path), "--no-ledger"])
    out = tmp_path / "out"
    assert code == cli.EXIT_PASS
    assert _status(out, "spectrum")["exit_code"] == 0
    assert (out / "dtn.bin").stat().st_size == 16 * 169 * 169
    sidecar = json.loads((out / "dtn.json").read_text())
    status = _status(out, "spectrum")
    for document in (sidecar, status):
        assert document["config_hash"] == sidecar["config_hash"] != ""
        assert document["switches"] == "kappa=0.5,phi_arg=q0,sign=-"
    header, rows = read_csv(out / "spectrum.csv")
    rows = list(rows)
    assert header.startswith("# config_hash=")
    assert {int(r["k"]) for r in rows} == set(range(3, 9))
    assert all("oracle" in r for r in rows)
    bound = json.loads((out / "bound.json").read_text())
    assert bound["bound"]["passed"]
    assert bound["oracle_max_deviation"] < 1e-2


def test_bad_config_exits_with_config_code(tmp_path, capsys):
    path = helpers.write_config(tmp_path, alpha=5)
    assert cli.main(["spectrum", "--config", str(path), "--no-ledger"]) == cli.EXIT_CONFIG
    assert "alpha" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_missing_config_file(tmp_path):
    code = cli.main(["spectrum", "--config", str(tmp_path / "nope.json"), "--no-ledger"])
    assert code == cli.EXIT_CONFIG


def test_guard_errors_exit_with_guard_code(tmp_path, monkeypatch):
    def refuse(*args, **kwargs):
        raise DataQualityError("asymmetric matrix")

    monkeypatch.setattr(cli, "full_spectrum_clusters", refuse)
    path = helpers.write_config(tmp_path)
    assert cli.main(["spectrum", "--config", str(path), "--no-ledger"]) == cli.EXIT_GUARD
    assert _status(tmp_path / "out", "spectrum")["exit_code"] == cli.EXIT_GUARD


def test_command_line_overrides(tmp_path):
    path = helpers.write_config(tmp_path)
    other = tmp_path / "other"
    code = cli.main(["spectrum", "--config", str(path), "--out", str(other), "--k-min", "4", "--k-max", "6", "--no-ledger"])
    assert code == cli.EXIT_PASS
    _, rows = read_csv(other / "spectrum.csv")
    assert {int(r["k"]) for r in rows} == {4, 5, 6}
    assert not (tmp_path / "out").exists()


def test_ledger_records_run(tmp_path):
    Session, db_path = helpers.get_temp_session()
    try:
        path = helpers.write_config(tmp_path)
        assert cli.main(["spectrum", "--config", str(path)], session_factory=Session) == 0
        with Session() as s:
            run = s.query(Run).one()
            assert run.command == "spectrum"
            assert run.status == "passed"
            assert run.exit_code == 0
            assert run.finished_at is not None
            assert len(run.config_hash) == 16
            assert s.query(ClusterRow).filter_by(run_id=run.id).count() > 0
    finally:
        db_path.unlink()


def test_ledger_failure_does_not_fail_run(tmp_path, caplog):
    # no tables in this database, so every insert fails
    engine = create_engine(f"sqlite:///{tmp_path / 'empty.db'}", future=True)
    path = helpers.write_config(tmp_path)
    code = cli.main(["spectrum", "--config", str(path)], session_factory=sessionmaker(bind=engine))
    assert code == cli.EXIT_PASS
    assert "Run ledger disabled" in caplog.text


def test_invariants_constant_potential(tmp_path):
    path = helpers.write_config(tmp_path, potential=[{"monomial": [0, 0, 0], "coeff": 2.0}])
    assert cli.main(["invariants", "--config", str(path), "--no-ledger"]) == 0
    out = tmp_path / "out"
    _, rows = read_csv(out / "jet.csv")
    rows = list(rows)
    assert len(rows) == 12
    assert float(rows[0]["q0"]) == pytest.approx(1.0)
    assert float(rows[0]["q1"]) == pytest.approx(-1.5)
    assert float(rows[0]["W"]) == pytest.approx(0.0, abs=1e-12)
    report = json.loads((out / "invariants_one.json").read_text())
    assert report["beta0"] == pytest.approx(1.0)


def test_invariants_scan_writes_every_setting(tmp_path):
    path = helpers.write_config(tmp_path, test_functions=["id"], switches="scan")
    assert cli.main(["invariants", "--config", str(path), "--no-ledger"]) == 0
    jets = sorted(p.name for p in (tmp_path / "out").glob("jet_*.csv"))
    assert len(jets) == 8
    assert "jet_k0.5_q0_neg.csv" in jets


def test_verify_writes_reports(tmp_path):
    path = helpers.write_config(tmp_path, k_window=[3, 9], include_w=False)
    code = cli.main(["verify", "--config", str(path), "--no-ledger"])
    out = tmp_path / "out"
    assert code in (cli.EXIT_PASS, cli.EXIT_FAILED)
    report = json.loads((out / "verify.json").read_text())
    assert report["selected"] == "kappa=0.5,phi_arg=q0,sign=-"
    assert {r["phi"] for r in report["rows"]} == {"id", "square", "one"}
    assert all(r["advisory"] == (r["order"] == 2) for r in report["rows"])
    for name in ("moments_id.csv", "fits.json", "verify.csv"):
        assert (out / name).exists()


def test_starcheck_passes(tmp_path):
    path = helpers.write_config(tmp_path)
    assert cli.main(["starcheck", "--config", str(path), "--no-ledger"]) == cli.EXIT_PASS
    result = json.loads((tmp_path / "out" / "starcheck.json").read_text())
    assert result["passed"]
    assert result["exp_recursion_residual"] is None


def test_berezin_fit_selects_one_kappa(tmp_path):
    path = helpers.write_config(
        tmp_path,
        potential=[{"monomial": [0, 0, 2], "coeff": 1.0}],
        L_max=30,
        berezin_k_range=[10, 30, 2],
    )
    assert cli.main(["berezin", "--config", str(path), "--no-ledger"]) == cli.EXIT_PASS
    result = json.loads((tmp_path / "out" / "berezin_fit.json").read_text())
    assert result["leading_error"] < 1e-3
    assert result["kappa_matching"] == ["0.5"]
    assert result["matrix_element_variant"] in ("combined", "stationary")
    _, rows = read_csv(tmp_path / "out" / "berezin_kernel.csv")
    assert len(rows) == 5 * len(range(10, 31, 2))


def test_berezin_fails_when_kappa_is_not_resolved(tmp_path, monkeypatch):
    real = cli.symbol_jet

    def kappa_blind(q, switches=Switches(), **kwargs):
        return real(q, switches=Switches(0.5, switches.phi_arg, switches.delta_s2_sign), **kwargs)

    monkeypatch.setattr(cli, "symbol_jet", kappa_blind)
    path = helpers.write_config(
        tmp_path,
        potential=[{"monomial": [0, 0, 2], "coeff": 1.0}],
        L_max=16,
        berezin_k_range=[8, 16, 2],
    )
    assert cli.main(["berezin", "--config", str(path), "--no-ledger"]) == cli.EXIT_FAILED
    result = json.loads((tmp_path / "out" / "berezin_fit.json").read_text())
    assert len(result["kappa_matching"]) != 1
    assert not result["passed"]
