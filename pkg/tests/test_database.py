from sqlalchemy import create_engine, text

from tests import helpers  # noqa: F401  # ensures project root on path
from dnbands import database


def test_init_db_adds_late_columns(tmp_path, monkeypatch):
    # create legacy ledger lacking the switch, output and exit-code columns
    db_path = tmp_path / "legacy.db"
    engine = create_engine(f"sqlite:///{db_path}")
    with engine.begin() as conn:
        conn.execute(
            text(
                "CREATE TABLE runs (id INTEGER PRIMARY KEY, command VARCHAR NOT NULL, "
                "config_hash VARCHAR(16) NOT NULL, version VARCHAR NOT NULL, status VARCHAR NOT NULL, "
                "started_at DATETIME, finished_at DATETIME)"
            )
        )
        conn.execute(
            text(
                "CREATE TABLE invariant_rows (id INTEGER PRIMARY KEY, run_id INTEGER NOT NULL, "
                "phi VARCHAR NOT NULL, \"order\" INTEGER NOT NULL, predicted FLOAT, fitted FLOAT, "
                "abs_error FLOAT, passed BOOLEAN)"
            )
        )

    monkeypatch.setattr(database, "engine", engine)
    database.init_db()

    with engine.connect() as conn:
        run_cols = [row[1] for row in conn.execute(text("PRAGMA table_info(runs)"))]
        inv_cols = [row[1] for row in conn.execute(text("PRAGMA table_info(invariant_rows)"))]
        tables = {row[0] for row in conn.execute(text("SELECT name FROM sqlite_master WHERE type='table'"))}
        indexes = [row[1] for row in conn.execute(text("PRAGMA index_list(runs)"))]
    assert {"switches", "out_dir", "exit_code"} <= set(run_cols)
    assert {"condition", "rel_error"} <= set(inv_cols)
    assert {"cluster_rows", "moment_rows"} <= tables
    assert "ix_runs_config_hash" in indexes


def test_init_db_is_idempotent(tmp_path, monkeypatch):
    engine = create_engine(f"sqlite:///{tmp_path / 'fresh.db'}")
    monkeypatch.setattr(database, "engine", engine)
    database.init_db()
    database.init_db()
    with engine.connect() as conn:
        indexes = [row[1] for row in conn.execute(text("PRAGMA index_list(runs)"))]
    assert indexes.count("ix_runs_config_hash") == 1
