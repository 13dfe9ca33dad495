import os
from pathlib import Path
from sqlalchemy import create_engine, text, inspect
from sqlalchemy.orm import sessionmaker, declarative_base

# Run-ledger location; override with an environment variable for testing
DB_FILE = os.getenv("DNBANDS_DB", None)
if DB_FILE is None:
    DB_FILE = Path(__file__).resolve().parent / "runs.db"
else:
    DB_FILE = Path(DB_FILE)

engine = create_engine(f"sqlite:///{DB_FILE}", echo=False, future=True)
SessionLocal = sessionmaker(bind=engine, autoflush=False, autocommit=False)

Base = declarative_base()

# Columns added after the first ledger layout, with their SQL definitions.
LATE_COLUMNS = {
    "runs": {
        "switches": "TEXT",
        "out_dir": "TEXT",
        "exit_code": "INTEGER",
    },
    "invariant_rows": {
        "condition": "FLOAT",
        "rel_error": "FLOAT",
    },
}


def init_db() -> None:
    """Create ledger tables if they do not exist and add columns missing from older ledgers."""
    from . import models  # noqa: F401
    insp = inspect(engine)
    required = {"runs", "cluster_rows", "moment_rows", "invariant_rows"}
    existing = set(insp.get_table_names())
    if not required.issubset(existing):
        Base.metadata.create_all(engine)

    with engine.begin() as conn:
        for table, columns in LATE_COLUMNS.items():
            cols = [r[1] for r in conn.execute(text(f"PRAGMA table_info({table})"))]
            for name, ddl in columns.items():
                if name not in cols:
                    conn.execute(text(f"ALTER TABLE {table} ADD COLUMN {name} {ddl}"))
        conn.execute(text("CREATE INDEX IF NOT EXISTS ix_runs_config_hash ON runs(config_hash)"))
