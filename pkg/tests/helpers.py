import json
import os
import sys
import tempfile
from pathlib import Path

from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

# Ensure the project root is on the Python path
sys.path.append(str(Path(__file__).resolve().parents[1]))

from dnbands import database, models  # noqa: F401


def get_temp_session():
    db_fd, db_path = tempfile.mkstemp()
    os.close(db_fd)
    engine = create_engine(f"sqlite:///{db_path}", future=True)
    TestingSession = sessionmaker(bind=engine)
    database.Base.metadata.create_all(engine)
    return TestingSession, Path(db_path)


def write_config(directory: Path, **fields) -> Path:
    """Write an experiment JSON with a small default potential; ``fields`` override keys."""
    data = {
        "potential": [{"monomial": [0, 0, 0], "coeff": 1.0}],
        "L_max": 12,
        "k_window": [3, 8],
        "quadrature": {"Nt": 8, "Ns": 8, "orbit_grid": 12},
        "out": str(directory / "out"),
    }
    data.update(fields)
    path = directory / "config.json"
    path.write_text(json.dumps(data))
    return path
