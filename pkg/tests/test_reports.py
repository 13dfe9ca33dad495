import json

from tests import helpers  # noqa: F401  # ensures project root on path
from dnbands.reports import header_line, read_csv, write_csv, write_json


def test_csv_header_and_float_repr(tmp_path):
    path = write_csv(tmp_path / "sub" / "rows.csv", ("k", "mu"), [(5, 0.1), (6, 1 / 3)], "0123abcd", "scan")
    lines = path.read_text().splitlines()
    assert lines[0] == header_line("0123abcd", "scan") == "# config_hash=0123abcd; switches=scan"
    assert lines[1] == "k,mu"
    # floats keep every digit so reruns compare byte-for-byte
    assert lines[3] == f"6,{1 / 3!r}"
    header, rows = read_csv(path)
    assert header.startswith("# config_hash=")
    assert float(rows[1]["mu"]) == 1 / 3


def test_json_carries_hash_and_switches(tmp_path):
    path = write_json(tmp_path / "r.json", {"b": 1, "a": [1.5]}, "feedbeef", {"kappa_delta": 0.5})
    data = json.loads(path.read_text())
    assert data["config_hash"] == "feedbeef"
    assert data["switches"] == {"kappa_delta": 0.5}
    assert list(data) == sorted(data)
    # identical payloads give identical bytes
    again = write_json(tmp_path / "s.json", {"a": [1.5], "b": 1}, "feedbeef", {"kappa_delta": 0.5})
    assert again.read_bytes() == path.read_bytes()
