import json

import numpy as np
import pytest

from oracle import QueryDataset
from run_records import (
    QUERY_LOG_SCHEMA,
    REPORT_SCHEMA,
    append_query_log,
    append_records,
    append_result_row,
    read_header,
    read_query_log,
    read_records,
    read_report,
    trim_query_log,
    write_report,
)


def round_of(r: int, n: int = 4) -> QueryDataset:
    rng = np.random.default_rng(r)
    return QueryDataset(rng.uniform(0.1, 1.0, size=(n, 8)), rng.dirichlet([1.0, 1.0], size=n),
                        np.full(n, 8.0 * r), np.full(n, r, dtype=int))


def test_append_records_writes_header_once(tmp_path):
    path = str(tmp_path / "log.ndjson")
    assert append_records(path, "demo", [{"a": 1}, {"a": np.int64(2)}]) == 2
    assert append_records(path, "demo", [{"a": np.float64(3.5)}]) == 1
    with open(path) as f:
        lines = f.read().splitlines()
    assert json.loads(lines[0]) == {"schema": "demo", "version": 1}
    assert len(lines) == 4
    assert read_records(path, "demo") == [{"a": 1}, {"a": 2}, {"a": 3.5}]
    assert read_header(path, "demo")["version"] == 1


def test_schema_mismatch(tmp_path):
    path = str(tmp_path / "log.ndjson")
    append_records(path, "demo", [{"a": 1}])
    with pytest.raises(ValueError, match="schema"):
        read_records(path, "other")
    with pytest.raises(ValueError):
        append_records(path, "other", [{"a": 2}])

    with open(path, "w") as f:
        f.write(json.dumps({"schema": "demo", "version": 2}) + "\n")
    with pytest.raises(ValueError, match="version"):
        read_records(path, "demo")


def test_torn_last_line_is_dropped(tmp_path):
    path = str(tmp_path / "log.ndjson")
    append_records(path, "demo", [{"a": 1}, {"a": 2}])
    with open(path, "a") as f:
        f.write('{"a": 3')
    assert read_records(path, "demo") == [{"a": 1}, {"a": 2}]


def test_corrupt_middle_line_names_line(tmp_path):
    path = str(tmp_path / "log.ndjson")
    with open(path, "w") as f:
        f.write(json.dumps({"schema": "demo", "version": 1}) + "\n{broken\n" + json.dumps({"a": 1}) + "\n")
    with pytest.raises(ValueError, match="line 2"):
        read_records(path, "demo")


def test_query_log_keeps_complete_rounds(tmp_path):
    path = str(tmp_path / "queries.ndjson")
    assert read_query_log(path) is None
    append_query_log(path, round_of(0))
    append_query_log(path, round_of(1))
    append_query_log(path, round_of(2).subset([0, 1]))
    data = read_query_log(path)
    assert len(data) == 8
    assert list(np.unique(data.round)) == [0, 1]
    assert np.allclose(data.features[:4], round_of(0).features)
    assert np.allclose(data.raw[4:], round_of(1).raw)
    assert np.array_equal(np.unique(data.t), [0.0, 8.0])


def test_query_log_with_truncated_first_round(tmp_path):
    path = str(tmp_path / "queries.ndjson")
    append_query_log(path, round_of(0).subset([0, 1]))
    assert read_query_log(path, per_round=4) is None
    # without the expected size the lone partial round looks complete
    assert len(read_query_log(path)) == 2

    append_query_log(path, round_of(1).subset([0, 1, 2]))
    assert read_query_log(path, per_round=4) is None


def test_query_log_drops_partial_later_round(tmp_path):
    path = str(tmp_path / "queries.ndjson")
    append_query_log(path, round_of(0))
    append_query_log(path, round_of(1).subset([0]))
    data = read_query_log(path, per_round=4)
    assert len(data) == 4
    assert list(np.unique(data.round)) == [0]


def test_trim_query_log_rewrites_interrupted_round(tmp_path):
    path = str(tmp_path / "queries.ndjson")
    append_query_log(path, round_of(0))
    append_query_log(path, round_of(1).subset([0, 1]))
    with open(path, "a") as f:
        f.write('{"features": [0.1')
    data = trim_query_log(path, per_round=4)
    assert len(data) == 4
    assert len(read_records(path, QUERY_LOG_SCHEMA)) == 4

    append_query_log(path, round_of(1))
    again = read_query_log(path, per_round=4)
    assert list(np.unique(again.round)) == [0, 1]
    assert np.allclose(again.raw[4:], round_of(1).raw)


def test_trim_query_log_empties_truncated_first_round(tmp_path):
    path = str(tmp_path / "queries.ndjson")
    assert trim_query_log(path, per_round=4) is None
    append_query_log(path, round_of(0).subset([0, 1, 2]))
    assert trim_query_log(path, per_round=4) is None
    assert read_records(path, QUERY_LOG_SCHEMA) == []
    assert read_header(path, QUERY_LOG_SCHEMA)["version"] == 1


def test_reports_are_write_once(tmp_path):
    path = str(tmp_path / "report.ndjson")
    report = {"scheme": "Ens-H", "accuracy": np.float64(0.75), "oob_accuracies": np.array([0.5, 1.0])}
    write_report(path, report)
    assert read_report(path) == {"scheme": "Ens-H", "accuracy": 0.75, "oob_accuracies": [0.5, 1.0]}
    assert read_header(path, REPORT_SCHEMA)["schema"] == REPORT_SCHEMA
    with pytest.raises(FileExistsError):
        write_report(path, report)
    with pytest.raises(ValueError):
        read_records(path, QUERY_LOG_SCHEMA)


def test_append_result_row(tmp_path):
    path = str(tmp_path / "results.csv")
    columns = ["seed", "accuracy"]
    append_result_row(path, {"seed": 0, "accuracy": 0.5}, columns)
    append_result_row(path, {"accuracy": 0.75, "seed": 1}, columns)
    with open(path) as f:
        assert f.read().splitlines() == ["seed,accuracy", "0,0.5", "1,0.75"]
    with pytest.raises(ValueError, match="missing"):
        append_result_row(path, {"seed": 2}, columns)
    with pytest.raises(ValueError, match="unknown"):
        append_result_row(path, {"seed": 2, "accuracy": 0.1, "extra": 1}, columns)
