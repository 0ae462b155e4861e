"""
Tests for loopguard.utils module.

Tests JSON encoding, value parsing, key = value files and CSV export.
"""

from datetime import datetime, timezone
import json
import math

import numpy as np
import pytest

from loopguard.enums import ClockMode
from loopguard.exceptions import ConfigError
from loopguard.utils import (
    CustomJsonEncoder,
    export_rows_to_csv,
    format_key_value,
    parse_float,
    parse_float_list,
    parse_int_list,
    parse_key_value_file,
    parse_key_value_text,
    read_csv_rows,
    read_json,
    to_json,
    write_json,
)


@pytest.mark.unit
class TestCustomJsonEncoder:
    """Test CustomJsonEncoder."""

    def test_supported_types(self):
        data = {
            "clock": ClockMode.VIRTUAL,
            "when": datetime(2024, 1, 2, tzinfo=timezone.utc),
            "count": np.int64(3),
            "ratio": np.float32(0.5),
            "vector": np.array([1, 2]),
            "ids": {3, 1},
        }
        decoded = json.loads(json.dumps(data, cls=CustomJsonEncoder))
        assert decoded == {
            "clock": "virtual",
            "when": "2024-01-02T00:00:00+00:00",
            "count": 3,
            "ratio": 0.5,
            "vector": [1, 2],
            "ids": [1, 3],
        }

    def test_unsupported_type(self):
        with pytest.raises(TypeError):
            json.dumps({"x": object()}, cls=CustomJsonEncoder)

    def test_to_json_sorted(self):
        assert to_json({"b": 1, "a": 2}).index('"a"') < to_json({"b": 1, "a": 2}).index('"b"')
        assert to_json([1, 2], indent=None) == "[1, 2]"


@pytest.mark.unit
class TestParsers:
    """Test value parsers."""

    @pytest.mark.parametrize("text,expected", [("0.7", 0.7), (" 2 ", 2.0), ("inf", math.inf), ("INF", math.inf)])
    def test_parse_float(self, text, expected):
        assert parse_float(text) == expected

    @pytest.mark.parametrize("text", ["fast", "nan", ""])
    def test_parse_float_rejects(self, text):
        with pytest.raises(ConfigError) as exc_info:
            parse_float(text, "ttime")
        assert exc_info.value.field == "ttime"

    def test_parse_int_list(self):
        assert parse_int_list("0, 1,2") == [0, 1, 2]
        assert parse_int_list("") == []
        with pytest.raises(ConfigError):
            parse_int_list("1, two")

    def test_parse_float_list(self):
        assert parse_float_list("0.1,0.5, inf") == [0.1, 0.5, math.inf]


@pytest.mark.unit
class TestKeyValue:
    """Test key = value configuration text."""

    def test_parse_text(self):
        text = "# run config\ntime_limit = 0.7\n\nclock=virtual  # deterministic\nclock = wall\n"
        assert parse_key_value_text(text) == {"time_limit": "0.7", "clock": "wall"}

    def test_line_without_equals(self):
        with pytest.raises(ConfigError, match="run.cfg:2"):
            parse_key_value_text("a = 1\nnot a pair\n", source="run.cfg")

    def test_empty_key(self):
        with pytest.raises(ConfigError):
            parse_key_value_text("= 1\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as exc_info:
            parse_key_value_file(tmp_path / "missing.cfg")
        assert exc_info.value.field == "config"

    def test_format_reads_back(self, tmp_path):
        """Test formatted values parse back to the same strings."""
        text = format_key_value({"script": [0, 1, 0], "clock": ClockMode.WALL, "seed": 4})
        assert text == "clock = wall\nscript = 0,1,0\nseed = 4\n"
        path = tmp_path / "world.cfg"
        path.write_text(text)
        assert parse_key_value_file(path) == {"clock": "wall", "script": "0,1,0", "seed": "4"}


@pytest.mark.unit
class TestFiles:
    """Test CSV and JSON helpers."""

    def test_export_to_string(self):
        rows = [{"a": 1, "b": 0.1, "c": None}, {"a": 2, "b": ClockMode.WALL, "c": "x", "extra": 5}]
        csv_text = export_rows_to_csv(rows, ["a", "b", "c"])
        assert csv_text == "a,b,c\n1,0.1,\n2,wall,x\n"

    def test_float_precision_kept(self, tmp_path):
        path = tmp_path / "rows.csv"
        assert export_rows_to_csv([{"x": 1 / 3}], ["x"], path) is None
        assert float(read_csv_rows(path)[0]["x"]) == 1 / 3

    def test_json_round_trip(self, tmp_path):
        path = tmp_path / "summary.json"
        write_json({"max_wm": np.int64(12), "mode": ClockMode.VIRTUAL}, path)
        assert read_json(path) == {"max_wm": 12, "mode": "virtual"}
