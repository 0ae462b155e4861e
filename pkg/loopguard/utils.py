from datetime import datetime, date
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union
import csv
import io
import json
import logging
import math

import numpy as np

from loopguard.exceptions import ConfigError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class CustomJsonEncoder(json.JSONEncoder):
    def default(self, obj):
        """
        Returns the default JSON representation of an object.

        Parameters:
        - obj: The object to be serialized.

        Returns:
        The JSON representation of the object.

        Note:
        - Enums are written as their value, datetimes as ISO strings.
        - numpy scalars and arrays become Python numbers and lists.
        - Paths become strings and sets become sorted lists.
        """
        if isinstance(obj, Enum):
            return obj.value
        if isinstance(obj, (datetime, date)):
            return obj.isoformat()
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, Path):
            return str(obj)
        if isinstance(obj, (set, frozenset)):
            return sorted(obj)
        return json.JSONEncoder.default(self, obj)  # pragma: no cover


def to_json(obj: Any, indent: Optional[int] = 4) -> str:
    """
    Serialize an object with :class:`CustomJsonEncoder`.

    Args:
        obj: Object to serialize
        indent: Indentation, ``None`` for compact output

    Returns:
        JSON string
    """
    return json.dumps(obj, cls=CustomJsonEncoder, indent=indent, sort_keys=indent is not None)


def parse_float(text: str, field: str = "value") -> float:
    """
    Parse a float that may be written as ``inf``.

    Args:
        text: Text to parse
        field: Field name used in the error

    Returns:
        Parsed float

    Raises:
        ConfigError: If the text is not a number

    Example:
        >>> parse_float("inf")
        inf
        >>> parse_float("0.7")
        0.7
    """
    cleaned = text.strip().lower()
    if cleaned in ("inf", "infinity", "+inf"):
        return math.inf
    try:
        value = float(cleaned)
    except ValueError:
        raise ConfigError(f"Expected a number for {field}, got {text!r}", field=field, value=text)
    if math.isnan(value):
        raise ConfigError(f"NaN is not allowed for {field}", field=field, value=text)
    return value


def parse_int_list(text: str, field: str = "value") -> List[int]:
    """
    Parse a comma separated list of integers.

    Args:
        text: Text such as ``"0, 1, 2"``
        field: Field name used in the error

    Returns:
        List of integers (empty for blank text)
    """
    items = [part.strip() for part in text.split(",") if part.strip()]
    try:
        return [int(item) for item in items]
    except ValueError:
        raise ConfigError(f"Expected comma separated integers for {field}", field=field, value=text)


def parse_float_list(text: str, field: str = "value") -> List[float]:
    """Parse a comma separated list of floats (``inf`` allowed)."""
    return [parse_float(part, field) for part in text.split(",") if part.strip()]


def parse_key_value_text(text: str, source: str = "<string>") -> Dict[str, str]:
    """
    Parse flat ``key = value`` text.

    Blank lines and ``#`` comments are ignored. Later keys override earlier ones.

    Args:
        text: File contents
        source: Name used in error messages

    Returns:
        Mapping of key to raw string value

    Raises:
        ConfigError: If a non-empty line has no ``=``
    """
    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value'", value=raw)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{number}: empty key", value=raw)
        values[key] = value.strip()
    return values


def parse_key_value_file(path: PathLike) -> Dict[str, str]:
    """
    Read and parse a flat ``key = value`` configuration file.

    Args:
        path: File to read

    Returns:
        Mapping of key to raw string value

    Raises:
        ConfigError: If the file does not exist or is malformed
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}", field="config", value=str(path))
    return parse_key_value_text(path.read_text(encoding="utf-8"), source=str(path))


def format_key_value(values: Mapping[str, Any]) -> str:
    """
    Render a mapping as ``key = value`` lines in key order.

    Lists and tuples are written comma separated.
    """
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, Enum):
            value = value.value
        if isinstance(value, (list, tuple)):
            value = ",".join(str(item) for item in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def export_rows_to_csv(
    rows: Iterable[Mapping[str, Any]],
    columns: Sequence[str],
    file_path: Optional[PathLike] = None,
) -> Optional[str]:
    """
    Export mappings to CSV format.

    Floats are written with ``repr`` precision so the output is a pure
    function of the values.

    Args:
        rows: Row mappings
        columns: Column names, in output order
        file_path: Path to save CSV file (if None, returns CSV string)

    Returns:
        CSV string if file_path is None, otherwise None
    """
    output = io.StringIO()
    writer = csv.DictWriter(output, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()

    for row in rows:
        cleaned = {}
        for col in columns:
            value = row.get(col, "")
            if value is None:
                value = ""
            elif isinstance(value, Enum):
                value = value.value
            elif isinstance(value, float):
                value = repr(value)
            cleaned[col] = value
        writer.writerow(cleaned)

    csv_string = output.getvalue()
    output.close()

    if file_path:
        with open(file_path, "w", newline="", encoding="utf-8") as f:
            f.write(csv_string)
        logger.debug(f"Wrote CSV {file_path}")
        return None

    return csv_string


def read_csv_rows(file_path: PathLike) -> List[Dict[str, str]]:
    """
    Read a CSV file written by :func:`export_rows_to_csv`.

    Args:
        file_path: CSV file

    Returns:
        List of row dictionaries with string values
    """
    with open(file_path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_json(obj: Any, file_path: PathLike) -> None:
    """Write an object as indented JSON."""
    Path(file_path).write_text(to_json(obj) + "\n", encoding="utf-8")


def read_json(file_path: PathLike) -> Any:
    """Read a JSON file."""
    return json.loads(Path(file_path).read_text(encoding="utf-8"))
