"""Line-oriented text checkpoints.

Format::

    fedmtd-<kind> 1
    <key> <value> [<value> ...]
    ...

One record per line, whitespace separated. Floats are written with ``repr``
so a save/load cycle is lossless. Keys are unique within a file.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError

FORMAT_VERSION = 1


def write_records(path, kind: str, records: dict) -> None:
    lines = [f"fedmtd-{kind} {FORMAT_VERSION}"]
    for key, value in records.items():
        if " " in key:
            raise ValueError(f"record key {key!r} contains whitespace")
        if isinstance(value, np.ndarray) or isinstance(value, (list, tuple)):
            items = [_fmt(v) for v in np.asarray(value).ravel().tolist()]
        else:
            items = [_fmt(value)]
        lines.append(" ".join([key] + items))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_records(path, kind: str) -> dict[str, list[str]]:
    lines = Path(path).read_text().splitlines()
    expected = f"fedmtd-{kind}"
    if not lines or lines[0].split()[:1] != [expected]:
        raise ParseError(f"not a {expected} file", line=1)
    out: dict[str, list[str]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] in out:
            raise ParseError(f"duplicate key {parts[0]!r}", line=lineno)
        out[parts[0]] = parts[1:]
    return out


def floats(records: dict, key: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in records[key]], dtype=np.float64)
    except KeyError:
        raise ParseError(f"missing record {key!r}") from None
    except ValueError as exc:
        raise ParseError(f"record {key!r}: {exc}") from None


def ints(records: dict, key: str) -> list[int]:
    try:
        return [int(x) for x in records[key]]
    except KeyError:
        raise ParseError(f"missing record {key!r}") from None
    except ValueError as exc:
        raise ParseError(f"record {key!r}: {exc}") from None


def scalar(records: dict, key: str, cast=float):
    try:
        (value,) = records[key]
        return cast(value)
    except KeyError:
        raise ParseError(f"missing record {key!r}") from None
    except ValueError as exc:
        raise ParseError(f"record {key!r}: {exc}") from None
