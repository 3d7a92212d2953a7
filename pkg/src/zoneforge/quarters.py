"""Quarter encoding: ``year * 4 + q0`` with ``q0`` in ``0..3``."""

import re

from .errors import ValidationError

_QUARTER_RE = re.compile(r"^\s*(\d{4})\s*[Qq]\s*([1-4])\s*$")


def parse_quarter(value) -> int:
    """Parse ``"2005Q1"`` (or an already encoded int) into ``year*4 + q0``."""
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return int(value)
    match = _QUARTER_RE.match(str(value))
    if match is None:
        raise ValidationError(f"invalid quarter {value!r}; expected YYYYQn")
    return int(match.group(1)) * 4 + int(match.group(2)) - 1


def format_quarter(code: int) -> str:
    year, q0 = divmod(int(code), 4)
    return f"{year}Q{q0 + 1}"


def quarter_range(start: int, stop: int) -> range:
    """Half-open quarter interval ``[start, stop)``."""
    return range(int(start), int(stop))
