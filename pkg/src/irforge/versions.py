"""Dotted version strings compared as numeric tuples; missing components are zero."""

import re

_PART = re.compile(r"\d+")


def parse_version(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(p) for p in text)
    parts = []
    for chunk in str(text).strip().lstrip("vV").split("."):
        m = _PART.match(chunk)
        if not m:
            break
        parts.append(int(m.group()))
    if not parts:
        raise ValueError(f"not a version: {text!r}")
    return tuple(parts)


def _padded(a, b):
    n = max(len(a), len(b))
    return a + (0,) * (n - len(a)), b + (0,) * (n - len(b))


def compare_versions(a, b) -> int:
    x, y = _padded(parse_version(a), parse_version(b))
    return (x > y) - (x < y)


def version_at_least(have, minimum) -> bool:
    if minimum in (None, ""):
        return True
    if have in (None, ""):
        return False
    return compare_versions(have, minimum) >= 0
