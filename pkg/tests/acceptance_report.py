"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
from __future__ import annotations

LINES: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    LINES[number] = line
    print(line)
    return passed
