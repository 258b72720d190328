"""Shared record of acceptance outcomes, keyed by criterion number."""
RESULTS: dict[int, str] = {}


def record(n: int, passed: bool, detail: str) -> bool:
    line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return passed
