"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    return ok
