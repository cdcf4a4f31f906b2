"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
LINES = {}


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    LINES[n] = line
    print(line)
    return ok
