import numpy as np
import pytest

from flmm.fdata import from_arrays


def toy_crossed(n_g1=3, n_g2=3, n_rep=2, points=(3, 6), seed=0, sigma=1.0):
    """Small crossed data set with random times and standard normal responses."""
    rng = np.random.default_rng(seed)
    curve, t, g1, g2, rep = [], [], [], [], []
    c = 0
    for i in range(n_g1):
        for j in range(n_g2):
            for h in range(n_rep):
                m = int(rng.integers(points[0], points[1] + 1))
                curve += [c] * m
                t += sorted(rng.uniform(0, 1, m))
                g1 += [i] * m
                g2 += [j] * m
                rep += [h] * m
                c += 1
    y = sigma * rng.standard_normal(len(t))
    return from_arrays(curve, t, y, g1, g2, rep, domain=(0.0, 1.0))


@pytest.fixture
def crossed():
    return toy_crossed()


ACCEPTANCE = []


def record(number: int, title: str, ok: bool, detail: str = "") -> None:
    """Store and print one acceptance verdict line."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
