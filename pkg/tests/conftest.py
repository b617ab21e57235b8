import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gridshield.case_model import build_admittance, load_case, parse_case

ACCEPTANCE = pytest.StashKey[list]()

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def case_text(buses, branches, gens=None, base=100.0):
    """MATPOWER text from compact rows.

    ``buses``: (id, type, Pd, Qd[, Gs, Bs]); ``branches``: (f, t, r, x, b[, tap,
    shift, status]); ``gens``: (bus, Pg, Vg).
    """
    lines = ["function mpc = tiny", f"mpc.baseMVA = {base};", "mpc.bus = ["]
    for b in buses:
        bid, typ, pd, qd, *sh = b
        gs, bs = (sh + [0, 0])[:2]
        lines.append(f"\t{bid}\t{typ}\t{pd}\t{qd}\t{gs}\t{bs}\t1\t1\t0\t230\t1\t1.1\t0.9;")
    lines += ["];", "mpc.gen = ["]
    slack = [b[0] for b in buses if b[1] == 3]
    for g in gens if gens is not None else [(slack[0], 0, 1.0)]:
        lines.append(f"\t{g[0]}\t{g[1]}\t0\t100\t-100\t{g[2]}\t100\t1\t0\t0;")
    lines += ["];", "mpc.branch = ["]
    for br in branches:
        f, t, r, x, b, *rest = br
        tap, shift, status = (list(rest) + [0, 0, 1][len(rest):])[:3]
        lines.append(f"\t{f}\t{t}\t{r}\t{x}\t{b}\t250\t250\t250\t{tap}\t{shift}\t{status};")
    lines.append("];")
    return "\n".join(lines) + "\n"


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


@pytest.fixture(scope="session")
def Y118(case118):
    return build_admittance(case118)


@pytest.fixture(scope="session")
def case4():
    return load_case("case4gs")


@pytest.fixture(scope="session")
def Y4(case4):
    return build_admittance(case4)


@pytest.fixture
def two_bus():
    """Lossless 2-bus network with B_12 = 10."""
    return parse_case(case_text([(1, 3, 0, 0), (2, 1, 0, 0)], [(1, 2, 0.0, 0.1, 0.0)]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``."""
    def record(n, ok, detail):
        request.config.stash[ACCEPTANCE].append((n, bool(ok), detail))
    return record


def pytest_terminal_summary(terminalreporter, config):
    rows = config.stash.get(ACCEPTANCE, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(rows, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
