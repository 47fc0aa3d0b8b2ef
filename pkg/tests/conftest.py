import numpy as np
import pytest

from morallens.synth import GeneratorSpec, SignalSpec, TargetSpec, generate_cohort

GENDER = TargetSpec("gender", ("Female", "Male"), (0.5, 0.5))


def planted_spec(seed=0, n_users=600, multiplier=4.0, **kw):
    return GeneratorSpec(
        n_users=n_users,
        vocab_sizes=kw.pop("vocab_sizes", {"desktop": 210}),
        targets=(GENDER,),
        signals=(SignalSpec("gender", "Male", n_items=10, multiplier=multiplier, rank_range=(10, 110)),),
        seed=seed,
        **kw,
    )


@pytest.fixture(scope="session")
def small_synth():
    return generate_cohort(planted_spec(seed=5, n_users=400, n_days=5))


@pytest.fixture(scope="session")
def mobile_synth():
    spec = GeneratorSpec(
        n_users=300, n_days=3,
        vocab_sizes={"desktop": 150, "mobile-web": 120, "mobile-apps": 80},
        targets=(GENDER,),
        signals=(SignalSpec("gender", "Male", modality="mobile-web", n_items=5, multiplier=2.5, rank_range=(5, 60)),
                 SignalSpec("gender", "Male", modality="mobile-apps", n_items=5, multiplier=2.5, rank_range=(5, 60))),
        seed=11,
    )
    return generate_cohort(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    detail = getattr(item, "criterion_detail", "")
    _CRITERIA[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
