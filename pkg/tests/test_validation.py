import pytest

from database import load_run_config
from validation import check, results_frame, run_suites


def test_check_records_pass_and_fail():
    assert check("model", "ok", 1e-13, 1e-12).passed
    assert not check("model", "too_big", 1e-3, 1e-12).passed
    assert not check("model", "nan", float("nan"), 1.0).passed


@pytest.mark.parametrize("suite", ["model", "particle"])
def test_fast_suites_pass(suite):
    results = run_suites(load_run_config(), [suite])
    frame = results_frame(results)
    assert len(frame) == len(results) > 0
    assert frame["passed"].all(), frame[~frame["passed"]].to_dict("records")


@pytest.mark.slow
@pytest.mark.parametrize("suite", ["transfer", "meanfield", "stability", "continuation"])
def test_numerical_suites_pass(suite):
    results = run_suites(load_run_config(), [suite])
    assert all(r.passed for r in results), [r.to_row() for r in results if not r.passed]
