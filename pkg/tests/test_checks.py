import pytest

from sima import checks


def test_default_suite_passes():
    report = checks.run_checks()
    assert report.passed, "\n".join(r.line() for r in report.results)
    assert [r.name for r in report.results] == [p[0] for p in checks.PROPERTIES]


def test_fault_is_caught_and_named():
    report = checks.run_checks(sizes=16, trials=3, fault="softmax-no-renorm",
                               only={"softmax_row_sum", "msa_convexity", "ordering_equivalence"})
    status = {r.name: r.passed for r in report.results}
    assert status == {"ordering_equivalence": True, "softmax_row_sum": False, "msa_convexity": False}
    failed = next(r for r in report.results if r.name == "softmax_row_sum")
    assert failed.line().startswith("FAIL softmax_row_sum")
    assert "seed=0 trial=0" in failed.failure


def test_fault_is_removed_afterwards():
    checks.run_checks(sizes=8, trials=1, fault="softmax-no-renorm", only={"softmax_row_sum"})
    assert checks.run_checks(sizes=8, trials=2, only={"softmax_row_sum"}).passed


def test_argument_errors():
    with pytest.raises(ValueError):
        checks.run_checks(sizes=0)
    with pytest.raises(ValueError):
        checks.run_checks(trials=-1)
    with pytest.raises(ValueError, match="known"):
        with checks.inject_fault("nope"):
            pass


def test_zero_trials_warns():
    report = checks.run_checks(trials=0)
    assert report.passed and report.warnings
