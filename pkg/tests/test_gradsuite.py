import numpy as np
import pytest

from gp3.gradsuite import COMPOSITE_TOL, MODULES, PURE_TOL, CheckResult, run_gradcheck


@pytest.mark.parametrize("module", MODULES)
def test_each_module_passes(module):
    results = run_gradcheck(module, seed=3)
    assert results and all(r.module == module for r in results)
    assert all(r.ok for r in results), [(r.name, r.error) for r in results if not r.ok]


def test_losses_use_the_pure_tolerance():
    assert {r.tolerance for r in run_gradcheck("losses")} == {PURE_TOL}


def test_suite_is_seeded():
    a = [r.error for r in run_gradcheck("lora", seed=5)]
    b = [r.error for r in run_gradcheck("lora", seed=5)]
    assert a == b


def test_unknown_module_rejected():
    with pytest.raises(ValueError, match="unknown gradcheck module"):
        run_gradcheck("optics")


def test_check_result_ok_is_inclusive_and_rejects_nan():
    assert CheckResult("m", "n", COMPOSITE_TOL, COMPOSITE_TOL).ok
    assert not CheckResult("m", "n", float(np.nan), COMPOSITE_TOL).ok
