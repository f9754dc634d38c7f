import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pare.autodiff import ContractError
from pare.nn import ConfigError
from pare.profiles import (fixture_path, performance_profile, profile_csv, profile_text, ratio_matrix,
                           read_errors_csv)


@pytest.fixture(scope="module")
def table():
    return read_errors_csv(fixture_path())


def brute_rho(errors, m, tau):
    """Count tasks by hand: method m within tau of the column minimum."""
    hits = 0
    for t in range(errors.shape[1]):
        best = min(errors[i, t] for i in range(errors.shape[0]))
        hits += errors[m, t] / best <= tau
    return hits / errors.shape[1]


def test_single_method_is_always_best():
    (curve,) = performance_profile(np.array([[0.3, 2.0, 7.0]]), ["only"])
    assert np.all(curve.rho == 1.0)
    assert curve.at(1.0) == 1.0


def test_fixture_shape(table):
    assert len(table.methods) == 8 and len(table.tasks) == 10
    assert "PaRe" in table.methods and "ORCA" in table.methods


def test_fixture_ratio_orca_cifar(table):
    r = ratio_matrix(table.errors)
    m, t = table.methods.index("ORCA"), table.tasks.index("CIFAR-100")
    assert r[m, t] == pytest.approx(6.53 / 6.25, abs=1e-12)
    assert r[m, t] == pytest.approx(1.0448, abs=1e-4)


def test_fixture_pare_profile_at_one(table):
    # PaRe is best on every task but Darcy Flow in the bundled table
    r = ratio_matrix(table.errors)
    p = table.methods.index("PaRe")
    not_best = [table.tasks[j] for j in range(len(table.tasks)) if r[p, j] > 1.0]
    assert not_best == ["Darcy Flow"]
    curves = {c.method: c for c in performance_profile(table.errors, table.methods)}
    assert curves["PaRe"].at(1.0) == pytest.approx(0.9)


def test_matches_brute_force_count(table):
    curves = performance_profile(table.errors, table.methods)
    for m, c in enumerate(curves):
        for tau in (1.0, 1.05, 1.5, 3.0, 100.0):
            assert c.at(tau) == brute_rho(table.errors, m, tau)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(0.01, 100.0)))
def test_profile_invariants(errors):
    names = [f"m{i}" for i in range(errors.shape[0])]
    curves = performance_profile(errors, names)
    for c in curves:
        assert np.all(np.diff(c.rho) >= 0)
        assert np.all((c.rho >= 0) & (c.rho <= 1))
        assert c.rho[-1] == 1.0
    # every task has at least one winner
    assert sum(c.at(1.0) for c in curves) * errors.shape[1] >= errors.shape[1] - 1e-9


@pytest.mark.parametrize("bad", [0.0, -1.0, np.nan, np.inf])
def test_nonpositive_error_rejected(bad):
    errors = np.array([[1.0, 2.0], [3.0, bad]])
    with pytest.raises(ContractError):
        performance_profile(errors, ["a", "b"])


def test_ragged_row_names_line(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("method,a,b\nx,1,2\ny,3\n")
    with pytest.raises(ConfigError, match="row 3"):
        read_errors_csv(path)


def test_non_numeric_cell(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("method,a\nx,abc\n")
    with pytest.raises(ConfigError, match="row 2"):
        read_errors_csv(path)


def test_outputs_render(table):
    curves = performance_profile(table.errors, table.methods)
    csv_text = profile_csv(curves)
    assert csv_text.splitlines()[0] == "tau," + ",".join(table.methods)
    text = profile_text(curves)
    assert len(text.splitlines()) == 1 + len(table.methods)
