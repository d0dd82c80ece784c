import pytest

from fedcluster import verify
from fedcluster.errors import ConfigurationError


def test_all_properties_pass_clean():
    results = verify.run_all()
    assert len(results) >= 12
    failed = [r.name for r in results if not r.passed]
    assert failed == []
    for r in results:
        assert r.detail  # every property explains itself


def test_property_names_are_stable_and_unique():
    names = verify.property_names()
    assert len(names) == len(set(names))
    assert "gradient-finite-difference" in names
    assert [r.name for r in verify.run_all()] == list(names)


def test_injected_fault_is_caught():
    results = verify.run_all(inject="quad-grad-sign")
    failed = [r.name for r in results if not r.passed]
    assert failed == ["gradient-finite-difference"]


def test_unknown_injection_rejected():
    with pytest.raises(ConfigurationError):
        verify.run_all(inject="melt-the-gpu")
