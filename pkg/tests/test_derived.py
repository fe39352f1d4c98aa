"""Runs every oracle-backed numeric check as an individual test."""
import pytest

import derived_examples

_DERIVED = dict(derived_examples.DERIVED_CHECKS)
_TRAINED = dict(derived_examples.TRAINED_CHECKS)


@pytest.mark.parametrize("name", list(_DERIVED))
def test_derived_check(name):
    _DERIVED[name]()


@pytest.mark.parametrize("name", list(_TRAINED))
def test_trained_check(name, trained_artifact):
    _TRAINED[name](trained_artifact)
