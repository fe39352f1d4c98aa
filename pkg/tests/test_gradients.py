"""Finite-difference verification of every differentiable component."""
import pytest

import gradcases

CASES = {c.name: c for c in gradcases.all_cases()}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    err64, err32 = CASES[name].measure()
    assert err64 <= 1e-6, f"{name}: float64 analytic vs FD rel err {err64:.3g}"
    assert err32 <= 1e-3, f"{name}: float32 analytic vs FD rel err {err32:.3g}"
