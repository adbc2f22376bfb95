import json

import numpy as np
import pytest
import torch

import aat.sequence as sequence
from aat.errors import ConfigError
from aat.values import expectile
from aat.verify import (
    advantage_suite, causality_suite, golden_section_expectile, lemma1_suite, run_suites, theorem1_suite,
    weighted_advantage_vec,
)


def test_golden_section_oracle_on_known_expectiles():
    # comparing loss values near a quadratic minimum resolves v only to about sqrt(machine eps)
    assert golden_section_expectile([1.0, 2.0, 6.0], 0.5) == pytest.approx(3.0, abs=1e-7)
    # two points {0, 1}: the sigma-expectile is sigma, from sigma (1 - v) = (1 - sigma) v
    assert golden_section_expectile([0.0, 1.0], 0.8) == pytest.approx(0.8, abs=1e-7)
    assert expectile([0.0, 1.0], 0.8) == pytest.approx(0.8, abs=1e-12)


def test_vectorized_weighting_matches_formula():
    A = np.array([-2.0, 0.0, 3.0])
    lam = np.array([0.5, 1.0, 2.0])
    assert np.allclose(weighted_advantage_vec(A, lam), [-1.0, 0.0, 3.0 / 7.0])
    with pytest.raises(ConfigError):
        weighted_advantage_vec(A, np.zeros(3))


def test_small_suites_pass_and_serialize():
    for report in (lemma1_suite(n=30), theorem1_suite(n=30), causality_suite(n=5), advantage_suite(n=2000)):
        assert report["passed"], report
        json.dumps(report)


def test_causality_suite_catches_a_leak(monkeypatch):
    real = sequence.window_mask

    def leaky(T, window, tokens_per_step=1, dtype=torch.float64, device=None):
        m = real(T, window, tokens_per_step, dtype, device)
        return torch.where(torch.isinf(m), torch.zeros_like(m), m)  # every future token visible

    monkeypatch.setattr(sequence, "window_mask", leaky)
    assert not causality_suite(n=5)["passed"]


def test_unknown_suite_rejected():
    with pytest.raises(ConfigError):
        run_suites("fourier")
