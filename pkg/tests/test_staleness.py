import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pipesim.core import BatchRef, NonPositiveLambda, Pass
from pipesim.scheduler import ScheduleEvent
from pipesim.staleness import (
    DecayParams,
    UnknownVersion,
    VersionHistory,
    delta_of,
    intermediate_factor,
    intermediate_weights,
    significance,
)

from oracles import high_precision_significance, iterate_decay

# frozen from mpmath at 30 digits
EXP_M1 = 0.367879441171442321595523770161
EXP_M2 = 0.135335283236612691893999494972
TWO_MINUS_E = -0.718281828459045235360287471353
TWO_MINUS_EXP_02 = 0.778597241839830152518633360859


@pytest.mark.parametrize("lam", [0.01, 0.5, 1.0, 7.0])
def test_significance_is_one_at_zero(lam):
    assert significance(0, DecayParams(lam)) == 1.0


def test_significance_values():
    assert significance(1, DecayParams(1.0)) == pytest.approx(EXP_M1, abs=1e-15)
    assert significance(4, DecayParams(0.5)) == pytest.approx(EXP_M2, abs=1e-15)


def test_significance_rejects_negative_delta():
    with pytest.raises(ValueError):
        significance(-1, DecayParams(1.0))


def test_decay_params_reject_nonpositive_lambda():
    with pytest.raises(NonPositiveLambda):
        DecayParams(0.0)


@given(lam=st.floats(1e-3, 5.0), d1=st.integers(0, 40), d2=st.integers(0, 40))
def test_monotone_decay(lam, d1, d2):
    if d1 == d2:
        return
    lo, hi = sorted((d1, d2))
    p = DecayParams(lam)
    assert significance(lo, p) > significance(hi, p)


@pytest.mark.parametrize("lam", [0.1, 0.5, 1.0, 2.5])
@pytest.mark.parametrize("delta", [0, 1, 2, 5, 10])
def test_significance_against_high_precision(lam, delta):
    assert abs(significance(delta, DecayParams(lam)) - float(high_precision_significance(lam, delta))) <= 1e-12


@pytest.mark.parametrize("delta", [1, 2, 3])
def test_difference_equation_converges(delta):
    lam, n = 1.0, 10**6
    assert abs(iterate_decay(lam, delta, n) - math.exp(-lam * delta)) <= 10 * lam**2 * delta / n


def test_factor_values():
    assert intermediate_factor(1.0) == 1.0
    assert intermediate_factor(0.5) == 0.0
    assert intermediate_factor(EXP_M1) == pytest.approx(TWO_MINUS_E, abs=1e-14)


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.0000001, 2.0])
def test_factor_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        intermediate_factor(bad)


def test_factor_range_on_grid():
    grid = np.linspace(1e-6, 1.0, 20001)
    factors = np.array([intermediate_factor(f) for f in grid])
    assert (factors <= 1.0).all()
    assert np.flatnonzero(factors == 1.0).tolist() == [len(grid) - 1]


def test_intermediate_weights_examples():
    assert intermediate_weights(np.array([2.0, -4.0]), 0, DecayParams(0.5)).tolist() == [2.0, -4.0]
    out = intermediate_weights(np.array([1.0]), 1, DecayParams(math.log(2)))
    assert out[0] == pytest.approx(0.0, abs=1e-15)
    out = intermediate_weights(np.array([3.0, 0.0, -1.5]), 2, DecayParams(0.1))
    np.testing.assert_allclose(out, np.array([3.0, 0.0, -1.5]) * TWO_MINUS_EXP_02, rtol=1e-14, atol=0)


def test_negative_factor_is_not_clamped_by_default():
    out = intermediate_weights(np.array([1.0]), 2, DecayParams(1.0))
    assert out[0] < 0
    clamped = intermediate_weights(np.array([1.0]), 2, DecayParams(1.0), clamp_min=0.0)
    assert clamped[0] == 0.0


def test_empty_weights_rejected():
    with pytest.raises(ValueError):
        intermediate_weights(np.array([]), 0, DecayParams(1.0))


@given(w=arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e6, 1e6)),
       lam=st.floats(1e-3, 10.0))
def test_zero_staleness_is_exact_fixed_point(w, lam):
    out = intermediate_weights(w, 0, DecayParams(lam))
    assert np.array_equal(out, w)
    assert out.shape == w.shape


def _bwd(stage, mini, start):
    return ScheduleEvent(stage, start, start + 2, Pass.BACKWARD, BatchRef(mini))


def test_delta_zero_without_commits():
    h = VersionHistory()
    h.record_forward(0, 1, 0)
    assert delta_of(_bwd(0, 1, 5), h).delta == 0


def test_delta_counts_two_missed_commits():
    # forward at 0, commits at 2 and 4 on stage 0, one on stage 1, backward starts at 5
    h = VersionHistory()
    h.record_forward(0, 3, 0)
    h.record_commit(0, 2, 1)
    h.record_commit(1, 3, 1)
    h.record_commit(0, 4, 2)
    assert delta_of(_bwd(0, 3, 5), h).delta == 2


def test_delta_boundaries():
    h = VersionHistory()
    h.record_forward(0, 1, 3)
    h.record_commit(0, 3, 1)  # visible to the forward at the same tick
    h.record_commit(0, 7, 2)  # lands exactly when the backward starts
    assert delta_of(_bwd(0, 1, 7), h).delta == 1


def test_delta_cutoff_excludes_late_commits():
    # two-stage, three mini-batch trace: mini-batch 2 forwards at stage 0 at tick 1,
    # its backward pass begins at tick 5, stage 0 commits at ticks 6 and 9, and its
    # stage-0 backward starts at 7. The commit at 6 is excluded by the cutoff.
    h = VersionHistory()
    h.record_forward(0, 2, 1)
    h.record_commit(0, 6, 1)
    ev = _bwd(0, 2, 7)
    assert delta_of(ev, h).delta == 1
    assert delta_of(ev, h, cutoff=5).delta == 0


def test_first_micro_batch_fixes_forward_tick():
    h = VersionHistory()
    h.record_forward(0, 1, 2)
    h.record_forward(0, 1, 3)
    h.record_commit(0, 3, 1)
    assert delta_of(_bwd(0, 1, 6), h).delta == 1


def test_unknown_forward_raises():
    with pytest.raises(UnknownVersion):
        delta_of(_bwd(0, 1, 5), VersionHistory())


def test_delta_of_rejects_forward_event():
    ev = ScheduleEvent(0, 0, 1, Pass.FORWARD, BatchRef(1, 0))
    with pytest.raises(ValueError):
        delta_of(ev, VersionHistory())
