import pytest
from hypothesis import given, settings, strategies as st

from pipesim.core import BatchRef, Pass
from pipesim.scheduler import (
    CycleViolation,
    DependencyViolation,
    OverlapViolation,
    ScheduleEvent,
    TIMELINE_COLUMNS,
    Timeline,
    build_1f1b,
    build_nf1b,
    build_timeline,
    dependency_graph,
    render_gantt,
    timeline_csv,
    verify_timeline,
)

from conftest import SWEEP, make_cfg
from oracles import brute_force_schedule, oracle_span_and_idle


def pd(**kw):
    return make_cfg("PipeDream", **kw)


def tp(**kw):
    return make_cfg("TiMePReSt", **kw)


def test_two_stage_two_batch_hand_enumerated():
    t = build_1f1b(pd(stages=2, mini_batches=2, micro_batches=1, fwd_cost=1, bwd_cost=2))
    got = [(e.stage, e.start_tick, e.end_tick, e.kind.value, e.batch.mini_batch) for e in t.events]
    assert got == [
        (0, 0, 1, "F", 1),
        (0, 1, 2, "F", 2),
        (1, 1, 2, "F", 1),
        (1, 2, 4, "B", 1),
        (0, 4, 6, "B", 1),
        (1, 4, 5, "F", 2),
        (1, 5, 7, "B", 2),
        (0, 7, 9, "B", 2),
    ]
    # frozen from the brute-force oracle
    assert oracle_span_and_idle(2, 2, [None], 1, 2) == (9, [3, 3])
    assert t.epoch_span == 9
    assert t.idle_ticks_per_stage == (3, 3)


@pytest.mark.parametrize("S", [2, 3, 4, 5])
def test_single_batch_is_a_staircase(S):
    t = build_1f1b(pd(stages=S, mini_batches=1, micro_batches=1, fwd_cost=1, bwd_cost=2))
    assert t.epoch_span == S * 1 + S * 2
    assert len(t.events) == 2 * S


def test_fig2_timeprest_shape():
    t = build_nf1b(tp(stages=4, mini_batches=2, micro_batches=2))
    for s in range(4):
        lane = t.on_stage(s)
        assert [e.batch.label() for e in lane if e.kind is Pass.FORWARD] == ["1a", "1b", "2a", "2b"]
        assert [e.batch.mini_batch for e in lane if e.kind is Pass.BACKWARD] == [1, 2]
        assert all(e.batch.micro_batch is None for e in lane if e.kind is Pass.BACKWARD)


def test_nf1b_three_batches_matches_oracle():
    # span and idle frozen from oracles.brute_force_schedule(2, 3, [0, 1], 1, 2)
    t = build_nf1b(tp(stages=2, mini_batches=3, micro_batches=2))
    assert oracle_span_and_idle(2, 3, [0, 1], 1, 2) == (15, [3, 3])
    assert t.epoch_span == 15
    assert t.idle_ticks_per_stage == (3, 3)


@pytest.mark.parametrize("S, M, m", [(S, M, m) for S in (2, 3, 4) for M in (1, 3, 6) for m in (1, 2, 3)])
def test_events_match_brute_force(S, M, m):
    for cfg, micro_ids in ((pd(stages=S, mini_batches=M, micro_batches=m), [None]),
                           (tp(stages=S, mini_batches=M, micro_batches=m), list(range(m)))):
        t = build_timeline(cfg)
        want = brute_force_schedule(S, M, micro_ids, cfg.fwd_cost, cfg.bwd_cost, m)
        got = {(e.kind.value, e.stage, e.batch.mini_batch, e.batch.micro_batch): (e.stage, e.start_tick, e.end_tick)
               for e in t.events}
        assert got == want


@pytest.mark.parametrize("S, M, m", SWEEP)
def test_generated_timelines_verify(S, M, m):
    for cfg in (pd(stages=S, mini_batches=M, micro_batches=m), tp(stages=S, mini_batches=M, micro_batches=m)):
        assert verify_timeline(build_timeline(cfg), cfg) == []


def test_overlap_detected():
    cfg = tp(stages=2, mini_batches=1, micro_batches=1)
    t = build_nf1b(cfg)
    first = t.events[0]
    shifted = ScheduleEvent(0, first.start_tick, first.end_tick, Pass.FORWARD, BatchRef(9, 0))
    bad = Timeline.from_events(list(t.events) + [shifted], 2)
    kinds = {type(v) for v in verify_timeline(bad, cfg)}
    assert OverlapViolation in kinds


def test_backward_before_forward_detected():
    cfg = tp(stages=2, mini_batches=1, micro_batches=1, fwd_cost=1, bwd_cost=2)
    events = [
        ScheduleEvent(1, 0, 2, Pass.BACKWARD, BatchRef(1)),
        ScheduleEvent(0, 0, 1, Pass.FORWARD, BatchRef(1, 0)),
        ScheduleEvent(1, 2, 3, Pass.FORWARD, BatchRef(1, 0)),
        ScheduleEvent(0, 3, 5, Pass.BACKWARD, BatchRef(1)),
    ]
    problems = verify_timeline(Timeline.from_events(events, 2), cfg)
    assert any(isinstance(v, DependencyViolation) for v in problems)
    assert any(isinstance(v, CycleViolation) for v in problems)


def test_dependency_graph_is_acyclic_for_generated():
    from graphlib import TopologicalSorter
    cfg = tp(stages=4, mini_batches=8, micro_batches=2)
    order = list(TopologicalSorter(dependency_graph(build_timeline(cfg), cfg)).static_order())
    assert len(order) == 4 * 8 * 3


@settings(max_examples=60, deadline=None)
@given(S=st.integers(2, 5), M=st.integers(1, 8), m=st.integers(1, 3),
       fwd=st.integers(1, 3), bwd=st.integers(1, 4))
def test_conservation_and_validity(S, M, m, fwd, bwd):
    for cfg, n_fwd in ((pd(stages=S, mini_batches=M, micro_batches=m, fwd_cost=fwd, bwd_cost=bwd), S * M),
                       (tp(stages=S, mini_batches=M, micro_batches=m, fwd_cost=fwd, bwd_cost=bwd), S * M * m)):
        t = build_timeline(cfg)
        assert t.count(Pass.FORWARD) == n_fwd
        assert t.count(Pass.BACKWARD) == S * M
        assert verify_timeline(t, cfg) == []
        assert t.epoch_span == max(e.end_tick for e in t.events)


@settings(max_examples=40, deadline=None)
@given(S=st.integers(2, 5), M=st.integers(1, 8))
def test_nf1b_with_one_micro_batch_degenerates(S, M):
    a = build_1f1b(pd(stages=S, mini_batches=M, micro_batches=1))
    b = build_nf1b(tp(stages=S, mini_batches=M, micro_batches=1))
    assert a.epoch_span == b.epoch_span
    strip = lambda t: sorted((e.stage, e.start_tick, e.end_tick, e.kind.value, e.batch.mini_batch) for e in t.events)
    assert strip(a) == strip(b)


@settings(max_examples=30, deadline=None)
@given(S=st.integers(2, 5), M=st.integers(1, 7), m=st.integers(1, 3))
def test_span_monotone_in_mini_batches(S, M, m):
    for make in (pd, tp):
        a = build_timeline(make(stages=S, mini_batches=M, micro_batches=m))
        b = build_timeline(make(stages=S, mini_batches=M + 1, micro_batches=m))
        assert a.epoch_span <= b.epoch_span


def test_deterministic():
    cfg = tp(stages=4, mini_batches=8, micro_batches=2)
    assert timeline_csv(build_nf1b(cfg)) == timeline_csv(build_nf1b(cfg))


def test_builders_reject_wrong_family():
    with pytest.raises(ValueError):
        build_1f1b(tp())
    with pytest.raises(ValueError):
        build_nf1b(pd())


def test_csv_schema_and_order():
    t = build_nf1b(tp(stages=2, mini_batches=2, micro_batches=2))
    lines = timeline_csv(t).splitlines()
    assert lines[0] == ",".join(TIMELINE_COLUMNS)
    rows = [l.split(",") for l in lines[1:]]
    assert len(rows) == len(t.events)
    assert all(len(r) == 6 for r in rows)
    keys = [(int(r[1]), int(r[0])) for r in rows]
    assert keys == sorted(keys)
    assert all(r[5] == "" for r in rows if r[3] == "B")


def test_gantt_first_row_matches_figure():
    t = build_nf1b(tp(stages=4, mini_batches=4, micro_batches=2))
    row0 = render_gantt(t, 4).splitlines()[0]
    assert row0.split("|")[1].split()[:8] == ["1a", "1b", "2a", "2b", "3a", "3b", "4a", "4b"]


@pytest.mark.parametrize("S, M, m", SWEEP)
def test_gantt_cells_cover_event_ticks(S, M, m):
    for cfg in (pd(stages=S, mini_batches=M, micro_batches=m), tp(stages=S, mini_batches=M, micro_batches=m)):
        t = build_timeline(cfg)
        grid = render_gantt(t, S).splitlines()
        cells = [c for row in grid for c in row.split("|")[1].split()]
        busy = sum(1 for c in cells if c != ".")
        rows = [l.split(",") for l in timeline_csv(t).splitlines()[1:]]
        assert busy == sum(int(r[2]) - int(r[1]) for r in rows)
