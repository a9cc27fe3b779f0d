import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escherloop.population import AgentRecord, Kind, Population, PopulationError, default_descriptor


def opt(i, score, it=0, payload="x"):
    return AgentRecord(f"o{i}", Kind.OPTIMIZER, payload, score, created_at_iteration=it)


def task(i, score, it=0):
    return AgentRecord(f"t{i}", Kind.TASK, "{}", score, created_at_iteration=it)


def full_pop(n=50, base=1100.0):
    return Population(Kind.OPTIMIZER, 50, [opt(i, base + i) for i in range(n)])


def test_insert_below_cap_no_eviction():
    pop = full_pop(49)
    assert pop.insert(opt(99, 1000.0, it=1)) == []
    assert len(pop) == 50


def test_unique_lowest_newcomer_is_evicted():
    pop = full_pop(50)
    before = [m.id for m in pop]
    evicted = pop.insert(opt(99, 900.0, it=1))
    assert [e.id for e in evicted] == ["o99"]
    assert [m.id for m in pop] == before


def test_weaker_member_removed_for_stronger_newcomer():
    pop = full_pop(50)
    pop.members[0].score = 1000.0
    evicted = pop.insert(opt(99, 1050.0, it=1))
    assert [e.id for e in evicted] == ["o0"]
    assert "o99" in pop and len(pop) == 50


def test_ties_evict_older_record():
    pop = Population(Kind.TASK, 2, [task(0, 0.5, it=0), task(1, 0.5, it=3)])
    evicted = pop.insert(task(2, 0.9, it=5))
    assert [e.id for e in evicted] == ["t0"]


def test_newcomer_tied_at_bottom_survives():
    pop = Population(Kind.TASK, 2, [task(0, 0.5, it=0), task(1, 0.7, it=0)])
    evicted = pop.insert(task(2, 0.5, it=4))
    assert [e.id for e in evicted] == ["t0"]
    assert "t2" in pop


def test_insert_rejects_duplicates_and_kind_mismatch():
    pop = Population(Kind.TASK, 5, [task(0, 0.1)])
    with pytest.raises(PopulationError):
        pop.insert(task(0, 0.2))
    with pytest.raises(PopulationError):
        pop.insert(opt(1, 1200.0))


def test_best_tie_rule():
    pop = Population(Kind.TASK, 10, [task(0, 0.3, it=2), task(1, 0.9, it=5), task(2, 0.9, it=1)])
    assert pop.best().id == "t2"


def test_best_singleton_and_max():
    assert Population(Kind.TASK, 1, [task(7, 0.0)]).best().id == "t7"
    pop = Population(Kind.OPTIMIZER, 3, [opt(0, 1200.0), opt(1, 1216.0), opt(2, 1184.0)])
    assert pop.best().score == 1216.0


def test_best_empty_raises():
    with pytest.raises(PopulationError):
        Population(Kind.TASK, 3).best()


def test_roundtrip_dict():
    pop = Population(Kind.OPTIMIZER, 4, [opt(0, 1200.0), opt(1, 1210.5, it=3)])
    pop.members[1].parent_ids = ["o0"]
    again = Population.from_dict(pop.to_dict())
    assert [m.to_dict() for m in again] == [m.to_dict() for m in pop]


def test_map_elites_overlay_is_per_cell():
    # same payload length and eval_count -> same cell; only the stronger survives
    pop = Population(Kind.OPTIMIZER, 50, [opt(0, 1200.0, payload="a" * 10)], descriptor=default_descriptor)
    evicted = pop.insert(opt(1, 1250.0, it=1, payload="b" * 10))
    assert [e.id for e in evicted] == ["o0"]
    # a different cell coexists
    assert pop.insert(opt(2, 1100.0, it=2, payload="c" * 600)) == []
    assert len(pop) == 2


@settings(max_examples=60, deadline=None)
@given(
    cap=st.integers(1, 12),
    scores=st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=40),
)
def test_cap_and_best_match_linear_scan(cap, scores):
    pop = Population(Kind.TASK, cap)
    for i, s in enumerate(scores):
        pop.insert(task(i, s, it=i))
        assert len(pop) <= cap
        assert pop.best().score == max(m.score for m in pop.members)
