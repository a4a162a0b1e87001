import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from keyauthority import lifecycle
from keyauthority.errors import (
    ExportForbidden,
    IllegalTransition,
    InstanceRetired,
    InvalidHistory,
    SourceNotCopyable,
    SourceNotDeposited,
    SourceRetired,
)
from keyauthority.lifecycle import HistoryEntry, OriginKind, State, Transition as T

S = State
EXPECTED = {
    S.NON_EXISTING: {(T.GENERATE, S.STORABLE), (T.COPY_IN, S.STORABLE), (T.RECOVER_IN, S.STORABLE)},
    S.STORABLE: {(T.DEPOSIT, S.DEPOSITED), (T.STORE, S.DELIVERABLE), (T.DESTRUCT, S.NON_EXISTING),
                 (T.COPY_SOURCE, S.STORABLE)},
    S.DEPOSITED: {(T.RECOVER_SOURCE, S.DEPOSITED), (T.DESTRUCT, S.NON_EXISTING)},
    S.DELIVERABLE: {(T.DELIVER, S.USABLE), (T.DESTRUCT, S.NON_EXISTING)},
    S.USABLE: {(T.USE, S.USABLE), (T.COPY_SOURCE, S.USABLE), (T.DESTRUCT, S.NON_EXISTING)},
}


def fresh(key="k1", exportable=True):
    inst, src = lifecycle.spawn(T.GENERATE, key, None, "op", 0, exportable=exportable)
    assert src is None
    return inst


def walk(inst, *ts):
    for t in ts:
        inst = lifecycle.apply(inst, t, "op", 1)
    return inst


def test_table_is_exactly_the_documented_one():
    table = lifecycle.transition_table()
    assert {s: set(v) for s, v in table.items()} == EXPECTED
    with pytest.raises(TypeError):
        table[S.USABLE] = frozenset()


def test_generate_then_full_life():
    inst = fresh()
    assert inst.state is S.STORABLE and inst.origin.kind is OriginKind.GENERATED
    inst = walk(inst, T.STORE, T.DELIVER, T.USE, T.USE)
    assert inst.state is S.USABLE and inst.use_count == 2
    inst = walk(inst, T.DESTRUCT)
    assert inst.state is S.NON_EXISTING and inst.retired


def test_instances_are_immutable_values():
    inst = fresh()
    after = walk(inst, T.STORE)
    assert inst.state is S.STORABLE and after.state is S.DELIVERABLE
    with pytest.raises(Exception):
        inst.instance_id = "x"


@pytest.mark.parametrize("path,bad", [
    ((T.STORE,), T.DEPOSIT),            # Deliverable cannot be deposited
    ((T.DEPOSIT,), T.USE),
    ((), T.DELIVER),
    ((T.STORE, T.DELIVER), T.DEPOSIT),  # Usable must be copied first
    ((), T.GENERATE),                   # constructors never apply to an existing instance
    ((), T.RECOVER_SOURCE),
])
def test_illegal_edges_rejected(path, bad):
    with pytest.raises(IllegalTransition):
        walk(fresh(), *path, bad)


def test_retired_instance_rejects_everything():
    dead = walk(fresh(), T.DESTRUCT)
    for t in T:
        with pytest.raises(InstanceRetired):
            lifecycle.apply(dead, t, "op", 2)


def test_copy_from_storable_and_usable():
    for path in [(), (T.STORE, T.DELIVER)]:
        src = walk(fresh(), *path)
        new, updated = lifecycle.spawn(T.COPY_IN, "k1", src, "op", 3)
        assert new.state is S.STORABLE
        assert new.origin.kind is OriginKind.COPIED_FROM and new.origin.source == src.instance_id
        assert updated.state is src.state
        assert updated.history[-1].transition is T.COPY_SOURCE
        assert dict(updated.history[-1].detail)["target"] == new.instance_id


@pytest.mark.parametrize("path", [(T.DEPOSIT,), (T.STORE,)])
def test_copy_from_other_states_rejected(path):
    with pytest.raises(SourceNotCopyable):
        lifecycle.spawn(T.COPY_IN, "k1", walk(fresh(), *path), "op", 3)


def test_copy_from_non_exportable_usable_forbidden():
    src = walk(fresh(exportable=False), T.STORE, T.DELIVER)
    with pytest.raises(ExportForbidden):
        lifecycle.spawn(T.COPY_IN, "k1", src, "op", 3)
    with pytest.raises(ExportForbidden):
        lifecycle.apply(src, T.COPY_SOURCE, "op", 3)


def test_recover_only_from_deposited():
    dep = walk(fresh(), T.DEPOSIT)
    new, updated = lifecycle.spawn(T.RECOVER_IN, "k1", dep, "op", 3)
    assert new.state is S.STORABLE and new.origin.kind is OriginKind.RECOVERED_FROM
    assert updated.state is S.DEPOSITED
    with pytest.raises(SourceNotDeposited):
        lifecycle.spawn(T.RECOVER_IN, "k1", fresh(), "op", 3)


def test_spawn_from_retired_or_foreign_source():
    with pytest.raises(SourceRetired):
        lifecycle.spawn(T.COPY_IN, "k1", walk(fresh(), T.DESTRUCT), "op", 3)
    with pytest.raises(IllegalTransition):
        lifecycle.spawn(T.COPY_IN, "other", fresh(), "op", 3)
    with pytest.raises(IllegalTransition):
        lifecycle.spawn(T.COPY_IN, "k1", None, "op", 3)


def test_per_instance_machines_are_independent():
    a = walk(fresh(), T.STORE, T.DELIVER)
    b, a = lifecycle.spawn(T.COPY_IN, "k1", a, "op", 3)
    a = walk(a, T.DESTRUCT)
    assert a.retired and b.state is S.STORABLE
    assert walk(b, T.STORE).state is S.DELIVERABLE


@pytest.mark.parametrize("history", [
    [],
    [T.STORE],
    [T.GENERATE, T.GENERATE],
    [T.GENERATE, T.DESTRUCT, T.USE],
    [T.GENERATE, T.DEPOSIT, T.STORE],
])
def test_replay_rejects_invalid_histories(history):
    with pytest.raises(InvalidHistory):
        lifecycle.replay([HistoryEntry(t, 0, "op") for t in history])


def test_doc_roundtrip():
    inst = walk(fresh(), T.STORE, T.DELIVER, T.USE)
    back = lifecycle.KeyInstance.from_doc(inst.to_doc())
    assert back == inst and back.state is S.USABLE


def test_enumerate_legal_paths_small_cases():
    assert lifecycle.enumerate_legal_paths(1) == {(T.GENERATE,), (T.COPY_IN,), (T.RECOVER_IN,)}
    with pytest.raises(ValueError):
        lifecycle.enumerate_legal_paths(0)


def test_enumeration_matches_exhaustive_product():
    """Every sequence over the alphabet of length <= 4 is legal iff enumerated."""
    legal = lifecycle.enumerate_legal_paths(4)
    for n in range(1, 5):
        for seq in itertools.product(list(T), repeat=n):
            try:
                lifecycle.replay([HistoryEntry(t, 0, "op") for t in seq])
                ok = True
            except InvalidHistory:
                ok = False
            assert ok == (seq in legal), seq


@given(st.lists(st.sampled_from(list(T)), max_size=12))
def test_apply_never_produces_unreplayable_instance(ts):
    inst = fresh()
    for t in ts:
        try:
            inst = lifecycle.apply(inst, t, "op", 1)
        except (IllegalTransition, InstanceRetired, ExportForbidden):
            continue
        assert lifecycle.replay(inst.history) is inst.state
