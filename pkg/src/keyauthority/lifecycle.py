"""Private-key life cycle as a finite state machine.

Every physical instance of a private key gets its own machine.  Instances
are immutable values: ``apply`` and ``spawn`` return new objects and leave
their inputs untouched, so callers serialise writes per instance simply by
replacing their reference.
"""

from __future__ import annotations

import enum
import secrets
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping

from .errors import (
    ExportForbidden,
    IllegalTransition,
    InstanceRetired,
    InvalidHistory,
    SourceNotCopyable,
    SourceNotDeposited,
    SourceRetired,
)


class State(enum.Enum):
    NON_EXISTING = "NonExisting"
    STORABLE = "Storable"
    DEPOSITED = "Deposited"
    DELIVERABLE = "Deliverable"
    USABLE = "Usable"


class Transition(enum.Enum):
    GENERATE = "Generate"
    COPY_IN = "CopyIn"
    RECOVER_IN = "RecoverIn"
    DEPOSIT = "Deposit"
    STORE = "Store"
    DELIVER = "Deliver"
    USE = "Use"
    DESTRUCT = "Destruct"
    # recorded on the source instance; its state does not change
    COPY_SOURCE = "CopySource"
    RECOVER_SOURCE = "RecoverSource"


CONSTRUCTORS = frozenset({Transition.GENERATE, Transition.COPY_IN, Transition.RECOVER_IN})

S, T = State, Transition
_TABLE = {
    S.NON_EXISTING: frozenset({
        (T.GENERATE, S.STORABLE),
        (T.COPY_IN, S.STORABLE),
        (T.RECOVER_IN, S.STORABLE),
    }),
    S.STORABLE: frozenset({
        (T.DEPOSIT, S.DEPOSITED),
        (T.STORE, S.DELIVERABLE),
        (T.DESTRUCT, S.NON_EXISTING),
        (T.COPY_SOURCE, S.STORABLE),
    }),
    S.DEPOSITED: frozenset({
        (T.RECOVER_SOURCE, S.DEPOSITED),
        (T.DESTRUCT, S.NON_EXISTING),
    }),
    S.DELIVERABLE: frozenset({
        (T.DELIVER, S.USABLE),
        (T.DESTRUCT, S.NON_EXISTING),
    }),
    S.USABLE: frozenset({
        (T.USE, S.USABLE),
        (T.COPY_SOURCE, S.USABLE),
        (T.DESTRUCT, S.NON_EXISTING),
    }),
}
del S, T

TRANSITION_TABLE: Mapping[State, frozenset] = MappingProxyType(_TABLE)


def transition_table() -> Mapping[State, frozenset[tuple[Transition, State]]]:
    """Map each state to its set of ``(transition, next_state)`` edges."""
    return TRANSITION_TABLE


def next_state(state: State, t: Transition) -> State | None:
    for edge, target in TRANSITION_TABLE[state]:
        if edge is t:
            return target
    return None


class OriginKind(enum.Enum):
    GENERATED = "Generated"
    COPIED_FROM = "CopiedFrom"
    RECOVERED_FROM = "RecoveredFrom"


@dataclass(frozen=True)
class Origin:
    kind: OriginKind
    source: str | None = None

    @classmethod
    def generated(cls) -> "Origin":
        return cls(OriginKind.GENERATED)

    def to_doc(self) -> dict:
        doc = {"kind": self.kind.value}
        if self.source is not None:
            doc["source"] = self.source
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "Origin":
        return cls(OriginKind(doc["kind"]), doc.get("source"))


@dataclass(frozen=True)
class HistoryEntry:
    transition: Transition
    at: int
    actor: str
    detail: tuple[tuple[str, str], ...] = ()

    def to_doc(self) -> dict:
        return {
            "transition": self.transition.value,
            "at": self.at,
            "actor": self.actor,
            "detail": dict(self.detail),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "HistoryEntry":
        return cls(
            Transition(doc["transition"]),
            doc["at"],
            doc["actor"],
            tuple(sorted(doc.get("detail", {}).items())),
        )


def replay(history: Iterable[HistoryEntry]) -> State:
    """Fold a history over the transition table; raise InvalidHistory if it deviates."""
    state = State.NON_EXISTING
    seen_any = False
    for i, entry in enumerate(history):
        if seen_any and state is State.NON_EXISTING:
            raise InvalidHistory(f"entry {i} follows Destruct")
        if not seen_any and entry.transition not in CONSTRUCTORS:
            raise InvalidHistory("history must start with Generate, CopyIn or RecoverIn")
        if seen_any and entry.transition in CONSTRUCTORS:
            raise InvalidHistory(f"second constructor at entry {i}")
        target = next_state(state, entry.transition)
        if target is None:
            raise InvalidHistory(f"entry {i}: {entry.transition.value} not allowed from {state.value}")
        state = target
        seen_any = True
    if not seen_any:
        raise InvalidHistory("empty history")
    return state


@dataclass(frozen=True)
class KeyInstance:
    """One physical instance of a private key and its life-cycle record.

    ``exportable`` reflects the holding token: a token that refuses to export
    private material blocks copying out of Usable.
    """

    instance_id: str
    key_id: str
    origin: Origin
    history: tuple[HistoryEntry, ...]
    exportable: bool = True
    state: State = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "state", replay(self.history))

    @property
    def retired(self) -> bool:
        return self.history[-1].transition is Transition.DESTRUCT

    @property
    def use_count(self) -> int:
        return sum(1 for e in self.history if e.transition is Transition.USE)

    def to_doc(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "key_id": self.key_id,
            "origin": self.origin.to_doc(),
            "exportable": self.exportable,
            "history": [e.to_doc() for e in self.history],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "KeyInstance":
        return cls(
            instance_id=doc["instance_id"],
            key_id=doc["key_id"],
            origin=Origin.from_doc(doc["origin"]),
            history=tuple(HistoryEntry.from_doc(e) for e in doc["history"]),
            exportable=doc.get("exportable", True),
        )


def _detail(detail: Mapping[str, str] | None) -> tuple[tuple[str, str], ...]:
    return tuple(sorted((detail or {}).items()))


def apply(
    instance: KeyInstance,
    t: Transition,
    actor: str,
    now: int,
    detail: Mapping[str, str] | None = None,
) -> KeyInstance:
    if instance.retired:
        raise InstanceRetired(instance.instance_id)
    if t in CONSTRUCTORS or next_state(instance.state, t) is None:
        raise IllegalTransition(f"{t.value} not allowed from {instance.state.value}")
    if t is Transition.COPY_SOURCE and instance.state is State.USABLE and not instance.exportable:
        raise ExportForbidden(f"token holding {instance.instance_id} does not export keys")
    return replace(instance, history=instance.history + (HistoryEntry(t, now, actor, _detail(detail)),))


def new_instance_id() -> str:
    return "inst-" + secrets.token_hex(8)


def spawn(
    kind: Transition,
    key_id: str,
    origin: KeyInstance | None,
    actor: str,
    now: int,
    *,
    instance_id: str | None = None,
    exportable: bool | None = None,
    detail: Mapping[str, str] | None = None,
) -> tuple[KeyInstance, KeyInstance | None]:
    """Construct a new Storable instance.

    Returns ``(new_instance, updated_source)``; ``updated_source`` carries the
    CopySource/RecoverSource event and is None for Generate.
    """
    instance_id = instance_id or new_instance_id()
    if kind is Transition.GENERATE:
        inst = KeyInstance(
            instance_id, key_id, Origin.generated(),
            (HistoryEntry(kind, now, actor, _detail(detail)),),
            exportable=True if exportable is None else exportable,
        )
        return inst, None

    if kind not in (Transition.COPY_IN, Transition.RECOVER_IN):
        raise IllegalTransition(f"{kind.value} does not construct an instance")
    if origin is None:
        raise IllegalTransition(f"{kind.value} requires a source instance")
    if origin.retired:
        raise SourceRetired(origin.instance_id)
    if origin.key_id != key_id:
        raise IllegalTransition("source instance embodies a different key")

    if kind is Transition.COPY_IN:
        if next_state(origin.state, Transition.COPY_SOURCE) is None:
            raise SourceNotCopyable(f"cannot copy from {origin.state.value}")
        if origin.state is State.USABLE and not origin.exportable:
            raise ExportForbidden(f"token holding {origin.instance_id} does not export keys")
        source_event, origin_kind = Transition.COPY_SOURCE, OriginKind.COPIED_FROM
    else:
        if origin.state is not State.DEPOSITED:
            raise SourceNotDeposited(f"cannot recover from {origin.state.value}")
        source_event, origin_kind = Transition.RECOVER_SOURCE, OriginKind.RECOVERED_FROM

    updated = replace(
        origin,
        history=origin.history + (HistoryEntry(source_event, now, actor, (("target", instance_id),)),),
    )
    inst = KeyInstance(
        instance_id, key_id, Origin(origin_kind, origin.instance_id),
        (HistoryEntry(kind, now, actor, _detail(detail)),),
        exportable=origin.exportable if exportable is None else exportable,
    )
    return inst, updated


def enumerate_legal_paths(max_len: int) -> set[tuple[Transition, ...]]:
    """All transition sequences of length 1..max_len accepted from the initial state.

    Plain depth-first expansion of the table, independent of ``apply``.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    paths: set[tuple[Transition, ...]] = set()

    def walk(state: State, path: tuple[Transition, ...]) -> None:
        if path:
            paths.add(path)
        if len(path) == max_len or (path and state is State.NON_EXISTING):
            return
        for t, target in TRANSITION_TABLE[state]:
            if path and t in CONSTRUCTORS:
                continue
            walk(target, path + (t,))

    walk(State.NON_EXISTING, ())
    return paths


def path_end_state(path: Iterable[Transition]) -> State:
    state = State.NON_EXISTING
    for t in path:
        target = next_state(state, t)
        if target is None:
            raise IllegalTransition(t.value)
        state = target
    return state
