"""Organisational measures: operator login, dual-control approvals, audit chain."""

from __future__ import annotations

import hashlib
import secrets
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

from . import store
from .crypto import KdfParams, check_verifier, make_verifier
from .errors import (
    AuthenticationFailed,
    DualControlRequired,
    OperatorInactive,
    ParameterMismatch,
    TokenExpired,
    TokenReused,
    UnknownOperator,
)

DEFAULT_TOKEN_TTL = 600
GENESIS_HASH = "0" * 64

DEFAULT_DUAL_CONTROL = frozenset({
    "recover_key",
    "copy_key",
    "transfer_ownership",
    "generate_issuer_key",
    "rollover_issuing_key",
    "destroy_key",
    "add_operator",
})


def parameters_digest(operation_name: str, params: Mapping[str, Any]) -> bytes:
    """Digest binding an approval to an operation and its exact arguments."""
    return store.digest({"operation": operation_name, "params": dict(params)})


@dataclass(frozen=True)
class Operator:
    operator_id: str
    credential: dict = field(repr=False)
    active: bool = True

    def to_doc(self) -> dict:
        return {"operator_id": self.operator_id, "credential": self.credential,
                "active": self.active}

    @classmethod
    def from_doc(cls, doc: dict) -> "Operator":
        return cls(doc["operator_id"], doc["credential"], doc["active"])


@dataclass(frozen=True)
class Session:
    session_id: str
    operator_id: str
    opened_at: int


@dataclass(frozen=True)
class ApprovalToken:
    token_id: str
    operation_name: str
    parameters_digest: bytes
    approvers: frozenset[str]
    created_at: int
    expires_at: int


class OperatorRegistry:
    """Operators, their credential verifiers, and the sessions they opened."""

    def __init__(self, kdf: KdfParams = KdfParams()):
        self.kdf = kdf
        self.operators: dict[str, Operator] = {}
        self._sessions: dict[str, Session] = {}
        self._dummy = make_verifier(secrets.token_hex(16), kdf)
        self._lock = threading.Lock()

    def add(self, operator_id: str, passphrase: str) -> Operator:
        store.check_id(operator_id)
        with self._lock:
            if operator_id in self.operators:
                raise AuthenticationFailed(f"operator {operator_id} already exists")
            op = Operator(operator_id, make_verifier(passphrase, self.kdf))
            self.operators[operator_id] = op
            return op

    def load(self, op: Operator) -> None:
        self.operators[op.operator_id] = op

    def set_active(self, operator_id: str, active: bool) -> Operator:
        op = self.get(operator_id)
        op = Operator(op.operator_id, op.credential, active)
        self.operators[operator_id] = op
        return op

    def get(self, operator_id: str) -> Operator:
        try:
            return self.operators[operator_id]
        except KeyError:
            raise UnknownOperator(operator_id) from None

    def login(self, operator_id: str, passphrase: str, now: int) -> Session:
        op = self.operators.get(operator_id)
        # unknown ids still pay for one KDF run so timing does not leak membership
        ok = check_verifier(op.credential if op else self._dummy, passphrase)
        if op is None or not ok:
            raise AuthenticationFailed("bad operator credentials")
        if not op.active:
            raise OperatorInactive(operator_id)
        session = Session("sess-" + secrets.token_hex(8), operator_id, now)
        with self._lock:
            self._sessions[session.session_id] = session
        return session

    def logout(self, session: Session) -> None:
        with self._lock:
            self._sessions.pop(session.session_id, None)

    def is_live(self, session: Session) -> bool:
        return self._sessions.get(session.session_id) == session


class ApprovalGate:
    """Issues approval tokens and enforces their single use."""

    def __init__(self, operators: OperatorRegistry, dual_control: Iterable[str] = DEFAULT_DUAL_CONTROL,
                 ttl: int = DEFAULT_TOKEN_TTL):
        self.operators = operators
        self.dual_control = frozenset(dual_control)
        self.ttl = ttl
        self._issued: dict[str, ApprovalToken] = {}
        self._used: set[str] = set()
        self._lock = threading.Lock()

    def required_approvers(self, operation_name: str) -> int:
        return 2 if operation_name in self.dual_control else 1

    def authorize(self, operation_name: str, digest: bytes, sessions: Iterable[Session],
                  now: int) -> ApprovalToken:
        approvers = set()
        for s in sessions:
            if not self.operators.is_live(s):
                raise AuthenticationFailed(f"session for {s.operator_id} is not authenticated")
            if not self.operators.get(s.operator_id).active:
                raise OperatorInactive(s.operator_id)
            approvers.add(s.operator_id)
        need = self.required_approvers(operation_name)
        if len(approvers) < need:
            if need == 2:
                raise DualControlRequired(
                    f"{operation_name} needs {need} distinct operators, got {len(approvers)}")
            raise AuthenticationFailed(f"{operation_name} needs an authenticated operator")
        token = ApprovalToken("tok-" + secrets.token_hex(8), operation_name, bytes(digest),
                              frozenset(approvers), now, now + self.ttl)
        with self._lock:
            self._issued[token.token_id] = token
        return token

    def consume(self, token: ApprovalToken, operation_name: str, digest: bytes, now: int) -> None:
        with self._lock:
            issued = self._issued.get(token.token_id)
            if issued is None or issued != token:
                raise AuthenticationFailed("approval token was not issued here")
            if token.token_id in self._used:
                raise TokenReused(token.token_id)
            if now >= token.expires_at:
                raise TokenExpired(token.token_id)
            if token.operation_name != operation_name or token.parameters_digest != bytes(digest):
                raise ParameterMismatch(f"token approves {token.operation_name} with other parameters")
            self._used.add(token.token_id)


# audit

@dataclass(frozen=True)
class AuditRecord:
    seq: int
    timestamp: int
    operation_name: str
    parameters_digest: bytes
    operator_ids: tuple[str, ...]
    note: str
    prev_hash: str
    record_hash: str = ""

    def body(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp,
            "operation_name": self.operation_name,
            "parameters_digest": self.parameters_digest,
            "operator_ids": list(self.operator_ids),
            "note": self.note,
            "prev_hash": self.prev_hash,
        }

    def compute_hash(self) -> str:
        return hashlib.sha256(store.canonical_encode(self.body())).hexdigest()

    def to_doc(self) -> dict:
        return {**self.body(), "record_hash": self.record_hash}

    @classmethod
    def from_doc(cls, doc: dict) -> "AuditRecord":
        return cls(doc["seq"], doc["timestamp"], doc["operation_name"], doc["parameters_digest"],
                   tuple(doc["operator_ids"]), doc["note"], doc["prev_hash"], doc["record_hash"])


@dataclass(frozen=True)
class AuditVerdict:
    valid: bool
    broken_seq: int | None = None
    reason: str | None = None

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {"valid": self.valid}
        if self.broken_seq is not None:
            doc["broken_seq"] = self.broken_seq
        if self.reason:
            doc["reason"] = self.reason
        return doc


class AuditLog:
    """Append-only hash chain.  ``sink`` persists each record before it is visible."""

    def __init__(self, records: Iterable[AuditRecord] = (),
                 sink: Callable[[AuditRecord], None] | None = None):
        self.records: list[AuditRecord] = list(records)
        self.sink = sink
        self._lock = threading.Lock()

    @property
    def head(self) -> str:
        return self.records[-1].record_hash if self.records else GENESIS_HASH

    def append(self, operation_name: str, digest: bytes, operator_ids: Iterable[str],
               now: int, note: str = "") -> AuditRecord:
        with self._lock:
            rec = AuditRecord(len(self.records), now, operation_name, bytes(digest),
                              tuple(sorted(operator_ids)), note, self.head)
            rec = AuditRecord(**{**rec.__dict__, "record_hash": rec.compute_hash()})
            if self.sink is not None:
                self.sink(rec)
            self.records.append(rec)
            return rec

    def head_doc(self) -> dict:
        return {"count": len(self.records), "head": self.head}

    def verify(self) -> AuditVerdict:
        return verify_audit_chain(self.records, self.head_doc())


def verify_audit_chain(records: Iterable[AuditRecord | dict | bytes],
                       expected_head: Mapping[str, Any] | None = None) -> AuditVerdict:
    """Recompute every hash and link; report the first broken position.

    ``expected_head`` (``{"count", "head"}``) catches truncation at the tail,
    which the chain alone cannot reveal.
    """
    prev = GENESIS_HASH
    n = 0
    for i, raw in enumerate(records):
        n = i + 1
        try:
            rec = raw if isinstance(raw, AuditRecord) else AuditRecord.from_doc(raw)
        except (KeyError, TypeError, AttributeError, ValueError):
            return AuditVerdict(False, i, "MalformedRecord")
        if rec.seq != i:
            return AuditVerdict(False, i, "SequenceGap")
        if rec.prev_hash != prev:
            return AuditVerdict(False, i, "LinkBroken")
        try:
            recomputed = rec.compute_hash()
        except Exception:
            return AuditVerdict(False, i, "MalformedRecord")
        if recomputed != rec.record_hash:
            return AuditVerdict(False, i, "HashMismatch")
        prev = rec.record_hash
    if expected_head is not None:
        if expected_head.get("count") != n:
            return AuditVerdict(False, min(n, expected_head.get("count", n)), "LengthMismatch")
        if expected_head.get("head") != prev:
            return AuditVerdict(False, max(n - 1, 0), "HeadMismatch")
    return AuditVerdict(True)
