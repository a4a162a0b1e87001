import pytest

from keyauthority.control import (
    GENESIS_HASH,
    ApprovalGate,
    AuditLog,
    AuditRecord,
    OperatorRegistry,
    parameters_digest,
    verify_audit_chain,
)
from keyauthority.crypto import KdfParams
from keyauthority.errors import (
    AuthenticationFailed,
    DualControlRequired,
    OperatorInactive,
    ParameterMismatch,
    TokenExpired,
    TokenReused,
    UnknownOperator,
)


@pytest.fixture
def ops():
    reg = OperatorRegistry(KdfParams(log2n=4))
    reg.add("alice", "pa")
    reg.add("bob", "pb")
    return reg


def test_login(ops):
    s = ops.login("alice", "pa", 0)
    assert ops.is_live(s)
    with pytest.raises(AuthenticationFailed):
        ops.login("alice", "wrong", 0)
    with pytest.raises(AuthenticationFailed):
        ops.login("mallory", "pa", 0)
    ops.set_active("bob", False)
    with pytest.raises(OperatorInactive):
        ops.login("bob", "pb", 0)
    ops.logout(s)
    assert not ops.is_live(s)
    with pytest.raises(UnknownOperator):
        ops.get("mallory")
    with pytest.raises(AuthenticationFailed):
        ops.add("alice", "again")


def test_dual_control(ops):
    gate = ApprovalGate(ops, {"recover_key"}, ttl=600)
    a, b = ops.login("alice", "pa", 0), ops.login("bob", "pb", 0)
    d = parameters_digest("recover_key", {"deposit_id": "d1"})
    with pytest.raises(DualControlRequired):
        gate.authorize("recover_key", d, [a], 0)
    with pytest.raises(DualControlRequired):
        gate.authorize("recover_key", d, [a, a], 0)
    tok = gate.authorize("recover_key", d, [a, b], 0)
    assert tok.approvers == {"alice", "bob"}
    gate.consume(tok, "recover_key", d, 10)
    with pytest.raises(TokenReused):
        gate.consume(tok, "recover_key", d, 10)


def test_single_control_needs_one_session(ops):
    gate = ApprovalGate(ops, set())
    with pytest.raises(AuthenticationFailed):
        gate.authorize("issue_certificate", b"d", [], 0)


def test_token_binding(ops):
    gate = ApprovalGate(ops, set(), ttl=600)
    a = ops.login("alice", "pa", 0)
    d1 = parameters_digest("revoke", {"serial": 1})
    d2 = parameters_digest("revoke", {"serial": 2})
    tok = gate.authorize("revoke", d1, [a], 0)
    with pytest.raises(ParameterMismatch):
        gate.consume(tok, "revoke", d2, 1)
    with pytest.raises(ParameterMismatch):
        gate.consume(tok, "publish_crl", d1, 1)
    tok2 = gate.authorize("revoke", d1, [a], 0)
    with pytest.raises(TokenExpired):
        gate.consume(tok2, "revoke", d1, 600)


def test_forged_token_and_dead_session(ops):
    gate = ApprovalGate(ops, set())
    a = ops.login("alice", "pa", 0)
    tok = gate.authorize("x", b"d", [a], 0)
    from dataclasses import replace
    with pytest.raises(AuthenticationFailed):
        gate.consume(replace(tok, approvers=frozenset({"alice", "bob"})), "x", b"d", 0)
    ops.logout(a)
    with pytest.raises(AuthenticationFailed):
        gate.authorize("x", b"d", [a], 0)


def build_log(n=10):
    log = AuditLog()
    for i in range(n):
        log.append(f"op{i}", bytes([i]) * 32, ["alice"], 100 + i, note=str(i))
    return log


def test_chain_links():
    log = build_log(3)
    assert log.records[0].prev_hash == GENESIS_HASH
    assert log.records[1].prev_hash == log.records[0].record_hash
    assert log.verify().valid


def test_sink_failure_keeps_log_unchanged():
    def sink(rec):
        raise OSError("disk full")

    log = AuditLog(sink=sink)
    with pytest.raises(OSError):
        log.append("x", b"d", [], 0)
    assert log.records == []


def docs(log):
    return [r.to_doc() for r in log.records]


def test_detects_modification_deletion_swap_truncation():
    log = build_log(6)
    head = log.head_doc()
    for i in range(6):
        d = docs(log)
        d[i]["note"] = "tampered"
        assert verify_audit_chain(d, head).broken_seq == i
        d = docs(log)
        del d[i]
        assert not verify_audit_chain(d, head).valid
    for i in range(5):
        d = docs(log)
        d[i], d[i + 1] = d[i + 1], d[i]
        assert not verify_audit_chain(d, head).valid
    assert verify_audit_chain(docs(log)[:-1], head).reason == "LengthMismatch"
    assert verify_audit_chain([b"junk"], None).reason == "MalformedRecord"


def test_rehashed_forgery_caught_by_head():
    log = build_log(4)
    head = log.head_doc()
    recs = list(log.records)
    # rewrite the last record and recompute its hash: only the head can tell
    last = AuditRecord(**{**recs[-1].__dict__, "note": "forged", "record_hash": ""})
    recs[-1] = AuditRecord(**{**last.__dict__, "record_hash": last.compute_hash()})
    assert verify_audit_chain(recs).valid
    assert verify_audit_chain(recs, head).reason == "HeadMismatch"
