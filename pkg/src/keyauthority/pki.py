"""Certificates, CRLs and certification-path validation.

Signatures cover the canonical encoding of ``signed_fields()``: every field
except ``signature`` itself, plus a ``kind`` tag so a certificate body can
never be replayed as a CRL body or vice versa.
"""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from . import crypto, store

CERT_SIGN = "certSign"
CRL_SIGN = "crlSign"

# when no candidate path is valid, the reported reason is the first of these
# that occurs on any candidate path
REASON_PRIORITY = ("Revoked", "Expired", "NotYetValid", "NotCA", "BadSignature")
NO_PATH = "NoPath"


def dn_tag(dn: str) -> str:
    return hashlib.sha256(dn.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Certificate:
    serial: int
    issuer_dn: str
    subject_dn: str
    subject_public_key: bytes
    valid_from: int
    valid_to: int
    key_usage: frozenset[str]
    signing_key_id: str
    signature: bytes = b""

    @property
    def cert_id(self) -> str:
        return f"cert-{dn_tag(self.issuer_dn)}-{self.serial}"

    @property
    def is_ca(self) -> bool:
        return CERT_SIGN in self.key_usage

    def signed_fields(self) -> dict:
        return {
            "kind": "certificate",
            "serial": self.serial,
            "issuer_dn": self.issuer_dn,
            "subject_dn": self.subject_dn,
            "subject_public_key": self.subject_public_key,
            "valid_from": self.valid_from,
            "valid_to": self.valid_to,
            "key_usage": sorted(self.key_usage),
            "signing_key_id": self.signing_key_id,
        }

    def tbs(self) -> bytes:
        return store.canonical_encode(self.signed_fields())

    def to_doc(self) -> dict:
        return {**self.signed_fields(), "signature": self.signature}

    @classmethod
    def from_doc(cls, doc: dict) -> "Certificate":
        return cls(doc["serial"], doc["issuer_dn"], doc["subject_dn"], doc["subject_public_key"],
                   doc["valid_from"], doc["valid_to"], frozenset(doc["key_usage"]),
                   doc["signing_key_id"], doc["signature"])

    def verify_signature(self, public_part: bytes) -> bool:
        return crypto.verify(public_part, self.tbs(), self.signature)


@dataclass(frozen=True)
class RevokedEntry:
    serial: int
    revocation_time: int
    reason: str

    def to_doc(self) -> dict:
        return {"serial": self.serial, "revocation_time": self.revocation_time, "reason": self.reason}


@dataclass(frozen=True)
class Crl:
    """A complete (non-delta) revocation list."""

    issuer_dn: str
    number: int
    this_update: int
    next_update: int
    entries: tuple[RevokedEntry, ...]
    signing_key_id: str
    signature: bytes = b""

    @property
    def crl_id(self) -> str:
        return f"crl-{dn_tag(self.issuer_dn)}-{self.number}"

    def serials(self) -> set[int]:
        return {e.serial for e in self.entries}

    def signed_fields(self) -> dict:
        return {
            "kind": "crl",
            "issuer_dn": self.issuer_dn,
            "number": self.number,
            "this_update": self.this_update,
            "next_update": self.next_update,
            "entries": [e.to_doc() for e in self.entries],
            "signing_key_id": self.signing_key_id,
        }

    def tbs(self) -> bytes:
        return store.canonical_encode(self.signed_fields())

    def to_doc(self) -> dict:
        return {**self.signed_fields(), "signature": self.signature}

    @classmethod
    def from_doc(cls, doc: dict) -> "Crl":
        return cls(doc["issuer_dn"], doc["number"], doc["this_update"], doc["next_update"],
                   tuple(RevokedEntry(**e) for e in doc["entries"]), doc["signing_key_id"],
                   doc["signature"])

    def verify_signature(self, public_part: bytes) -> bool:
        return crypto.verify(public_part, self.tbs(), self.signature)


@dataclass(frozen=True)
class TrustAnchor:
    dn: str
    public_key: bytes


@dataclass(frozen=True)
class ChainVerdict:
    valid: bool
    reason: str | None = None
    path: tuple[str, ...] = field(default=())

    def to_doc(self) -> dict:
        doc = {"valid": self.valid}
        if self.reason:
            doc["reason"] = self.reason
        if self.path:
            doc["path"] = list(self.path)
        return doc


def sign_certificate(cert: Certificate, signer) -> Certificate:
    """``signer`` maps the to-be-signed bytes to a signature."""
    return replace(cert, signature=signer(cert.tbs()))


def sign_crl(crl: Crl, signer) -> Crl:
    return replace(crl, signature=signer(crl.tbs()))


def latest_crls(crls: Iterable[Crl], keys_for_dn) -> dict[str, Crl]:
    """Highest-numbered CRL per issuer whose signature verifies under a key for that DN."""
    best: dict[str, Crl] = {}
    for crl in crls:
        if not any(crl.verify_signature(k) for k in keys_for_dn(crl.issuer_dn)):
            continue
        cur = best.get(crl.issuer_dn)
        if cur is None or crl.number > cur.number:
            best[crl.issuer_dn] = crl
    return best


def check_path(path: Sequence[Certificate], anchor: TrustAnchor, at: int,
               crls: dict[str, Crl]) -> str | None:
    """First failure along ``path`` (leaf first, anchor-signed cert last), or None."""
    for i, cert in enumerate(path):
        signer_key = path[i + 1].subject_public_key if i + 1 < len(path) else anchor.public_key
        if not cert.verify_signature(signer_key):
            return "BadSignature"
        if at < cert.valid_from:
            return "NotYetValid"
        if at >= cert.valid_to:
            return "Expired"
        crl = crls.get(cert.issuer_dn)
        if crl is not None and any(e.serial == cert.serial and e.revocation_time <= at
                                   for e in crl.entries):
            return "Revoked"
        if i > 0 and not cert.is_ca:
            return "NotCA"
    return None


def verify_chain(leaf: Certificate, anchors: Iterable[TrustAnchor], at: int,
                 pool: Iterable[Certificate], crls: Iterable[Crl] = (),
                 max_depth: int = 16) -> ChainVerdict:
    """Search name-chained paths from ``leaf`` to an anchor.

    Valid if some path passes every check.  Otherwise the reason is the
    highest-priority failure seen on any candidate path (REASON_PRIORITY), or
    NoPath when no name chain reaches an anchor.  ``pool`` and ``crls`` are
    expected to come from the authority's own store; a CRL counts when it
    verifies under an anchor key or a pooled certificate key for its issuer.
    """
    anchors = list(anchors)
    pool = list(dict.fromkeys(pool))
    by_subject: dict[str, list[Certificate]] = defaultdict(list)
    for cert in pool:
        by_subject[cert.subject_dn].append(cert)
    anchors_by_dn: dict[str, list[TrustAnchor]] = defaultdict(list)
    for a in anchors:
        anchors_by_dn[a.dn].append(a)

    def keys_for_dn(dn: str) -> list[bytes]:
        return [a.public_key for a in anchors_by_dn[dn]] + [c.subject_public_key for c in by_subject[dn]]

    current_crls = latest_crls(crls, keys_for_dn)
    failures: set[str] = set()

    def walk(path: list[Certificate]) -> tuple[str, ...] | None:
        cur = path[-1]
        for anchor in anchors_by_dn[cur.issuer_dn]:
            failure = check_path(path, anchor, at, current_crls)
            if failure is None:
                return tuple(c.cert_id for c in path)
            failures.add(failure)
        if len(path) >= max_depth:
            return None
        for nxt in by_subject[cur.issuer_dn]:
            if nxt in path:
                continue
            found = walk(path + [nxt])
            if found:
                return found
        return None

    found = walk([leaf])
    if found:
        return ChainVerdict(True, None, found)
    for reason in REASON_PRIORITY:
        if reason in failures:
            return ChainVerdict(False, reason)
    return ChainVerdict(False, NO_PATH)
