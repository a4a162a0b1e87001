"""Participants, issuers, key ownership and core-PKI membership."""

from __future__ import annotations

import bisect
import secrets
import threading
import unicodedata
from dataclasses import dataclass, field

from .errors import (
    DuplicateDistinguishedName,
    DuplicateParticipant,
    InvalidDistinguishedName,
    KeyNotOwnedByIssuer,
    OverlapViolation,
    UnknownIssuer,
    UnknownKey,
    UnknownParticipant,
    UnknownProduct,
)

MAX_DN_BYTES = 512


def validate_dn(dn: str) -> str:
    """Return the NFC form of ``dn`` or raise InvalidDistinguishedName.

    A DN is an opaque label: non-empty, at most 512 UTF-8 bytes, no control
    characters.
    """
    if not isinstance(dn, str):
        raise InvalidDistinguishedName("distinguished name must be text")
    dn = unicodedata.normalize("NFC", dn)
    if not dn.strip():
        raise InvalidDistinguishedName("empty distinguished name")
    try:
        size = len(dn.encode("utf-8"))
    except UnicodeEncodeError:
        raise InvalidDistinguishedName("distinguished name is not valid UTF-8") from None
    if size > MAX_DN_BYTES:
        raise InvalidDistinguishedName(f"distinguished name exceeds {MAX_DN_BYTES} bytes")
    if any(unicodedata.category(ch) == "Cc" for ch in dn):
        raise InvalidDistinguishedName("control character in distinguished name")
    return dn


@dataclass(frozen=True)
class Participant:
    participant_id: str
    display_name: str
    is_issuer: bool = False

    def to_doc(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "display_name": self.display_name,
            "is_issuer": self.is_issuer,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Participant":
        return cls(doc["participant_id"], doc["display_name"], doc["is_issuer"])


@dataclass(frozen=True)
class IssuingPeriod:
    """A key's half-open validity interval ``[valid_from, valid_to)``."""

    key_id: str
    valid_from: int
    valid_to: int | None = None

    def contains(self, at: int) -> bool:
        return self.valid_from <= at and (self.valid_to is None or at < self.valid_to)

    def to_doc(self) -> dict:
        doc = {"key_id": self.key_id, "valid_from": self.valid_from}
        if self.valid_to is not None:
            doc["valid_to"] = self.valid_to
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "IssuingPeriod":
        return cls(doc["key_id"], doc["valid_from"], doc.get("valid_to"))


@dataclass(frozen=True)
class Issuer:
    participant_id: str
    distinguished_name: str
    issuing_keys: tuple[IssuingPeriod, ...] = ()

    def valid_issuing_key(self, at: int) -> str | None:
        for period in self.issuing_keys:
            if period.contains(at):
                return period.key_id
        return None

    def to_doc(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "distinguished_name": self.distinguished_name,
            "issuing_keys": [p.to_doc() for p in self.issuing_keys],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Issuer":
        return cls(
            doc["participant_id"],
            doc["distinguished_name"],
            tuple(IssuingPeriod.from_doc(p) for p in doc["issuing_keys"]),
        )


@dataclass(frozen=True)
class Ownership:
    key_id: str
    owner: str
    since: int


@dataclass
class KeyAuthorityConfig:
    authority_id: str
    hosted_core_authorities: set[str] = field(default_factory=set)
    offline_mode: bool = True
    dual_control_policy: frozenset[str] = frozenset()

    def to_doc(self) -> dict:
        return {
            "authority_id": self.authority_id,
            "hosted_core_authorities": sorted(self.hosted_core_authorities),
            "offline_mode": self.offline_mode,
            "dual_control_policy": sorted(self.dual_control_policy),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "KeyAuthorityConfig":
        return cls(
            doc["authority_id"],
            set(doc["hosted_core_authorities"]),
            doc["offline_mode"],
            frozenset(doc["dual_control_policy"]),
        )


class Registry:
    """Who exists, who owns which key, and which core PKI each product is in.

    Mutations take an internal lock; lookups read plain dicts.
    """

    def __init__(self):
        self.participants: dict[str, Participant] = {}
        self.issuers: dict[str, Issuer] = {}
        self._dn_index: dict[str, str] = {}
        # key_id -> list of (since, owner), sorted by since
        self._owners: dict[str, list[tuple[int, str]]] = {}
        self._products: dict[str, tuple[str, str]] = {}
        self._lock = threading.RLock()

    # participants / issuers

    def add_participant(self, display_name: str, participant_id: str | None = None,
                        is_issuer: bool = False) -> Participant:
        with self._lock:
            participant_id = participant_id or "p-" + secrets.token_hex(6)
            if participant_id in self.participants:
                raise DuplicateParticipant(participant_id)
            p = Participant(participant_id, display_name, is_issuer)
            self.participants[participant_id] = p
            return p

    def participant(self, participant_id: str) -> Participant:
        try:
            return self.participants[participant_id]
        except KeyError:
            raise UnknownParticipant(participant_id) from None

    def create_issuer(self, dn: str, participant_id: str | None = None,
                      display_name: str | None = None) -> Issuer:
        dn = validate_dn(dn)
        with self._lock:
            if dn in self._dn_index:
                raise DuplicateDistinguishedName(dn)
            participant_id = participant_id or "iss-" + secrets.token_hex(6)
            if participant_id in self.participants:
                raise DuplicateParticipant(participant_id)
            self.add_participant(display_name or dn, participant_id, is_issuer=True)
            issuer = Issuer(participant_id, dn)
            self.issuers[participant_id] = issuer
            self._dn_index[dn] = participant_id
            return issuer

    def issuer(self, issuer_id: str) -> Issuer:
        try:
            return self.issuers[issuer_id]
        except KeyError:
            raise UnknownIssuer(issuer_id) from None

    def issuer_by_dn(self, dn: str) -> Issuer | None:
        ident = self._dn_index.get(unicodedata.normalize("NFC", dn))
        return self.issuers[ident] if ident else None

    def rollover_issuing_key(self, issuer_id: str, new_key_id: str, effective: int,
                             now: int | None = None) -> Issuer:
        """Make ``new_key_id`` the issuing key from ``effective`` on.

        The current open interval is closed at ``effective``.  ``effective``
        must be strictly after the current key's start (an equal start would
        leave the old key an empty interval) and, when ``now`` is given, not
        in the past.
        """
        with self._lock:
            issuer = self.issuer(issuer_id)
            if self.owner_of(new_key_id, effective) != issuer_id:
                raise KeyNotOwnedByIssuer(new_key_id)
            if now is not None and effective < now:
                raise OverlapViolation("rollover may not take effect in the past")
            periods = list(issuer.issuing_keys)
            if periods:
                last = periods[-1]
                if effective <= last.valid_from:
                    raise OverlapViolation(
                        f"effective {effective} does not follow current key start {last.valid_from}")
                periods[-1] = IssuingPeriod(last.key_id, last.valid_from, effective)
            periods.append(IssuingPeriod(new_key_id, effective))
            issuer = Issuer(issuer.participant_id, issuer.distinguished_name, tuple(periods))
            self.issuers[issuer_id] = issuer
            return issuer

    def valid_issuing_key(self, issuer_id: str, at: int) -> str | None:
        return self.issuer(issuer_id).valid_issuing_key(at)

    # ownership

    def assign_owner(self, key_id: str, owner: str, since: int) -> Ownership:
        with self._lock:
            self.participant(owner)
            records = self._owners.setdefault(key_id, [])
            if records and since < records[-1][0]:
                raise OverlapViolation("ownership changes must be chronological")
            records.append((since, owner))
            return Ownership(key_id, owner, since)

    def transfer_ownership(self, key_id: str, new_owner: str, at: int) -> Ownership:
        """Hand ``key_id`` to ``new_owner``; a transfer to the current owner is a no-op."""
        with self._lock:
            self.participant(new_owner)
            current = self.ownership(key_id, at)
            if current is not None and current.owner == new_owner:
                return current
            return self.assign_owner(key_id, new_owner, at)

    def ownership(self, key_id: str, at: int) -> Ownership | None:
        try:
            records = self._owners[key_id]
        except KeyError:
            raise UnknownKey(key_id) from None
        i = bisect.bisect_right([since for since, _ in records], at)
        if i == 0:
            return None
        since, owner = records[i - 1]
        return Ownership(key_id, owner, since)

    def owner_of(self, key_id: str, at: int) -> str | None:
        own = self.ownership(key_id, at)
        return own.owner if own else None

    def is_own_key(self, participant_id: str, key_id: str, at: int) -> bool:
        return self.owner_of(key_id, at) == participant_id

    def is_foreign_key(self, participant_id: str, key_id: str, at: int) -> bool:
        return not self.is_own_key(participant_id, key_id, at)

    def ownership_history(self, key_id: str) -> list[tuple[int, str]]:
        return list(self._owners.get(key_id, []))

    def known_keys(self) -> list[str]:
        return list(self._owners)

    # core PKI membership

    def register_product(self, product_id: str, issuer_id: str, kind: str) -> None:
        with self._lock:
            self.issuer(issuer_id)
            existing = self._products.get(product_id)
            if existing and existing[0] != issuer_id:
                raise UnknownProduct(f"{product_id} already belongs to {existing[0]}")
            self._products[product_id] = (issuer_id, kind)

    def core_pki_of(self, product_id: str) -> str:
        try:
            return self._products[product_id][0]
        except KeyError:
            raise UnknownProduct(product_id) from None

    def core_pki(self, issuer_id: str) -> set[str]:
        return {pid for pid, (iss, _) in self._products.items() if iss == issuer_id}

    def products(self) -> dict[str, tuple[str, str]]:
        return dict(self._products)

    # persistence helpers

    def key_doc(self, key_id: str) -> list[dict]:
        return [{"since": s, "owner": o} for s, o in self._owners.get(key_id, [])]

    def load_ownership(self, key_id: str, records: list[dict]) -> None:
        self._owners[key_id] = [(r["since"], r["owner"]) for r in records]

    def load_issuer(self, issuer: Issuer) -> None:
        self.issuers[issuer.participant_id] = issuer
        self._dn_index[issuer.distinguished_name] = issuer.participant_id

    def load_product(self, product_id: str, issuer_id: str, kind: str) -> None:
        self._products[product_id] = (issuer_id, kind)
