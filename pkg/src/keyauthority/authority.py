"""The key authority: every task that touches issuer or foreign private keys.

One ``Authority`` hosts any number of core key authorities (one per issuer)
and shares the organisational measures between them: operator sessions,
dual-control approvals and a single audit chain.

Private material held by the authority is always kept wrapped under the
authority master key, in memory and on disk.  It is unwrapped only inside
``_reveal`` for the duration of one operation and wiped afterwards.  The
master key's own private half is stored once per operator, sealed under
that operator's passphrase; logging in any operator unseals it.

Every privileged method follows the same order: validate, consume an
approval token, append the audit record, then act.
"""

from __future__ import annotations

import contextlib
import secrets
import threading
import time
from dataclasses import dataclass, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import lifecycle, pki, store
from .control import (
    DEFAULT_DUAL_CONTROL,
    DEFAULT_TOKEN_TTL,
    GENESIS_HASH,
    ApprovalGate,
    ApprovalToken,
    AuditLog,
    AuditRecord,
    AuditVerdict,
    Operator,
    OperatorRegistry,
    Session,
    parameters_digest,
    verify_audit_chain,
)
from .crypto import (
    KdfParams,
    KeyMaterial,
    NonExportableProvider,
    Passphrase,
    PassphrasePolicy,
    Pse,
    SoftwareProvider,
    wipe,
    wipe_buffer,
)
from .domain import Issuer, KeyAuthorityConfig, Ownership, Participant, Registry, validate_dn
from .errors import (
    AlreadyRevoked,
    AuditChainBroken,
    AuthenticationFailed,
    AuthorityLocked,
    DualControlRequired,
    DuplicateDistinguishedName,
    DuplicateParticipant,
    ExportForbidden,
    IllegalTransition,
    InstanceRetired,
    KeyNotOwnedByIssuer,
    NoValidIssuingKey,
    NotFound,
    NotOwner,
    OverlapViolation,
    PrivateKeyUnavailable,
    RecipientNotOwner,
    SelfCrossCert,
    StorageCorrupt,
    UnknownCertificate,
    UnknownDeposit,
    UnknownInstance,
    UnknownIssuer,
    UnknownKey,
    UnknownSerial,
    UnknownSubject,
    UnsupportedAlgorithm,
)
from .lifecycle import KeyInstance, State, Transition
from .pki import CERT_SIGN, CRL_SIGN, Certificate, ChainVerdict, Crl, RevokedEntry, TrustAnchor

DEPOSIT_PURPOSES = ("Backup", "Archive", "Escrow")
INTERNAL_CHANNEL = "ka-internal"

Approvals = ApprovalToken | Sequence[Session] | None


@dataclass(frozen=True)
class KeyRecord:
    """Public facts about a logical key; private material lives elsewhere."""

    key_id: str
    algorithm: str
    public_part: bytes
    created_at: int
    provider: str
    purpose: str
    core_authority: str

    @property
    def exportable(self) -> bool:
        return self.provider != NonExportableProvider.name

    def to_doc(self) -> dict:
        return {
            "key_id": self.key_id,
            "algorithm": self.algorithm,
            "public_part": self.public_part,
            "created_at": self.created_at,
            "provider": self.provider,
            "purpose": self.purpose,
            "core_authority": self.core_authority,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "KeyRecord":
        return cls(doc["key_id"], doc["algorithm"], doc["public_part"], doc["created_at"],
                   doc["provider"], doc["purpose"], doc["core_authority"])


@dataclass(frozen=True)
class DepositRecord:
    deposit_id: str
    key_id: str
    instance_id: str
    wrapped_private_key: bytes
    deposited_at: int
    purpose: str

    def to_doc(self) -> dict:
        return {
            "deposit_id": self.deposit_id,
            "key_id": self.key_id,
            "instance_id": self.instance_id,
            "wrapped_private_key": self.wrapped_private_key,
            "deposited_at": self.deposited_at,
            "purpose": self.purpose,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "DepositRecord":
        return cls(doc["deposit_id"], doc["key_id"], doc["instance_id"],
                   doc["wrapped_private_key"], doc["deposited_at"], doc["purpose"])


@dataclass(frozen=True)
class PrivateRead:
    """Instrumentation: one unwrap of private material and the audit record covering it."""

    audit_seq: int
    operation_name: str
    key_id: str
    instance_id: str


def _held_aad(instance_id: str, key_id: str) -> bytes:
    return f"held|{instance_id}|{key_id}".encode()


def _deposit_aad(deposit_id: str, key_id: str) -> bytes:
    return f"deposit|{deposit_id}|{key_id}".encode()


def read_repository_audit(repo: store.Repository) -> tuple[list, AuditVerdict]:
    """Raw audit records of ``repo`` and the verdict on their chain and head."""
    try:
        records, head = repo.read_audit()
    except StorageCorrupt:
        return [], AuditVerdict(False, None, "HeadCorrupt")
    # a missing head file means the log must be empty
    expected = head if head is not None else {"count": 0, "head": GENESIS_HASH}
    return records, verify_audit_chain(records, expected)


def _new_id(prefix: str) -> str:
    return f"{prefix}-{secrets.token_hex(8)}"


class Authority:
    """A key authority hosting one core key authority per issuer.

    Build one with :meth:`create` (fresh) or :meth:`load` (from a repository).
    Pass ``repo`` to persist every change as it happens; without it all state
    stays in memory.
    """

    def __init__(self, config: KeyAuthorityConfig, *, repo: store.Repository | None = None,
                 provider: SoftwareProvider | None = None,
                 clock: Callable[[], int] | None = None,
                 passphrase_policy: PassphrasePolicy = PassphrasePolicy(),
                 token_ttl: int = DEFAULT_TOKEN_TTL):
        self.config = config
        self.repo = repo
        self.provider = provider or SoftwareProvider()
        self.providers: dict[str, SoftwareProvider] = {
            SoftwareProvider.name: self.provider,
            NonExportableProvider.name: NonExportableProvider(
                self.provider.min_strength, self.provider.kdf, self.provider.rng),
        }
        self.clock = clock or (lambda: int(time.time()))
        self.passphrase_policy = passphrase_policy
        self.registry = Registry()
        self.operators = OperatorRegistry(self.provider.kdf)
        self.gate = ApprovalGate(self.operators, config.dual_control_policy, token_ttl)
        self.audit = AuditLog(sink=self._persist_audit)
        self.keys: dict[str, KeyRecord] = {}
        self.instances: dict[str, KeyInstance] = {}
        self.deposits: dict[str, DepositRecord] = {}
        self.certs: dict[str, Certificate] = {}
        self.crls: dict[str, list[Crl]] = {}
        self.pses: dict[str, Pse] = {}
        self.revocations: dict[str, dict[int, RevokedEntry]] = {}
        self.next_serial: dict[str, int] = {}
        self.private_reads: list[PrivateRead] = []
        self.master_key_id = ""
        self.master_instance_id = ""
        self._held: dict[str, bytes] = {}
        self._slots: dict[str, bytes] = {}
        self._master: KeyMaterial | None = None
        self._audit_broken: AuditVerdict | None = None
        self._lock = threading.RLock()

    # construction ---------------------------------------------------------

    @classmethod
    def create(cls, operators: Mapping[str, str], *, authority_id: str = "ka",
               repo: store.Repository | None = None, provider: SoftwareProvider | None = None,
               clock: Callable[[], int] | None = None,
               dual_control: Iterable[str] = DEFAULT_DUAL_CONTROL, offline_mode: bool = True,
               passphrase_policy: PassphrasePolicy = PassphrasePolicy(),
               token_ttl: int = DEFAULT_TOKEN_TTL) -> "Authority":
        """Initialise a new authority with its master key and first operators.

        ``operators`` maps operator ids to passphrases.  At least two are
        needed when any operation is under dual control, otherwise nobody
        could ever approve one.
        """
        dual_control = frozenset(dual_control)
        if dual_control and len(operators) < 2:
            raise DualControlRequired("initialisation needs at least two operators")
        store.check_id(authority_id)
        config = KeyAuthorityConfig(authority_id, set(), offline_mode, dual_control)
        ka = cls(config, repo=repo, provider=provider, clock=clock,
                 passphrase_policy=passphrase_policy, token_ttl=token_ttl)
        if repo is not None:
            repo.create_layout()
        now = ka.clock()
        ka.registry.add_participant("key authority", authority_id)
        ka._save("participants", authority_id, ka.registry.participant(authority_id).to_doc())

        master = ka.provider.generate_keypair("x25519", now=now)
        ka._master = master
        ka.master_key_id = master.key_id
        actor = ",".join(sorted(operators))
        inst, _ = lifecycle.spawn(Transition.GENERATE, master.key_id, None, actor, now)
        inst = lifecycle.apply(inst, Transition.STORE, actor, now, {"token": "operator-slots"})
        inst = lifecycle.apply(inst, Transition.DELIVER, actor, now,
                               {"recipient": authority_id, "channel": INTERNAL_CHANNEL})
        ka.master_instance_id = inst.instance_id
        ka.keys[master.key_id] = KeyRecord(master.key_id, "x25519", master.public_part, now,
                                           SoftwareProvider.name, "master", authority_id)
        ka.registry.assign_owner(master.key_id, authority_id, now)
        ka.instances[inst.instance_id] = inst

        for operator_id, passphrase in operators.items():
            ka._add_operator(operator_id, passphrase)
        digest = parameters_digest("initialize", {"authority_id": authority_id,
                                                  "operators": sorted(operators)})
        ka.audit.append("initialize", digest, sorted(operators), now, note=authority_id)
        ka._save_config()
        ka._save_key(master.key_id)
        ka._save_instance(inst.instance_id)
        return ka

    @classmethod
    def load(cls, repo: store.Repository, *, provider: SoftwareProvider | None = None,
             clock: Callable[[], int] | None = None) -> "Authority":
        """Rebuild an authority from ``repo``.  It starts locked until an operator logs in."""
        doc = repo.load("config", "authority")
        config = KeyAuthorityConfig.from_doc(doc["config"])
        kdf = KdfParams.from_doc(doc["kdf"])
        if provider is None:
            provider = SoftwareProvider(kdf=kdf)
        policy = PassphrasePolicy(doc["passphrase_policy"]["alphabet"],
                                  doc["passphrase_policy"]["length"],
                                  doc["passphrase_policy"]["min_entropy_bits"])
        ka = cls(config, repo=repo, provider=provider, clock=clock,
                 passphrase_policy=policy, token_ttl=doc["token_ttl"])
        ka.master_key_id = doc["master_key_id"]
        ka.master_instance_id = doc["master_instance_id"]

        for ident in repo.list("operators"):
            d = repo.load("operators", ident)
            ka.operators.load(Operator.from_doc(d["operator"]))
            ka._slots[ident] = d["slot"]
        for ident in repo.list("participants"):
            d = repo.load("participants", ident)
            ka.registry.participants[ident] = Participant.from_doc(d)
        for ident in repo.list("issuers"):
            d = repo.load("issuers", ident)
            ka.registry.load_issuer(Issuer.from_doc(d["issuer"]))
            ka.next_serial[ident] = d["next_serial"]
            ka.revocations[ident] = {e["serial"]: RevokedEntry(**e) for e in d["revocations"]}
        for ident in repo.list("keys"):
            d = repo.load("keys", ident)
            ka.keys[ident] = KeyRecord.from_doc(d["key"])
            ka.registry.load_ownership(ident, d["owners"])
        for ident in repo.list("instances"):
            d = repo.load("instances", ident)
            ka.instances[ident] = KeyInstance.from_doc(d["instance"])
            if "held" in d:
                ka._held[ident] = d["held"]
        for ident in repo.list("products"):
            d = repo.load("products", ident)
            ka.registry.load_product(ident, d["issuer_id"], d["kind"])
        for ident in repo.list("deposits"):
            ka.deposits[ident] = DepositRecord.from_doc(repo.load("deposits", ident))
        for ident in repo.list("certs"):
            ka.certs[ident] = Certificate.from_doc(repo.load("certs", ident))
        for ident in repo.list("crls"):
            crl = Crl.from_doc(repo.load("crls", ident))
            issuer = ka.registry.issuer_by_dn(crl.issuer_dn)
            ka.crls.setdefault(issuer.participant_id, []).append(crl)
        for crls in ka.crls.values():
            crls.sort(key=lambda c: c.number)
        for ident in repo.list("pse"):
            ka.pses[ident] = Pse.from_bytes(repo.load_raw("pse", ident))
        records, verdict = read_repository_audit(repo)
        if verdict.valid:
            ka.audit.records = [AuditRecord.from_doc(r) for r in records]
        else:
            # readable for inspection, but nothing new may be chained onto a broken log
            ka._audit_broken = verdict
        return ka

    # persistence ------------------------------------------------------------

    def _save(self, kind: str, ident: str, doc: Any) -> None:
        if self.repo is not None:
            self.repo.save(kind, ident, doc)

    def _save_config(self) -> None:
        p = self.passphrase_policy
        self._save("config", "authority", {
            "config": self.config.to_doc(),
            "kdf": self.provider.kdf.to_doc(),
            "token_ttl": self.gate.ttl,
            "passphrase_policy": {"alphabet": p.alphabet, "length": p.length,
                                  "min_entropy_bits": int(p.min_entropy_bits)},
            "master_key_id": self.master_key_id,
            "master_instance_id": self.master_instance_id,
        })

    def _save_issuer(self, issuer_id: str) -> None:
        self._save("issuers", issuer_id, {
            "issuer": self.registry.issuer(issuer_id).to_doc(),
            "next_serial": self.next_serial.get(issuer_id, 1),
            "revocations": [e.to_doc() for _, e in sorted(self.revocations.get(issuer_id, {}).items())],
        })

    def _save_key(self, key_id: str) -> None:
        self._save("keys", key_id, {"key": self.keys[key_id].to_doc(),
                                    "owners": self.registry.key_doc(key_id)})

    def _save_instance(self, instance_id: str) -> None:
        doc = {"instance": self.instances[instance_id].to_doc()}
        if instance_id in self._held:
            doc["held"] = self._held[instance_id]
        self._save("instances", instance_id, doc)

    def _save_product(self, product_id: str, issuer_id: str, kind: str) -> None:
        self.registry.register_product(product_id, issuer_id, kind)
        self._save("products", product_id, {"issuer_id": issuer_id, "kind": kind})

    def _save_operator(self, operator_id: str) -> None:
        self._save("operators", operator_id, {"operator": self.operators.get(operator_id).to_doc(),
                                              "slot": self._slots[operator_id]})

    def _persist_audit(self, rec: AuditRecord) -> None:
        if self.repo is not None:
            self.repo.append_audit(rec.to_doc(), {"count": rec.seq + 1, "head": rec.record_hash})

    # sessions and approvals -------------------------------------------------

    @property
    def locked(self) -> bool:
        return self._master is None

    def login(self, operator_id: str, passphrase: str) -> Session:
        """Authenticate an operator; the first login also unseals the master key."""
        session = self.operators.login(operator_id, passphrase, self.clock())
        if self._master is None:
            slot = self._slots.get(operator_id)
            if slot is None:
                raise AuthenticationFailed(f"operator {operator_id} has no master-key slot")
            self._master = self.provider.open_pse(slot, passphrase)
        return session

    def lock(self) -> None:
        if self._master is not None:
            wipe(self._master)
            self._master = None

    def approve(self, operation_name: str, sessions: Iterable[Session], **params) -> ApprovalToken:
        """Issue a single-use token for ``operation_name`` with exactly ``params``."""
        digest = parameters_digest(operation_name, params)
        return self.gate.authorize(operation_name, digest, sessions, self.clock())

    def _authorize(self, op: str, params: Mapping[str, Any], approvals: Approvals,
                   now: int, optional: bool = False) -> tuple[bytes, tuple[str, ...]]:
        digest = parameters_digest(op, params)
        if approvals is None or (not isinstance(approvals, ApprovalToken) and not approvals):
            if optional:
                return digest, ()
            approvals = ()
        if isinstance(approvals, ApprovalToken):
            token = approvals
        else:
            token = self.gate.authorize(op, digest, approvals, now)
        self.gate.consume(token, op, digest, now)
        return digest, tuple(sorted(token.approvers))

    def _audit(self, op: str, digest: bytes, approvers: Sequence[str], now: int,
               note: str = "") -> AuditRecord:
        if self._audit_broken is not None:
            v = self._audit_broken
            raise AuditChainBroken(f"audit log broken at {v.broken_seq}: {v.reason}")
        return self.audit.append(op, digest, approvers, now, note)

    def _require_master(self) -> KeyMaterial:
        if self._master is None:
            raise AuthorityLocked("log in an operator to unseal the master key")
        return self._master

    @contextlib.contextmanager
    def _reveal(self, instance_id: str, op: str):
        """Unwrap an instance's held material for the duration of one operation."""
        master = self._require_master()
        inst = self.instances[instance_id]
        wrapped = self._held.get(instance_id)
        if wrapped is None:
            raise PrivateKeyUnavailable(f"{instance_id} holds no private material")
        private = self.provider.unwrap(master, wrapped, _held_aad(instance_id, inst.key_id))
        self.private_reads.append(PrivateRead(self.audit.records[-1].seq, op, inst.key_id, instance_id))
        record = self.keys[inst.key_id]
        key = KeyMaterial(inst.key_id, record.algorithm, record.public_part, private, record.created_at)
        try:
            yield key
        finally:
            wipe(key)

    def _hold(self, instance_id: str, key_id: str, private: bytes | bytearray) -> None:
        master = self._require_master()
        self._held[instance_id] = self.provider.wrap(
            self.keys[master.key_id].public_part, private, _held_aad(instance_id, key_id))

    # lookups ----------------------------------------------------------------

    def instance(self, instance_id: str) -> KeyInstance:
        try:
            return self.instances[instance_id]
        except KeyError:
            raise UnknownInstance(instance_id) from None

    def key(self, key_id: str) -> KeyRecord:
        try:
            return self.keys[key_id]
        except KeyError:
            raise UnknownKey(key_id) from None

    def public_key(self, key_id: str) -> bytes:
        return self.key(key_id).public_part

    def instances_of(self, key_id: str) -> list[KeyInstance]:
        return [i for i in self.instances.values() if i.key_id == key_id]

    def _hosted_issuer(self, issuer_id: str):
        if issuer_id not in self.config.hosted_core_authorities:
            raise UnknownIssuer(issuer_id)
        return self.registry.issuer(issuer_id)

    def is_own_key(self, participant_id: str, key_id: str, at: int | None = None) -> bool:
        return self.registry.is_own_key(participant_id, key_id, self.clock() if at is None else at)

    def is_foreign_key(self, participant_id: str, key_id: str, at: int | None = None) -> bool:
        return not self.is_own_key(participant_id, key_id, at)

    def owner_of(self, key_id: str, at: int | None = None) -> str | None:
        self.key(key_id)
        return self.registry.owner_of(key_id, self.clock() if at is None else at)

    def core_pki_of(self, product_id: str) -> str:
        return self.registry.core_pki_of(product_id)

    def valid_issuing_key(self, issuer_id: str, at: int | None = None) -> str | None:
        return self.registry.valid_issuing_key(issuer_id, self.clock() if at is None else at)

    def certificate(self, cert_id: str) -> Certificate:
        try:
            return self.certs[cert_id]
        except KeyError:
            raise UnknownCertificate(cert_id) from None

    def latest_crl(self, issuer_id: str) -> Crl | None:
        crls = self.crls.get(issuer_id)
        return crls[-1] if crls else None

    # registry operations ----------------------------------------------------

    def add_participant(self, display_name: str, participant_id: str | None = None,
                        approvals: Approvals = None):
        with self._lock:
            if participant_id is not None:
                store.check_id(participant_id)
            now = self.clock()
            if participant_id in self.registry.participants:
                raise DuplicateParticipant(participant_id)
            participant_id = participant_id or _new_id("p")
            digest, who = self._authorize("add_participant", {"participant_id": participant_id,
                                                              "display_name": display_name},
                                          approvals, now, optional=True)
            self._audit("add_participant", digest, who, now, note=participant_id)
            p = self.registry.add_participant(display_name, participant_id)
            self._save("participants", participant_id, p.to_doc())
            return p

    def create_issuer(self, dn: str, issuer_id: str | None = None, display_name: str | None = None,
                      approvals: Approvals = None):
        with self._lock:
            dn = validate_dn(dn)
            if self.registry.issuer_by_dn(dn) is not None:
                raise DuplicateDistinguishedName(dn)
            issuer_id = store.check_id(issuer_id) if issuer_id else _new_id("iss")
            if issuer_id in self.registry.participants:
                raise DuplicateParticipant(issuer_id)
            now = self.clock()
            digest, who = self._authorize("create_issuer", {"dn": dn, "issuer_id": issuer_id},
                                          approvals, now, optional=True)
            self._audit("create_issuer", digest, who, now, note=dn)
            issuer = self.registry.create_issuer(dn, issuer_id, display_name)
            self.config.hosted_core_authorities.add(issuer_id)
            self.next_serial[issuer_id] = 1
            self.revocations[issuer_id] = {}
            self._save("participants", issuer_id, self.registry.participant(issuer_id).to_doc())
            self._save_issuer(issuer_id)
            self._save_config()
            return issuer

    def add_operator(self, operator_id: str, passphrase: str, approvals: Approvals) -> Operator:
        with self._lock:
            store.check_id(operator_id)
            if operator_id in self.operators.operators:
                raise AuthenticationFailed(f"operator {operator_id} already exists")
            self._require_master()
            now = self.clock()
            digest, who = self._authorize("add_operator", {"operator_id": operator_id}, approvals, now)
            self._audit("add_operator", digest, who, now, note=operator_id)
            return self._add_operator(operator_id, passphrase)

    def _add_operator(self, operator_id: str, passphrase: str) -> Operator:
        op = self.operators.add(operator_id, passphrase)
        self._slots[operator_id] = self.provider.seal_pse(
            self._require_master(), passphrase, operator_id, container_id=f"slot-{operator_id}").to_bytes()
        self._save_operator(operator_id)
        return op

    def transfer_ownership(self, key_id: str, new_owner: str, approvals: Approvals) -> Ownership:
        with self._lock:
            self.key(key_id)
            self.registry.participant(new_owner)
            now = self.clock()
            digest, who = self._authorize("transfer_ownership",
                                          {"key_id": key_id, "new_owner": new_owner}, approvals, now)
            previous = self.registry.owner_of(key_id, now)
            self._audit("transfer_ownership", digest, who, now,
                        note=f"{previous}->{new_owner}" if previous != new_owner else "no-op")
            own = self.registry.transfer_ownership(key_id, new_owner, now)
            self._save_key(key_id)
            return own

    # key generation -----------------------------------------------------------

    def _provider(self, name: str) -> SoftwareProvider:
        try:
            return self.providers[name]
        except KeyError:
            raise UnsupportedAlgorithm(f"no provider named {name!r}") from None

    def generate_participant_keys(self, core_authority: str, owner: str, approvals: Approvals,
                                  algorithm: str = "ed25519", bits: int | None = None,
                                  provider: str = SoftwareProvider.name) -> tuple[str, KeyInstance]:
        """Generate a key pair on behalf of ``owner``; the instance starts Storable."""
        with self._lock:
            self._hosted_issuer(core_authority)
            self.registry.participant(owner)
            prov = self._provider(provider)
            self._require_master()
            now = self.clock()
            params = {"core_authority": core_authority, "owner": owner, "algorithm": algorithm,
                      "bits": bits or 0, "provider": provider}
            digest, who = self._authorize("generate_participant_keys", params, approvals, now)
            key = prov.generate_keypair(algorithm, bits, now=now)
            self._audit("generate_participant_keys", digest, who, now, note=key.key_id)
            try:
                inst = self._register_generated(key, core_authority, owner, "participant", prov, who, now)
            finally:
                wipe(key)
            return key.key_id, inst

    def generate_issuer_key(self, issuer_id: str, approvals: Approvals, algorithm: str = "ed25519",
                            bits: int | None = None, purpose: str = "issuing",
                            provider: str = SoftwareProvider.name) -> tuple[str, KeyInstance]:
        """Generate a key for the issuer itself, kept Usable inside the authority."""
        with self._lock:
            self._hosted_issuer(issuer_id)
            prov = self._provider(provider)
            self._require_master()
            now = self.clock()
            params = {"issuer_id": issuer_id, "algorithm": algorithm, "bits": bits or 0,
                      "purpose": purpose, "provider": provider}
            digest, who = self._authorize("generate_issuer_key", params, approvals, now)
            key = prov.generate_keypair(algorithm, bits, now=now)
            self._audit("generate_issuer_key", digest, who, now, note=f"{key.key_id}:{purpose}")
            actor = ",".join(who)
            try:
                inst = self._register_generated(key, issuer_id, issuer_id, purpose, prov, who, now,
                                                save=False)
                inst = lifecycle.apply(inst, Transition.STORE, actor, now, {"token": prov.name})
                inst = lifecycle.apply(inst, Transition.DELIVER, actor, now,
                                       {"recipient": issuer_id, "channel": INTERNAL_CHANNEL})
                self.instances[inst.instance_id] = inst
                self._save_instance(inst.instance_id)
            finally:
                wipe(key)
            return key.key_id, inst

    def _register_generated(self, key: KeyMaterial, core_authority: str, owner: str, purpose: str,
                            prov: SoftwareProvider, who: Sequence[str], now: int,
                            save: bool = True) -> KeyInstance:
        inst, _ = lifecycle.spawn(Transition.GENERATE, key.key_id, None, ",".join(who), now,
                                  exportable=prov.exportable)
        self.keys[key.key_id] = KeyRecord(key.key_id, key.algorithm, key.public_part, now,
                                          prov.name, purpose, core_authority)
        self.registry.assign_owner(key.key_id, owner, now)
        self.instances[inst.instance_id] = inst
        self._hold(inst.instance_id, key.key_id, key.private_part)
        self._save_key(key.key_id)
        self._save_product(key.key_id, core_authority, "keypair")
        if save:
            self._save_instance(inst.instance_id)
        return inst

    def rollover_issuing_key(self, issuer_id: str, key_id: str, approvals: Approvals,
                             effective: int | None = None):
        with self._lock:
            self._hosted_issuer(issuer_id)
            record = self.key(key_id)
            now = self.clock()
            effective = now if effective is None else effective
            if self.registry.owner_of(key_id, max(now, effective)) != issuer_id:
                raise KeyNotOwnedByIssuer(key_id)
            if record.algorithm == "x25519":
                raise UnsupportedAlgorithm("issuing keys must be able to sign")
            current = self.registry.issuer(issuer_id).issuing_keys
            if current and effective <= current[-1].valid_from:
                raise OverlapViolation(f"effective {effective} does not follow {current[-1].valid_from}")
            digest, who = self._authorize("rollover_issuing_key",
                                          {"issuer_id": issuer_id, "key_id": key_id,
                                           "effective": effective}, approvals, now)
            self._audit("rollover_issuing_key", digest, who, now, note=key_id)
            issuer = self.registry.rollover_issuing_key(issuer_id, key_id, effective, now)
            self._save_issuer(issuer_id)
            return issuer

    # signing with issuer keys -------------------------------------------------

    def _signing_instance(self, key_id: str) -> KeyInstance:
        self._require_master()
        for inst in self.instances.values():
            if (inst.key_id == key_id and not inst.retired and inst.state is State.USABLE
                    and inst.instance_id in self._held):
                return inst
        raise PrivateKeyUnavailable(f"no usable instance of {key_id} is held")

    def _sign(self, key_id: str, message: bytes, op: str, actor: str, now: int,
              purpose: str) -> bytes:
        inst = self._signing_instance(key_id)
        prov = self._provider(self.keys[key_id].provider)
        with self._reveal(inst.instance_id, op) as key:
            signature = prov.sign(key, message)
        inst = lifecycle.apply(inst, Transition.USE, actor, now, {"purpose": purpose})
        self.instances[inst.instance_id] = inst
        self._save_instance(inst.instance_id)
        return signature

    def _issuing_key(self, issuer_id: str, now: int) -> str:
        key_id = self.registry.valid_issuing_key(issuer_id, now)
        if key_id is None:
            raise NoValidIssuingKey(issuer_id)
        self._signing_instance(key_id)
        return key_id

    def sign_for_purpose(self, core_authority: str, purpose_key_id: str, message: bytes,
                         approvals: Approvals, purpose: str | None = None) -> bytes:
        """Sign with one of the issuer's own keys.  Using the issuing key is logged as raw-sign."""
        with self._lock:
            self._hosted_issuer(core_authority)
            record = self.key(purpose_key_id)
            now = self.clock()
            if self.registry.owner_of(purpose_key_id, now) != core_authority:
                raise KeyNotOwnedByIssuer(purpose_key_id)
            self._signing_instance(purpose_key_id)
            issuing = any(p.key_id == purpose_key_id
                          for p in self.registry.issuer(core_authority).issuing_keys)
            label = "raw-sign" if issuing else (purpose or record.purpose)
            digest, who = self._authorize("sign_for_purpose",
                                          {"core_authority": core_authority, "key_id": purpose_key_id,
                                           "message": bytes(message)}, approvals, now)
            self._audit("sign_for_purpose", digest, who, now, note=label)
            return self._sign(purpose_key_id, bytes(message), "sign_for_purpose", ",".join(who), now, label)

    # issuing ----------------------------------------------------------------

    def issue_certificate(self, core_authority: str, subject: str, subject_public_key: bytes,
                          valid_from: int, valid_to: int, key_usage: Iterable[str],
                          approvals: Approvals, subject_dn: str | None = None) -> Certificate:
        with self._lock:
            issuer = self._hosted_issuer(core_authority)
            if subject not in self.registry.participants:
                raise UnknownSubject(subject)
            now = self.clock()
            key_id = self._issuing_key(core_authority, now)
            if subject_dn is None:
                sub_issuer = self.registry.issuers.get(subject)
                subject_dn = sub_issuer.distinguished_name if sub_issuer else f"UID={subject}"
            usage = frozenset(key_usage)
            return self._issue(issuer, subject_dn, bytes(subject_public_key), valid_from, valid_to,
                               usage, key_id, approvals, now, "issue_certificate", subject)

    def issue_cross_certificate(self, signer: str, subject_issuer: str, valid_from: int,
                                valid_to: int, approvals: Approvals) -> Certificate:
        """Certify another issuer's current issuing key; the product joins the signer's core PKI."""
        with self._lock:
            if signer == subject_issuer:
                raise SelfCrossCert(signer)
            issuer = self._hosted_issuer(signer)
            other = self.registry.issuer(subject_issuer)
            now = self.clock()
            key_id = self._issuing_key(signer, now)
            subject_key = self.registry.valid_issuing_key(subject_issuer, now)
            if subject_key is None:
                raise NoValidIssuingKey(subject_issuer)
            return self._issue(issuer, other.distinguished_name, self.keys[subject_key].public_part,
                               valid_from, valid_to, frozenset({CERT_SIGN, CRL_SIGN}), key_id,
                               approvals, now, "issue_cross_certificate", subject_issuer)

    def _issue(self, issuer, subject_dn, public_key, valid_from, valid_to, usage, key_id,
               approvals, now, op, subject) -> Certificate:
        if valid_to <= valid_from:
            raise IllegalTransition("certificate validity is empty")
        issuer_id = issuer.participant_id
        serial = self.next_serial.get(issuer_id, 1)
        cert = Certificate(serial, issuer.distinguished_name, subject_dn, public_key,
                           valid_from, valid_to, usage, key_id)
        params = {"issuer_id": issuer_id, "subject": subject, "subject_public_key": public_key,
                  "valid_from": valid_from, "valid_to": valid_to, "key_usage": sorted(usage)}
        digest, who = self._authorize(op, params, approvals, now)
        self._audit(op, digest, who, now, note=cert.cert_id)
        cert = replace(cert, signature=self._sign(key_id, cert.tbs(), op, ",".join(who), now,
                                                  "issuing"))
        self.next_serial[issuer_id] = serial + 1
        self.certs[cert.cert_id] = cert
        self._save("certs", cert.cert_id, cert.to_doc())
        self._save_product(cert.cert_id, issuer_id, "certificate")
        self._save_issuer(issuer_id)
        return cert

    # revocation -------------------------------------------------------------

    def revoke(self, core_authority: str, serial: int, approvals: Approvals,
               reason: str = "unspecified") -> dict[int, RevokedEntry]:
        with self._lock:
            issuer = self._hosted_issuer(core_authority)
            cert_id = Certificate(serial, issuer.distinguished_name, "", b"", 0, 0,
                                  frozenset(), "").cert_id
            if cert_id not in self.certs:
                raise UnknownSerial(f"{core_authority}:{serial}")
            revoked = self.revocations.setdefault(core_authority, {})
            if serial in revoked:
                raise AlreadyRevoked(f"{core_authority}:{serial}")
            now = self.clock()
            digest, who = self._authorize("revoke", {"core_authority": core_authority,
                                                     "serial": serial, "reason": reason},
                                          approvals, now)
            self._audit("revoke", digest, who, now, note=f"{cert_id}:{reason}")
            revoked[serial] = RevokedEntry(serial, now, reason)
            self._save_issuer(core_authority)
            return dict(revoked)

    def publish_crl(self, core_authority: str, next_update: int, approvals: Approvals) -> Crl:
        with self._lock:
            issuer = self._hosted_issuer(core_authority)
            now = self.clock()
            key_id = self._issuing_key(core_authority, now)
            previous = self.latest_crl(core_authority)
            this_update = max(now, previous.this_update) if previous else now
            entries = tuple(e for _, e in sorted(self.revocations.get(core_authority, {}).items()))
            crl = Crl(issuer.distinguished_name, (previous.number + 1) if previous else 1,
                      this_update, next_update, entries, key_id)
            digest, who = self._authorize("publish_crl", {"core_authority": core_authority,
                                                          "next_update": next_update}, approvals, now)
            self._audit("publish_crl", digest, who, now, note=crl.crl_id)
            crl = replace(crl, signature=self._sign(key_id, crl.tbs(), "publish_crl", ",".join(who),
                                                    now, "crl"))
            self.crls.setdefault(core_authority, []).append(crl)
            self._save("crls", crl.crl_id, crl.to_doc())
            self._save_product(crl.crl_id, core_authority, "crl")
            return crl

    # personalisation and delivery --------------------------------------------

    def personalize(self, instance_id: str, subject: str, approvals: Approvals) -> tuple[Pse, Passphrase]:
        """Seal a Storable key into a PSE for its owner.

        The passphrase is returned here and nowhere else; it is never stored.
        """
        with self._lock:
            inst = self.instance(instance_id)
            if inst.retired:
                raise InstanceRetired(instance_id)
            if inst.state is not State.STORABLE:
                raise IllegalTransition(f"personalize needs Storable, instance is {inst.state.value}")
            self.registry.participant(subject)
            now = self.clock()
            if self.registry.owner_of(inst.key_id, now) != subject:
                raise NotOwner(f"{subject} does not own {inst.key_id}")
            record = self.keys[inst.key_id]
            if not record.exportable:
                raise ExportForbidden(f"{inst.key_id} cannot leave its token")
            self._require_master()
            digest, who = self._authorize("personalize", {"instance_id": instance_id,
                                                          "subject": subject}, approvals, now)
            self._audit("personalize", digest, who, now, note=instance_id)
            container_id = _new_id("pse")
            passphrase = self.provider.generate_passphrase(self.passphrase_policy)
            with self._reveal(instance_id, "personalize") as key:
                pse = self.provider.seal_pse(key, passphrase, subject, container_id)
            inst = lifecycle.apply(inst, Transition.STORE, ",".join(who), now,
                                   {"pse": container_id, "subject": subject})
            self.instances[instance_id] = inst
            self._held.pop(instance_id, None)
            self.pses[container_id] = pse
            if self.repo is not None:
                self.repo.save_raw("pse", container_id, pse.to_bytes())
            self._save_product(container_id, record.core_authority, "pse")
            self._save_instance(instance_id)
            return pse, passphrase

    def record_delivery(self, instance_id: str, recipient: str, channel: str,
                        approvals: Approvals) -> KeyInstance:
        with self._lock:
            inst = self.instance(instance_id)
            if inst.retired:
                raise InstanceRetired(instance_id)
            if inst.state is not State.DELIVERABLE:
                raise IllegalTransition(f"deliver needs Deliverable, instance is {inst.state.value}")
            now = self.clock()
            if self.registry.owner_of(inst.key_id, now) != recipient:
                raise RecipientNotOwner(f"{recipient} does not own {inst.key_id}")
            digest, who = self._authorize("record_delivery", {"instance_id": instance_id,
                                                              "recipient": recipient,
                                                              "channel": channel}, approvals, now)
            self._audit("record_delivery", digest, who, now, note=f"{recipient}:{channel}")
            inst = lifecycle.apply(inst, Transition.DELIVER, ",".join(who), now,
                                   {"recipient": recipient, "channel": channel})
            self.instances[instance_id] = inst
            self._save_instance(instance_id)
            return inst

    # deposit / recovery / copy / destruction ----------------------------------

    def deposit_key(self, instance_id: str, purpose: str, approvals: Approvals) -> DepositRecord:
        with self._lock:
            inst = self.instance(instance_id)
            if inst.retired:
                raise InstanceRetired(instance_id)
            if inst.state is not State.STORABLE:
                raise IllegalTransition(f"deposit needs Storable, instance is {inst.state.value}")
            if purpose not in DEPOSIT_PURPOSES:
                raise IllegalTransition(f"deposit purpose must be one of {DEPOSIT_PURPOSES}")
            if not self.keys[inst.key_id].exportable:
                raise ExportForbidden(f"{inst.key_id} cannot leave its token")
            if instance_id not in self._held:
                raise PrivateKeyUnavailable(instance_id)
            self._require_master()
            now = self.clock()
            digest, who = self._authorize("deposit_key", {"instance_id": instance_id,
                                                          "purpose": purpose}, approvals, now)
            deposit_id = _new_id("dep")
            self._audit("deposit_key", digest, who, now, note=deposit_id)
            master_pub = self.keys[self.master_key_id].public_part
            with self._reveal(instance_id, "deposit_key") as key:
                wrapped = self.provider.wrap(master_pub, key.private_part,
                                             _deposit_aad(deposit_id, inst.key_id))
            record = DepositRecord(deposit_id, inst.key_id, instance_id, wrapped, now, purpose)
            inst = lifecycle.apply(inst, Transition.DEPOSIT, ",".join(who), now,
                                   {"deposit": deposit_id, "purpose": purpose})
            self.instances[instance_id] = inst
            self._held.pop(instance_id, None)
            self.deposits[deposit_id] = record
            self._save("deposits", deposit_id, record.to_doc())
            self._save_instance(instance_id)
            return record

    def recover_key(self, deposit_id: str, approvals: Approvals) -> tuple[str, KeyInstance]:
        """Build a new Storable instance from a deposit; the deposited instance stays put."""
        with self._lock:
            try:
                record = self.deposits[deposit_id]
            except KeyError:
                raise UnknownDeposit(deposit_id) from None
            source = self.instance(record.instance_id)
            self._require_master()
            now = self.clock()
            digest, who = self._authorize("recover_key", {"deposit_id": deposit_id}, approvals, now)
            new_id = lifecycle.new_instance_id()
            self._audit("recover_key", digest, who, now, note=f"{deposit_id}->{new_id}")
            private = self.provider.unwrap(self._master, record.wrapped_private_key,
                                           _deposit_aad(deposit_id, record.key_id))
            self.private_reads.append(PrivateRead(self.audit.records[-1].seq, "recover_key",
                                                  record.key_id, source.instance_id))
            try:
                inst, updated = lifecycle.spawn(Transition.RECOVER_IN, record.key_id, source,
                                                ",".join(who), now, instance_id=new_id,
                                                detail={"deposit": deposit_id})
                self.instances[source.instance_id] = updated
                self.instances[inst.instance_id] = inst
                self._hold(inst.instance_id, record.key_id, private)
            finally:
                wipe_buffer(private)
            self._save_instance(source.instance_id)
            self._save_instance(inst.instance_id)
            return record.key_id, inst

    def copy_key(self, source_instance: str, approvals: Approvals) -> KeyInstance:
        with self._lock:
            source = self.instance(source_instance)
            new_id = lifecycle.new_instance_id()
            # dry run for state and export checks before any approval is spent
            lifecycle.spawn(Transition.COPY_IN, source.key_id, source, "-", 0, instance_id=new_id)
            if not self.keys[source.key_id].exportable:
                raise ExportForbidden(f"{source.key_id} cannot leave its token")
            if source_instance not in self._held:
                raise PrivateKeyUnavailable(f"the authority does not hold {source_instance}")
            self._require_master()
            now = self.clock()
            digest, who = self._authorize("copy_key", {"instance_id": source_instance}, approvals, now)
            self._audit("copy_key", digest, who, now, note=f"{source_instance}->{new_id}")
            inst, updated = lifecycle.spawn(Transition.COPY_IN, source.key_id, source,
                                            ",".join(who), now, instance_id=new_id)
            with self._reveal(source_instance, "copy_key") as key:
                self.instances[inst.instance_id] = inst
                self._hold(inst.instance_id, source.key_id, key.private_part)
            self.instances[source_instance] = updated
            self._save_instance(source_instance)
            self._save_instance(inst.instance_id)
            return inst

    def destroy_key(self, instance_id: str, approvals: Approvals) -> KeyInstance:
        """Retire one instance and shred whatever material the authority holds for it."""
        with self._lock:
            inst = self.instance(instance_id)
            if inst.retired:
                raise InstanceRetired(instance_id)
            if instance_id == self.master_instance_id:
                raise IllegalTransition("the master key cannot be destroyed")
            now = self.clock()
            digest, who = self._authorize("destroy_key", {"instance_id": instance_id}, approvals, now)
            self._audit("destroy_key", digest, who, now, note=instance_id)
            self._held.pop(instance_id, None)
            for dep in [d for d in self.deposits.values() if d.instance_id == instance_id]:
                del self.deposits[dep.deposit_id]
                if self.repo is not None:
                    self.repo.delete("deposits", dep.deposit_id)
            for entry in inst.history:
                container = dict(entry.detail).get("pse")
                if entry.transition is Transition.STORE and container in self.pses:
                    del self.pses[container]
                    if self.repo is not None:
                        self.repo.delete("pse", container)
            inst = lifecycle.apply(inst, Transition.DESTRUCT, ",".join(who), now)
            self.instances[instance_id] = inst
            self._save_instance(instance_id)
            return inst

    # verification -------------------------------------------------------------

    def anchors_for(self, issuer_id: str) -> list[TrustAnchor]:
        issuer = self.registry.issuer(issuer_id)
        return [TrustAnchor(issuer.distinguished_name, self.keys[p.key_id].public_part)
                for p in issuer.issuing_keys]

    def verify_chain(self, leaf: Certificate | str, trust_anchors: Iterable[TrustAnchor | str],
                     at: int | None = None) -> ChainVerdict:
        if isinstance(leaf, str):
            leaf = self.certificate(leaf)
        anchors: list[TrustAnchor] = []
        for a in trust_anchors:
            anchors.extend(self.anchors_for(a) if isinstance(a, str) else [a])
        crls = [c for lst in self.crls.values() for c in lst]
        return pki.verify_chain(leaf, anchors, self.clock() if at is None else at,
                                self.certs.values(), crls)

    def verify_audit(self) -> AuditVerdict:
        if self.repo is None:
            return self.audit.verify()
        return read_repository_audit(self.repo)[1]

    # inspection ---------------------------------------------------------------

    def describe(self, kind: str, ident: str) -> dict:
        """Public view of one object, safe to print."""
        try:
            if kind == "issuer":
                issuer = self.registry.issuer(ident)
                return {**issuer.to_doc(), "next_serial": self.next_serial.get(ident, 1),
                        "revoked": sorted(self.revocations.get(ident, {}))}
            if kind == "participant":
                return self.registry.participant(ident).to_doc()
            if kind == "key":
                return {**self.key(ident).to_doc(), "owners": self.registry.key_doc(ident),
                        "instances": sorted(i.instance_id for i in self.instances_of(ident))}
            if kind == "instance":
                inst = self.instance(ident)
                return {**inst.to_doc(), "state": inst.state.value, "retired": inst.retired,
                        "held": ident in self._held}
            if kind == "cert":
                return self.certificate(ident).to_doc()
            if kind == "crl":
                for lst in self.crls.values():
                    for crl in lst:
                        if crl.crl_id == ident:
                            return crl.to_doc()
                raise NotFound(ident)
            if kind == "deposit":
                record = self.deposits.get(ident)
                if record is None:
                    raise UnknownDeposit(ident)
                return record.to_doc()
            if kind == "pse":
                if ident not in self.pses:
                    raise NotFound(ident)
                return {"header": self.pses[ident].header}
            if kind == "operator":
                op = self.operators.get(ident)
                return {"operator_id": op.operator_id, "active": op.active}
            if kind == "audit":
                return self.audit.records[int(ident)].to_doc()
            if kind == "config":
                return self.config.to_doc()
        except (IndexError, ValueError):
            raise NotFound(f"{kind}/{ident}") from None
        raise NotFound(f"unknown kind {kind!r}")

    def list_ids(self, kind: str) -> list[str]:
        table = {
            "issuer": self.registry.issuers,
            "participant": self.registry.participants,
            "key": self.keys,
            "instance": self.instances,
            "cert": self.certs,
            "deposit": self.deposits,
            "pse": self.pses,
            "operator": self.operators.operators,
        }
        if kind == "crl":
            return sorted(c.crl_id for lst in self.crls.values() for c in lst)
        if kind == "audit":
            return [str(r.seq) for r in self.audit.records]
        if kind not in table:
            raise NotFound(f"unknown kind {kind!r}")
        return sorted(table[kind])
