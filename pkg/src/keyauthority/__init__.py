"""Key authority: lifecycle-tracked key management for a composed PKI."""

from .authority import Authority, DepositRecord, KeyRecord
from .control import ApprovalToken, AuditRecord, AuditVerdict, Session
from .crypto import KdfParams, KeyMaterial, Passphrase, PassphrasePolicy, Pse, SoftwareProvider
from .errors import KeyAuthorityError
from .lifecycle import KeyInstance, State, Transition
from .pki import Certificate, ChainVerdict, Crl, TrustAnchor
from .store import Repository, canonical_decode, canonical_encode

__all__ = [
    "ApprovalToken", "AuditRecord", "AuditVerdict", "Authority", "Certificate", "ChainVerdict",
    "Crl", "DepositRecord", "KdfParams", "KeyAuthorityError", "KeyInstance", "KeyMaterial",
    "KeyRecord", "Passphrase", "PassphrasePolicy", "Pse", "Repository", "Session",
    "SoftwareProvider", "State", "Transition", "TrustAnchor", "canonical_decode",
    "canonical_encode",
]
