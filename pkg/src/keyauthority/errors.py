"""Error vocabulary shared by every module and surfaced by the CLI.

Each exception's ``label`` is its class name; the CLI prints it verbatim so
scripts can match on a stable identifier.
"""

from __future__ import annotations


class KeyAuthorityError(Exception):
    """Base class for all domain errors."""

    @property
    def label(self) -> str:
        return type(self).__name__


# lifecycle
class IllegalTransition(KeyAuthorityError):
    pass


class InstanceRetired(KeyAuthorityError):
    pass


class SourceNotCopyable(KeyAuthorityError):
    pass


class SourceNotDeposited(KeyAuthorityError):
    pass


class SourceRetired(KeyAuthorityError):
    pass


class InvalidHistory(KeyAuthorityError):
    pass


# domain
class DuplicateDistinguishedName(KeyAuthorityError):
    pass


class InvalidDistinguishedName(KeyAuthorityError):
    pass


class DuplicateParticipant(KeyAuthorityError):
    pass


class KeyNotOwnedByIssuer(KeyAuthorityError):
    pass


class OverlapViolation(KeyAuthorityError):
    pass


class UnknownKey(KeyAuthorityError):
    pass


class UnknownParticipant(KeyAuthorityError):
    pass


class UnknownIssuer(KeyAuthorityError):
    pass


class UnknownProduct(KeyAuthorityError):
    pass


# crypto
class UnsupportedAlgorithm(KeyAuthorityError):
    pass


class WeakParameters(KeyAuthorityError):
    pass


class RngFailure(KeyAuthorityError):
    pass


class PrivateKeyUnavailable(KeyAuthorityError):
    pass


class PolicyTooWeak(KeyAuthorityError):
    pass


class AuthenticationFailed(KeyAuthorityError):
    pass


class MalformedContainer(KeyAuthorityError):
    pass


class UnwrapFailed(KeyAuthorityError):
    pass


class ExportForbidden(KeyAuthorityError):
    pass


# control
class DualControlRequired(KeyAuthorityError):
    pass


class OperatorInactive(KeyAuthorityError):
    pass


class UnknownOperator(KeyAuthorityError):
    pass


class TokenExpired(KeyAuthorityError):
    pass


class TokenReused(KeyAuthorityError):
    pass


class ParameterMismatch(KeyAuthorityError):
    pass


class AuthorityLocked(KeyAuthorityError):
    pass


# store
class MalformedDocument(KeyAuthorityError):
    pass


class NotFound(KeyAuthorityError):
    pass


class StorageCorrupt(KeyAuthorityError):
    pass


class RepoLocked(KeyAuthorityError):
    pass


# authority
class NoValidIssuingKey(KeyAuthorityError):
    pass


class UnknownSubject(KeyAuthorityError):
    pass


class SelfCrossCert(KeyAuthorityError):
    pass


class UnknownSerial(KeyAuthorityError):
    pass


class AlreadyRevoked(KeyAuthorityError):
    pass


class NotOwner(KeyAuthorityError):
    pass


class RecipientNotOwner(KeyAuthorityError):
    pass


class UnknownDeposit(KeyAuthorityError):
    pass


class UnknownInstance(KeyAuthorityError):
    pass


class UnknownCertificate(KeyAuthorityError):
    pass


class AlreadyInitialized(KeyAuthorityError):
    pass


class AuditChainBroken(KeyAuthorityError):
    pass


class UsageError(KeyAuthorityError):
    pass


class IoFailure(KeyAuthorityError):
    pass
