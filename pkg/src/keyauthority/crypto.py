"""Key generation, signatures, passphrases, PSE sealing, key wrapping, wiping.

Everything goes through a provider object so a different backend (for
instance one that never exports private material) can be swapped in.
Private material lives in ``bytearray`` buffers that ``wipe`` overwrites in
place.  Copies made inside the OpenSSL backend while a key object is alive
cannot be reached from Python; key objects are therefore built per call and
dropped immediately.
"""

from __future__ import annotations

import hmac
import math
import os
import random
import secrets
import string
import struct
from dataclasses import dataclass, field
from typing import Protocol

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.exceptions import UnsupportedAlgorithm as _BackendUnsupported
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519, padding, rsa, x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt

from . import store
from .errors import (
    AuthenticationFailed,
    ExportForbidden,
    MalformedContainer,
    MalformedDocument,
    PolicyTooWeak,
    PrivateKeyUnavailable,
    RngFailure,
    UnsupportedAlgorithm,
    UnwrapFailed,
    WeakParameters,
)

PSE_MAGIC = b"KAPSE1"
WRAP_VERSION = b"\x01"
DEFAULT_MIN_STRENGTH = 112
DEFAULT_MIN_ENTROPY = 80
URLSAFE_ALPHABET = string.ascii_uppercase + string.ascii_lowercase + string.digits + "-_"


# randomness

class RandomSource(Protocol):
    def randbytes(self, n: int) -> bytes: ...


class SystemRandomSource:
    """Platform entropy (``os.urandom``)."""

    def randbytes(self, n: int) -> bytes:
        return os.urandom(n)


class DeterministicRandom:
    """Seeded source for tests.  Never use for real keys."""

    def __init__(self, seed: int | str | bytes = 0):
        self._rng = random.Random(seed)

    def randbytes(self, n: int) -> bytes:
        return self._rng.randbytes(n)


def health_check(rng: RandomSource) -> None:
    """Reject sources that repeat themselves or emit constant output."""
    try:
        a, b = rng.randbytes(32), rng.randbytes(32)
    except Exception as exc:
        raise RngFailure(f"randomness source failed: {exc}") from exc
    if len(a) != 32 or len(b) != 32:
        raise RngFailure("randomness source returned short output")
    if a == b or len(set(a)) < 4:
        raise RngFailure("randomness source output is repetitive")


# key material

@dataclass(frozen=True)
class AlgorithmInfo:
    name: str
    strength: int
    signing: bool = True


_EC_CURVES = {"ecdsa-p256": (ec.SECP256R1(), hashes.SHA256(), 32),
              "ecdsa-p384": (ec.SECP384R1(), hashes.SHA384(), 48)}


def rsa_strength(bits: int) -> int:
    """Comparable symmetric strength of an RSA modulus (NIST SP 800-57 table)."""
    for limit, strength in ((15360, 256), (7680, 192), (3072, 128), (2048, 112), (1024, 80)):
        if bits >= limit:
            return strength
    return 0


def algorithm_info(algorithm: str, bits: int | None = None) -> AlgorithmInfo:
    if algorithm == "ed25519":
        return AlgorithmInfo(algorithm, 128)
    if algorithm == "x25519":
        return AlgorithmInfo(algorithm, 128, signing=False)
    if algorithm in _EC_CURVES:
        return AlgorithmInfo(algorithm, {"ecdsa-p256": 128, "ecdsa-p384": 192}[algorithm])
    if algorithm == "rsa":
        return AlgorithmInfo(algorithm, rsa_strength(bits or 3072))
    raise UnsupportedAlgorithm(algorithm)


@dataclass(eq=False)
class KeyMaterial:
    key_id: str
    algorithm: str
    public_part: bytes
    private_part: bytearray | None
    created_at: int = 0

    def __repr__(self) -> str:
        held = "held" if self.private_part is not None else "absent"
        return f"KeyMaterial(key_id={self.key_id!r}, algorithm={self.algorithm!r}, private={held})"

    @property
    def has_private(self) -> bool:
        return self.private_part is not None


def wipe(key: KeyMaterial) -> bool:
    """Overwrite the private buffer and drop it.  Idempotent."""
    buf = key.private_part
    if buf is not None:
        for i in range(len(buf)):
            buf[i] = 0
        key.private_part = None
    return True


def wipe_buffer(buf: bytearray | None) -> None:
    if buf is not None:
        for i in range(len(buf)):
            buf[i] = 0


def _private_object(algorithm: str, private: bytes):
    if algorithm == "ed25519":
        return ed25519.Ed25519PrivateKey.from_private_bytes(private)
    if algorithm == "x25519":
        return x25519.X25519PrivateKey.from_private_bytes(private)
    if algorithm in _EC_CURVES:
        return ec.derive_private_key(int.from_bytes(private, "big"), _EC_CURVES[algorithm][0])
    if algorithm == "rsa":
        return serialization.load_der_private_key(private, password=None)
    raise UnsupportedAlgorithm(algorithm)


def _spki(public_key) -> bytes:
    return public_key.public_bytes(serialization.Encoding.DER,
                                   serialization.PublicFormat.SubjectPublicKeyInfo)


def _sign_with(algorithm: str, priv, message: bytes) -> bytes:
    if algorithm == "ed25519":
        return priv.sign(message)
    if algorithm in _EC_CURVES:
        return priv.sign(message, ec.ECDSA(_EC_CURVES[algorithm][1]))
    if algorithm == "rsa":
        return priv.sign(message, padding.PSS(padding.MGF1(hashes.SHA256()), 32), hashes.SHA256())
    raise UnsupportedAlgorithm(f"{algorithm} cannot sign")


def verify(public_part: bytes, message: bytes, signature: bytes) -> bool:
    """Check ``signature`` over ``message`` against a DER SubjectPublicKeyInfo."""
    try:
        pub = serialization.load_der_public_key(bytes(public_part))
    except (ValueError, TypeError, _BackendUnsupported):
        return False
    try:
        if isinstance(pub, ed25519.Ed25519PublicKey):
            pub.verify(signature, message)
        elif isinstance(pub, ec.EllipticCurvePublicKey):
            h = hashes.SHA384() if pub.curve.name == "secp384r1" else hashes.SHA256()
            pub.verify(signature, message, ec.ECDSA(h))
        elif isinstance(pub, rsa.RSAPublicKey):
            pub.verify(signature, message, padding.PSS(padding.MGF1(hashes.SHA256()), 32),
                       hashes.SHA256())
        else:
            return False
    except (InvalidSignature, ValueError):
        return False
    return True


# passphrases

@dataclass(frozen=True)
class PassphrasePolicy:
    alphabet: str = URLSAFE_ALPHABET
    length: int = 16
    min_entropy_bits: float = DEFAULT_MIN_ENTROPY

    @property
    def entropy_bits(self) -> float:
        if len(self.alphabet) < 2 or self.length < 1:
            return 0.0
        return self.length * math.log2(len(self.alphabet))


@dataclass(frozen=True)
class Passphrase:
    secret: str = field(repr=False)
    entropy_bits: float


def _uniform_index(rng: RandomSource, n: int) -> int:
    limit = (1 << 32) - ((1 << 32) % n)
    while True:
        v = int.from_bytes(rng.randbytes(4), "big")
        if v < limit:
            return v % n


def generate_passphrase(policy: PassphrasePolicy = PassphrasePolicy(),
                        rng: RandomSource | None = None) -> Passphrase:
    if len(set(policy.alphabet)) != len(policy.alphabet):
        raise PolicyTooWeak("alphabet contains repeated symbols")
    bits = policy.entropy_bits
    if bits < policy.min_entropy_bits or bits <= 0:
        raise PolicyTooWeak(f"{bits:.1f} bits below the {policy.min_entropy_bits} bit floor")
    rng = rng or SystemRandomSource()
    chars = [policy.alphabet[_uniform_index(rng, len(policy.alphabet))] for _ in range(policy.length)]
    return Passphrase("".join(chars), bits)


# KDF

@dataclass(frozen=True)
class KdfParams:
    """scrypt cost; ``log2n`` is the log2 of the CPU/memory cost."""

    log2n: int = 15
    r: int = 8
    p: int = 1

    def to_doc(self) -> dict:
        return {"name": "scrypt", "log2n": self.log2n, "r": self.r, "p": self.p}

    @classmethod
    def from_doc(cls, doc: dict) -> "KdfParams":
        if doc.get("name") != "scrypt":
            raise MalformedContainer("unknown KDF")
        params = cls(doc["log2n"], doc["r"], doc["p"])
        if not (1 <= params.log2n <= 22 and 1 <= params.r <= 32 and 1 <= params.p <= 16):
            raise MalformedContainer("KDF parameters out of range")
        return params


def derive_key(passphrase: str, salt: bytes, params: KdfParams, length: int = 32) -> bytes:
    kdf = Scrypt(salt=salt, length=length, n=1 << params.log2n, r=params.r, p=params.p)
    return kdf.derive(passphrase.encode("utf-8"))


def make_verifier(passphrase: str, params: KdfParams, rng: RandomSource | None = None) -> dict:
    salt = (rng or SystemRandomSource()).randbytes(16)
    return {"kdf": params.to_doc(), "salt": salt, "hash": derive_key(passphrase, salt, params)}


def check_verifier(verifier: dict, passphrase: str) -> bool:
    params = KdfParams.from_doc(verifier["kdf"])
    candidate = derive_key(passphrase, verifier["salt"], params)
    return hmac.compare_digest(candidate, verifier["hash"])


# PSE containers

@dataclass(frozen=True)
class Pse:
    """Passphrase-sealed container: ``KAPSE1 || u32 header_len || header || payload``."""

    container_id: str
    header: dict
    sealed_payload: bytes
    subject: str

    def header_bytes(self) -> bytes:
        return store.canonical_encode(self.header)

    def to_bytes(self) -> bytes:
        header = self.header_bytes()
        return PSE_MAGIC + struct.pack(">I", len(header)) + header + self.sealed_payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Pse":
        data = bytes(data)
        if len(data) < len(PSE_MAGIC) + 4 or not data.startswith(PSE_MAGIC):
            raise MalformedContainer("missing KAPSE1 magic")
        (hlen,) = struct.unpack(">I", data[6:10])
        if 10 + hlen > len(data):
            raise MalformedContainer("truncated header")
        try:
            header = store.canonical_decode(data[10:10 + hlen])
        except MalformedDocument as exc:
            raise MalformedContainer(str(exc)) from exc
        if not isinstance(header, dict):
            raise MalformedContainer("header is not a document")
        try:
            return cls(header["container_id"], header, data[10 + hlen:], header["subject"])
        except KeyError as exc:
            raise MalformedContainer(f"header lacks {exc}") from None


# providers

class SoftwareProvider:
    """Default provider: keys generated and used in process memory."""

    name = "software"
    exportable = True

    def __init__(self, min_strength: int = DEFAULT_MIN_STRENGTH, kdf: KdfParams = KdfParams(),
                 rng: RandomSource | None = None):
        self.min_strength = min_strength
        self.kdf = kdf
        self.rng = rng or SystemRandomSource()

    def generate_keypair(self, algorithm: str = "ed25519", bits: int | None = None, *,
                         rng: RandomSource | None = None, key_id: str | None = None,
                         now: int = 0) -> KeyMaterial:
        info = algorithm_info(algorithm, bits)
        if info.strength < self.min_strength:
            raise WeakParameters(f"{algorithm} strength {info.strength} below floor {self.min_strength}")
        rng = rng or self.rng
        health_check(rng)

        if algorithm in ("ed25519", "x25519"):
            private = bytearray(rng.randbytes(32))
        elif algorithm in _EC_CURVES:
            curve, _, size = _EC_CURVES[algorithm]
            order = _CURVE_ORDERS[algorithm]
            while True:
                scalar = int.from_bytes(rng.randbytes(size), "big")
                if 1 <= scalar < order:
                    break
            private = bytearray(scalar.to_bytes(size, "big"))
        else:
            # OpenSSL draws RSA primes from its own generator
            obj = rsa.generate_private_key(public_exponent=65537, key_size=bits or 3072)
            private = bytearray(obj.private_bytes(serialization.Encoding.DER,
                                                  serialization.PrivateFormat.PKCS8,
                                                  serialization.NoEncryption()))
        obj = _private_object(algorithm, bytes(private))
        key = KeyMaterial(key_id or "key-" + secrets.token_hex(8), algorithm,
                          _spki(obj.public_key()), private, now)
        del obj
        self._self_test(key)
        return key

    def _self_test(self, key: KeyMaterial) -> None:
        if algorithm_info(key.algorithm).signing:
            probe = b"key-authority self-test"
            if not verify(key.public_part, probe, self.sign(key, probe)):
                wipe(key)
                raise RngFailure("generated key failed its sign/verify self-test")
        else:
            peer = x25519.X25519PrivateKey.generate()
            mine = _private_object(key.algorithm, bytes(key.private_part))
            pub = serialization.load_der_public_key(key.public_part)
            if mine.exchange(peer.public_key()) != peer.exchange(pub):
                wipe(key)
                raise RngFailure("generated key failed its agreement self-test")

    def sign(self, key: KeyMaterial, message: bytes) -> bytes:
        if key.private_part is None:
            raise PrivateKeyUnavailable(key.key_id)
        priv = _private_object(key.algorithm, bytes(key.private_part))
        return _sign_with(key.algorithm, priv, message)

    def verify(self, public_part: bytes, message: bytes, signature: bytes) -> bool:
        return verify(public_part, message, signature)

    def export_private(self, key: KeyMaterial) -> bytearray:
        if key.private_part is None:
            raise PrivateKeyUnavailable(key.key_id)
        return key.private_part

    def generate_passphrase(self, policy: PassphrasePolicy = PassphrasePolicy(),
                            rng: RandomSource | None = None) -> Passphrase:
        return generate_passphrase(policy, rng or self.rng)

    # PSE

    def seal_pse(self, key: KeyMaterial, passphrase: Passphrase | str, subject: str,
                 container_id: str | None = None) -> Pse:
        private = self.export_private(key)
        secret = passphrase.secret if isinstance(passphrase, Passphrase) else passphrase
        salt, nonce = self.rng.randbytes(16), self.rng.randbytes(12)
        header = {
            "version": 1,
            "container_id": container_id or "pse-" + secrets.token_hex(8),
            "subject": subject,
            "kdf": {**self.kdf.to_doc(), "salt": salt},
            "cipher": "AES-256-GCM",
            "nonce": nonce,
        }
        body = bytearray(store.canonical_encode({
            "key_id": key.key_id,
            "algorithm": key.algorithm,
            "public_part": key.public_part,
            "private_part": bytes(private),
            "created_at": key.created_at,
        }))
        pse = Pse(header["container_id"], header, b"", subject)
        aad = PSE_MAGIC + pse.header_bytes()
        kek = derive_key(secret, salt, self.kdf)
        sealed = AESGCM(kek).encrypt(nonce, bytes(body), aad)
        wipe_buffer(body)
        return Pse(pse.container_id, header, sealed, subject)

    def open_pse(self, pse: Pse | bytes, passphrase: Passphrase | str) -> KeyMaterial:
        if isinstance(pse, (bytes, bytearray)):
            pse = Pse.from_bytes(pse)
        secret = passphrase.secret if isinstance(passphrase, Passphrase) else passphrase
        header = pse.header
        try:
            params = KdfParams.from_doc(header["kdf"])
            salt, nonce = header["kdf"]["salt"], header["nonce"]
            if header.get("cipher") != "AES-256-GCM" or header.get("version") != 1:
                raise MalformedContainer("unsupported container version or cipher")
            if not isinstance(salt, bytes) or not isinstance(nonce, bytes) or len(nonce) != 12:
                raise MalformedContainer("bad salt or nonce")
        except (KeyError, TypeError) as exc:
            raise MalformedContainer(f"bad header: {exc}") from None
        kek = derive_key(secret, salt, params)
        try:
            body = AESGCM(kek).decrypt(nonce, pse.sealed_payload, PSE_MAGIC + pse.header_bytes())
        except InvalidTag:
            raise AuthenticationFailed("wrong passphrase or tampered container") from None
        try:
            doc = store.canonical_decode(body)
        except MalformedDocument as exc:
            raise MalformedContainer(str(exc)) from exc
        return KeyMaterial(doc["key_id"], doc["algorithm"], doc["public_part"],
                           bytearray(doc["private_part"]), doc["created_at"])

    # wrapping under the authority master key (X25519 + HKDF + AES-GCM)

    def wrap(self, master_public: bytes, plaintext: bytes | bytearray, aad: bytes) -> bytes:
        peer = serialization.load_der_public_key(master_public)
        if not isinstance(peer, x25519.X25519PublicKey):
            raise UnsupportedAlgorithm("wrapping needs an x25519 master key")
        eph = x25519.X25519PrivateKey.from_private_bytes(self.rng.randbytes(32))
        eph_pub = eph.public_key().public_bytes(serialization.Encoding.Raw,
                                                serialization.PublicFormat.Raw)
        kek = _wrap_kek(eph.exchange(peer), eph_pub)
        nonce = self.rng.randbytes(12)
        return WRAP_VERSION + eph_pub + nonce + AESGCM(kek).encrypt(nonce, bytes(plaintext), aad)

    def unwrap(self, master: KeyMaterial, wrapped: bytes, aad: bytes) -> bytearray:
        if master.private_part is None:
            raise PrivateKeyUnavailable(master.key_id)
        wrapped = bytes(wrapped)
        if len(wrapped) < 1 + 32 + 12 + 16 or wrapped[:1] != WRAP_VERSION:
            raise UnwrapFailed("malformed wrapped key")
        eph_pub, nonce, ct = wrapped[1:33], wrapped[33:45], wrapped[45:]
        priv = x25519.X25519PrivateKey.from_private_bytes(bytes(master.private_part))
        try:
            shared = priv.exchange(x25519.X25519PublicKey.from_public_bytes(eph_pub))
            return bytearray(AESGCM(_wrap_kek(shared, eph_pub)).decrypt(nonce, ct, aad))
        except (InvalidTag, ValueError):
            raise UnwrapFailed("wrapped key failed authentication") from None


class NonExportableProvider(SoftwareProvider):
    """Behaves like a hardware token: keys never leave in exportable form."""

    name = "token"
    exportable = False

    def export_private(self, key: KeyMaterial) -> bytearray:
        raise ExportForbidden(f"{key.key_id} is held by a non-exportable token")


def _wrap_kek(shared: bytes, eph_pub: bytes) -> bytes:
    return HKDF(hashes.SHA256(), 32, salt=eph_pub, info=b"key-authority wrap v1").derive(shared)


_CURVE_ORDERS = {
    "ecdsa-p256": 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551,
    "ecdsa-p384": int(
        "FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFC7634D81F4372DDF"
        "581A0DB248B0A77AECEC196ACCC52973", 16),
}
