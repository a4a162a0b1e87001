import random

import pytest

from keyauthority import pki
from keyauthority.crypto import DeterministicRandom, KdfParams, SoftwareProvider
from keyauthority.pki import CERT_SIGN, CRL_SIGN, Certificate, Crl, RevokedEntry, TrustAnchor

from pki_oracle import GraphFactory, oracle


@pytest.fixture(scope="module")
def prov():
    return SoftwareProvider(kdf=KdfParams(log2n=4), rng=DeterministicRandom(11))


@pytest.fixture(scope="module")
def world(prov):
    keys = {n: prov.generate_keypair(key_id=n) for n in ("A", "B", "leaf")}

    def cert(serial, issuer, subject, subject_key, signer, start=0, end=1000, ca=True):
        usage = frozenset({CERT_SIGN, CRL_SIGN} if ca else {"digitalSignature"})
        c = Certificate(serial, issuer, subject, keys[subject_key].public_part, start, end, usage, signer)
        return pki.sign_certificate(c, lambda body: prov.sign(keys[signer], body))

    def crl(issuer, signer, number, entries):
        c = Crl(issuer, number, 0, 2000, tuple(entries), signer)
        return pki.sign_crl(c, lambda body: prov.sign(keys[signer], body))

    leaf = cert(1, "CN=B", "CN=leaf", "leaf", "B", ca=False)
    cross = cert(1, "CN=A", "CN=B", "B", "A")
    anchor_a = TrustAnchor("CN=A", keys["A"].public_part)
    anchor_b = TrustAnchor("CN=B", keys["B"].public_part)
    return dict(keys=keys, cert=cert, crl=crl, leaf=leaf, cross=cross, A=anchor_a, B=anchor_b)


def test_direct_and_cross_paths(world):
    w = world
    v = pki.verify_chain(w["leaf"], [w["B"]], 10, [w["leaf"]])
    assert v.valid and v.path == (w["leaf"].cert_id,)
    v = pki.verify_chain(w["leaf"], [w["A"]], 10, [w["leaf"], w["cross"]])
    assert v.valid and v.path == (w["leaf"].cert_id, w["cross"].cert_id)
    assert pki.verify_chain(w["leaf"], [w["A"]], 10, [w["leaf"]]).reason == "NoPath"


def test_expiry_boundaries(world):
    w = world
    assert pki.verify_chain(w["leaf"], [w["B"]], 999, []).valid
    assert pki.verify_chain(w["leaf"], [w["B"]], 1000, []).reason == "Expired"
    late = w["cert"](5, "CN=B", "CN=leaf", "leaf", "B", start=100, ca=False)
    assert pki.verify_chain(late, [w["B"]], 99, []).reason == "NotYetValid"
    assert pki.verify_chain(late, [w["B"]], 100, []).valid


def test_revocation_uses_latest_crl(world):
    w = world
    leaf = w["leaf"]
    crl1 = w["crl"]("CN=B", "B", 1, [RevokedEntry(leaf.serial, 5, "keyCompromise")])
    assert pki.verify_chain(leaf, [w["B"]], 10, [], [crl1]).reason == "Revoked"
    assert pki.verify_chain(leaf, [w["B"]], 4, [], [crl1]).valid
    # an unverifiable CRL is ignored
    forged = Crl(**{**crl1.__dict__, "number": 9, "entries": ()})
    assert pki.verify_chain(leaf, [w["B"]], 10, [], [crl1, forged]).reason == "Revoked"


def test_bad_signature_and_not_ca(world):
    w = world
    wrong = w["cert"](2, "CN=B", "CN=leaf", "leaf", "A", ca=False)
    assert pki.verify_chain(wrong, [w["B"]], 10, []).reason == "BadSignature"
    non_ca_cross = w["cert"](2, "CN=A", "CN=B", "B", "A", ca=False)
    v = pki.verify_chain(w["leaf"], [w["A"]], 10, [non_ca_cross])
    assert v.reason == "NotCA"


def test_cycles_terminate(world):
    w = world
    ab = w["cert"](3, "CN=A", "CN=B", "B", "A")
    ba = w["cert"](3, "CN=B", "CN=A", "A", "B")
    anchor = TrustAnchor("CN=Z", w["keys"]["A"].public_part)
    assert pki.verify_chain(w["leaf"], [anchor], 10, [ab, ba]).reason == "NoPath"


def test_documents_roundtrip(world):
    w = world
    assert Certificate.from_doc(w["leaf"].to_doc()) == w["leaf"]
    crl = w["crl"]("CN=B", "B", 1, [RevokedEntry(1, 5, "x")])
    assert Crl.from_doc(crl.to_doc()) == crl
    assert crl.tbs() != w["leaf"].tbs()


def test_matches_oracle_on_random_graphs():
    factory = GraphFactory(seed=5)
    rng = random.Random(1234)
    for _ in range(120):
        leaf, anchors, at, pool, crls = factory.graph(rng, max_certs=5)
        got = pki.verify_chain(leaf, anchors, at, pool, crls)
        valid, reason, paths = oracle(leaf, anchors, at, pool, crls)
        assert got.valid == valid and got.reason == reason
        if valid:
            assert got.path in paths
