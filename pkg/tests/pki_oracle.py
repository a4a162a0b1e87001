"""Brute-force reference for certification-path validation.

Enumerates every ordered selection of distinct pool certificates that starts
at the leaf, instead of searching.  Shares only the data types with the code
under test.
"""

import itertools
import random

from keyauthority import crypto
from keyauthority.pki import CERT_SIGN, CRL_SIGN, Certificate, Crl, RevokedEntry, TrustAnchor

PRIORITY = ["Revoked", "Expired", "NotYetValid", "NotCA", "BadSignature"]
PER_CERT_ORDER = ["BadSignature", "NotYetValid", "Expired", "Revoked", "NotCA"]


def _verifies(public, body, signature):
    return crypto.verify(public, body, signature)


def current_crls(crls, anchors, pool):
    best = {}
    for crl in crls:
        keys = [a.public_key for a in anchors if a.dn == crl.issuer_dn]
        keys += [c.subject_public_key for c in pool if c.subject_dn == crl.issuer_dn]
        if not any(_verifies(k, crl.tbs(), crl.signature) for k in keys):
            continue
        if crl.issuer_dn not in best or crl.number > best[crl.issuer_dn].number:
            best[crl.issuer_dn] = crl
    return best


def cert_failures(path, i, anchor, at, crls):
    cert = path[i]
    signer = path[i + 1].subject_public_key if i + 1 < len(path) else anchor.public_key
    found = set()
    if not _verifies(signer, cert.tbs(), cert.signature):
        found.add("BadSignature")
    if at < cert.valid_from:
        found.add("NotYetValid")
    if at >= cert.valid_to:
        found.add("Expired")
    crl = crls.get(cert.issuer_dn)
    if crl and any(e.serial == cert.serial and e.revocation_time <= at for e in crl.entries):
        found.add("Revoked")
    if i > 0 and CERT_SIGN not in cert.key_usage:
        found.add("NotCA")
    return found


def path_failure(path, anchor, at, crls):
    for i in range(len(path)):
        found = cert_failures(path, i, anchor, at, crls)
        for reason in PER_CERT_ORDER:
            if reason in found:
                return reason
    return None


def candidate_paths(leaf, anchors, pool, max_len):
    others = [c for c in dict.fromkeys(pool) if c != leaf]
    for n in range(0, max_len):
        for tail in itertools.permutations(others, n):
            path = (leaf,) + tail
            if all(path[i].issuer_dn == path[i + 1].subject_dn for i in range(len(path) - 1)):
                for anchor in anchors:
                    if anchor.dn == path[-1].issuer_dn:
                        yield path, anchor


def oracle(leaf, anchors, at, pool, crls, max_len=6):
    """Returns (valid, reason, set of valid paths as cert-id tuples)."""
    crls = current_crls(crls, anchors, pool)
    failures, valid = set(), set()
    for path, anchor in candidate_paths(leaf, anchors, pool, max_len):
        failure = path_failure(path, anchor, at, crls)
        if failure is None:
            valid.add(tuple(c.cert_id for c in path))
        else:
            failures.add(failure)
    if valid:
        return True, None, valid
    for reason in PRIORITY:
        if reason in failures:
            return False, reason, valid
    return False, "NoPath", valid


class GraphFactory:
    """Random small certificate graphs with cross-certificates, bad signatures,
    odd validity windows and CRLs."""

    DNS = ["CN=A", "CN=B", "CN=C", "CN=D"]

    def __init__(self, seed=0):
        prov = crypto.SoftwareProvider(kdf=crypto.KdfParams(log2n=4), rng=crypto.DeterministicRandom(seed))
        self.prov = prov
        self.keys = {dn: [prov.generate_keypair(key_id=f"{dn}-{i}") for i in range(2)] for dn in self.DNS}
        self.leaf_keys = [prov.generate_keypair(key_id=f"leaf-{i}") for i in range(3)]

    def sign(self, key, body):
        return self.prov.sign(key, body)

    def graph(self, rng: random.Random, max_certs=6):
        serials = {dn: 0 for dn in self.DNS}
        pool = []
        n = rng.randint(1, max_certs)
        leaf_dn = f"CN=leaf{rng.randint(0, 1)}"
        for i in range(n):
            issuer = rng.choice(self.DNS)
            if i == 0:
                subject, pub = leaf_dn, rng.choice(self.leaf_keys).public_part
                usage = {"digitalSignature"} | ({CERT_SIGN} if rng.random() < 0.1 else set())
            else:
                # mostly extend an existing chain so paths actually form
                if rng.random() < 0.75:
                    subject = rng.choice([c.issuer_dn for c in pool])
                else:
                    subject = rng.choice(self.DNS)
                if subject == issuer:
                    issuer = rng.choice([d for d in self.DNS if d != subject])
                skey = rng.choice(self.keys[subject])
                pub = skey.public_part
                usage = {CERT_SIGN, CRL_SIGN} if rng.random() < 0.75 else {"digitalSignature"}
            signer = rng.choice(self.keys[issuer])
            if rng.random() < 0.1:
                signer = rng.choice(self.keys[rng.choice(self.DNS)])
            start = rng.choice([0, 0, 0, 50, 150])
            end = rng.choice([1000, 1000, 1000, 100, 120])
            serials[issuer] += 1
            cert = Certificate(serials[issuer], issuer, subject, pub, start, max(end, start + 1),
                               frozenset(usage), signer.key_id)
            cert = Certificate(**{**cert.__dict__, "signature": self.sign(signer, cert.tbs())})
            pool.append(cert)
        issuers = sorted({c.issuer_dn for c in pool})
        anchor_dns = sorted(set(rng.sample(issuers, 1) + rng.sample(self.DNS, rng.randint(0, 1))))
        anchors = [TrustAnchor(dn, k.public_part) for dn in anchor_dns
                   for k in rng.sample(self.keys[dn], rng.randint(1, 2))]
        crls = []
        for dn in self.DNS:
            issued = [c for c in pool if c.issuer_dn == dn]
            number = 0
            entries = []
            for _ in range(rng.randint(0, 2)):
                number += 1
                if issued and rng.random() < 0.6:
                    victim = rng.choice(issued)
                    if victim.serial not in {e.serial for e in entries}:
                        entries.append(RevokedEntry(victim.serial, rng.choice([10, 110]), "keyCompromise"))
                signer = rng.choice(self.keys[dn])
                crl = Crl(dn, number, 0, 2000, tuple(sorted(entries, key=lambda e: e.serial)),
                          signer.key_id)
                crls.append(Crl(**{**crl.__dict__, "signature": self.sign(signer, crl.tbs())}))
        at = rng.choice([20, 60, 105, 130, 500, 1500])
        return pool[0], anchors, at, pool, crls
