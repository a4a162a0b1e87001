"""Seeded random documents for the encoding determinism check.

``documents(seed, shuffle_seed)`` builds the same logical documents for a
given ``seed``; ``shuffle_seed`` only changes dict insertion order.
"""

import hashlib
import random
import sys
import unicodedata

ALPHABET = ["a", "Z", "0", " ", "$", "\"", "\\", "\n", "é", "é", "ß", "Ω", "中", "\U0001f600",
            "\u0000", " ", "ﬁ", "Å", "Å"]


def _text(rng):
    s = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(0, 6)))
    return unicodedata.normalize("NFC", s)


def _value(rng, depth):
    kind = rng.randrange(7 if depth < 3 else 4)
    if kind == 0:
        return _text(rng)
    if kind == 1:
        return rng.choice([0, -1, 1, 2**53 + 1, -(2**64), 10**30, rng.randint(-1000, 1000)])
    if kind == 2:
        return rng.random() < 0.5
    if kind == 3:
        return rng.randbytes(rng.randint(0, 12))
    if kind == 4:
        return [_value(rng, depth + 1) for _ in range(rng.randint(0, 4))]
    return {_key(rng): _value(rng, depth + 1) for _ in range(rng.randint(0, 5))}


def _key(rng):
    k = _text(rng)
    return ("$" + k) if rng.random() < 0.1 else k


def _shuffle(doc, rng):
    if isinstance(doc, dict):
        items = list(doc.items())
        rng.shuffle(items)
        return {k: _shuffle(v, rng) for k, v in items}
    if isinstance(doc, list):
        return [_shuffle(v, rng) for v in doc]
    return doc


def documents(seed, shuffle_seed, n):
    rng = random.Random(seed)
    shuffler = random.Random(shuffle_seed)
    for _ in range(n):
        yield _shuffle({_key(rng): _value(rng, 0) for _ in range(rng.randint(1, 6))}, shuffler)


def digest_lines(seed, shuffle_seed, n):
    from keyauthority.store import canonical_encode
    for doc in documents(seed, shuffle_seed, n):
        yield hashlib.sha256(canonical_encode(doc)).hexdigest()


if __name__ == "__main__":
    seed, shuffle_seed, n = map(int, sys.argv[1:4])
    sys.stdout.write("\n".join(digest_lines(seed, shuffle_seed, n)) + "\n")
