import os
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keyauthority import store
from keyauthority.errors import MalformedDocument, NotFound, RepoLocked, StorageCorrupt
from keyauthority.store import Repository, canonical_decode, canonical_encode

text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=12)
leaf = st.one_of(text, st.integers(-2**70, 2**70), st.booleans(), st.binary(max_size=24))
documents = st.recursive(
    leaf,
    lambda kids: st.one_of(st.lists(kids, max_size=4), st.dictionaries(text, kids, max_size=4)),
    max_leaves=20,
)


def test_keys_sorted_no_whitespace():
    assert canonical_encode({"b": 1, "a": [True, "x"]}) == b'{"a":[true,"x"],"b":1}'


def test_bytes_tagged_as_base64url():
    assert canonical_encode({"k": b"\xfb\xff"}) == b'{"k":{"$bytes":"-_8"}}'
    assert canonical_decode(b'{"k":{"$bytes":"-_8"}}') == {"k": b"\xfb\xff"}


def test_dollar_keys_escaped_and_restored():
    doc = {"$bytes": "not bytes", "$x": 1}
    enc = canonical_encode(doc)
    assert b'"$$bytes"' in enc
    assert canonical_decode(enc) == doc


def test_text_is_nfc_normalised():
    assert canonical_encode("é") == canonical_encode("é")


def test_key_order_is_by_utf8_bytes():
    enc = canonical_encode({"Ａ": 1, "\U0001f600": 2, "z": 3})
    assert enc.index(b"z") < enc.index("Ａ".encode()) < enc.index("\U0001f600".encode())


@pytest.mark.parametrize("bad", [None, 1.5, {"a": None}, {1: "x"}, object(), float("nan")])
def test_encode_rejects_unsupported_values(bad):
    with pytest.raises(MalformedDocument):
        canonical_encode(bad)


def test_encode_rejects_keys_colliding_after_nfc():
    with pytest.raises(MalformedDocument):
        canonical_encode({"é": 1, "é": 2})


@pytest.mark.parametrize("raw", [
    b'{"b":1,"a":2}',            # unsorted
    b'{"a": 1}',                 # whitespace
    b'{"a":1,"a":1}',            # duplicate key
    b'1.0',                      # float
    b'null',
    b'NaN',
    b'{"a":"\\u00e9"}',          # escaped where raw UTF-8 is canonical
    b'{"$bytes":"AA="}',         # padded base64
    b'{"$bytes":"AA","x":1}',    # tag with companions
    b'{"$x":1}',                 # unescaped dollar key
    b'\xff',
    b'',
])
def test_decode_rejects_non_canonical_input(raw):
    with pytest.raises(MalformedDocument):
        canonical_decode(raw)


@settings(max_examples=300)
@given(documents)
def test_decode_inverts_encode(doc):
    enc = canonical_encode(doc)
    assert canonical_encode(canonical_decode(enc)) == enc


def test_digest_is_sha256_of_encoding():
    import hashlib
    assert store.digest({"a": 1}) == hashlib.sha256(b'{"a":1}').digest()


@pytest.mark.parametrize("ident", ["", "../x", "a/b", ".hidden", "x" * 129, "a b"])
def test_check_id_rejects_unsafe_names(ident):
    with pytest.raises(MalformedDocument):
        store.check_id(ident)


def test_frame_roundtrip_and_corruption():
    framed = store.frame({"a": 1})
    assert framed.endswith(b"\n") and b"sha256:" in framed
    assert store.unframe(framed) == {"a": 1}
    with pytest.raises(StorageCorrupt):
        store.unframe(framed.replace(b'"a":1', b'"a":2'))
    with pytest.raises(StorageCorrupt):
        store.unframe(b'{"a":1}')


def test_repository_save_load_list_delete(tmp_path):
    repo = Repository(tmp_path / "r")
    repo.create_layout()
    repo.save("keys", "k1", {"x": b"\x00\x01"})
    assert repo.load("keys", "k1") == {"x": b"\x00\x01"}
    assert repo.list("keys") == ["k1"]
    repo.delete("keys", "k1")
    assert repo.list("keys") == []
    with pytest.raises(NotFound):
        repo.load("keys", "k1")
    with pytest.raises(MalformedDocument):
        repo.save("nonsense", "k1", {})


def test_repository_detects_bit_rot(tmp_path):
    repo = Repository(tmp_path)
    repo.create_layout()
    repo.save("keys", "k", {"v": 1})
    path = tmp_path / "keys" / "k"
    path.write_bytes(path.read_bytes().replace(b"1", b"2", 1))
    with pytest.raises(StorageCorrupt):
        repo.load("keys", "k")


def test_no_temp_files_left_behind(tmp_path):
    repo = Repository(tmp_path)
    repo.create_layout()
    for i in range(5):
        repo.save("certs", "c", {"i": i})
    assert sorted(os.listdir(tmp_path / "certs")) == ["c"]


def test_audit_append_and_read(tmp_path):
    repo = Repository(tmp_path)
    repo.create_layout()
    repo.append_audit({"seq": 0}, {"count": 1, "head": "h"})
    with open(tmp_path / "audit" / "log", "ab") as fh:
        fh.write(b"garbage\n")
    records, head = repo.read_audit()
    assert records == [{"seq": 0}, b"garbage"] and head == {"count": 1, "head": "h"}


def test_lock_is_exclusive(tmp_path):
    repo = Repository(tmp_path)
    with repo.lock():
        with pytest.raises(RepoLocked):
            with Repository(tmp_path).lock():
                pass


def test_lock_wait_queues(tmp_path):
    repo = Repository(tmp_path)
    entered = []
    held = threading.Event()
    release = threading.Event()

    def holder():
        with repo.lock():
            held.set()
            release.wait(5)

    t = threading.Thread(target=holder)
    t.start()
    held.wait(5)
    threading.Timer(0.2, release.set).start()
    with Repository(tmp_path).lock(wait=True, timeout=5):
        entered.append(True)
    t.join()
    assert entered == [True]
