"""Canonical document encoding and the on-disk repository.

A document is a tree of ``str`` keys mapping to ``str``, ``int``, ``bool``,
``bytes``, ``list`` or nested ``dict`` values.  The encoding is JSON with:

* keys sorted by their UTF-8 bytes, no whitespace, ``ensure_ascii`` off;
* text normalised to NFC;
* byte strings written as the single-member object ``{"$bytes": <b64url>}``
  (unpadded base64url).  Keys of ordinary objects that start with ``$`` get
  one extra ``$`` prepended so the tag can never collide with user keys.

``canonical_decode`` only accepts input that re-encodes to the very same
bytes, so every document has exactly one valid encoding.

Repository layout::

    <root>/<kind>/<id>       canonical document + "\\n" + "sha256:<hex>\\n"
    <root>/pse/<id>          raw PSE container (magic "KAPSE1", see crypto)
    <root>/audit/log         newline-delimited canonical audit records
    <root>/audit/head        canonical {"count", "head"} document + footer
"""

from __future__ import annotations

import base64
import contextlib
import fcntl
import hashlib
import json
import os
import re
import tempfile
import time
import unicodedata
from pathlib import Path
from typing import Any, Iterator

from .errors import MalformedDocument, NotFound, RepoLocked, StorageCorrupt

BYTES_TAG = "$bytes"

KINDS = (
    "config",
    "operators",
    "participants",
    "issuers",
    "keys",
    "instances",
    "deposits",
    "certs",
    "crls",
    "products",
    "pse",
    "audit",
)

_ID_RE = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9._-]{0,127}$")


def b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def unb64url(text: str) -> bytes:
    if not re.fullmatch(r"[A-Za-z0-9_-]*", text) or len(text) % 4 == 1:
        raise MalformedDocument("invalid base64url text")
    raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    if b64url(raw) != text:
        raise MalformedDocument("non-canonical base64url text")
    return raw


def _to_json_tree(value: Any) -> Any:
    if value is None:
        raise MalformedDocument("null is not allowed")
    if isinstance(value, (str, bool)):
        if isinstance(value, bool):
            return value
        return unicodedata.normalize("NFC", value)
    if isinstance(value, int):
        return value
    if isinstance(value, (bytes, bytearray, memoryview)):
        return {BYTES_TAG: b64url(bytes(value))}
    if isinstance(value, (list, tuple)):
        return [_to_json_tree(v) for v in value]
    if isinstance(value, dict):
        out = {}
        for key, sub in value.items():
            if not isinstance(key, str):
                raise MalformedDocument(f"non-text key {key!r}")
            key = unicodedata.normalize("NFC", key)
            if key.startswith("$"):
                key = "$" + key
            if key in out:
                raise MalformedDocument(f"duplicate key after normalisation: {key!r}")
            out[key] = _to_json_tree(sub)
        return out
    raise MalformedDocument(f"unsupported type {type(value).__name__}")


def _dump(tree: Any) -> str:
    if isinstance(tree, dict):
        items = sorted(tree.items(), key=lambda kv: kv[0].encode("utf-8", "surrogatepass"))
        return "{" + ",".join(
            json.dumps(k, ensure_ascii=False) + ":" + _dump(v) for k, v in items
        ) + "}"
    if isinstance(tree, list):
        return "[" + ",".join(_dump(v) for v in tree) + "]"
    return json.dumps(tree, ensure_ascii=False)


def canonical_encode(doc: Any) -> bytes:
    """Encode ``doc`` deterministically.  Raises MalformedDocument."""
    try:
        return _dump(_to_json_tree(doc)).encode("utf-8")
    except UnicodeEncodeError as exc:
        raise MalformedDocument("text is not encodable as UTF-8") from exc
    except (ValueError, RecursionError) as exc:
        raise MalformedDocument(str(exc)) from exc


def _reject(what: str):
    def hook(_value):
        raise MalformedDocument(f"{what} not allowed")

    return hook


def _pairs(pairs: list[tuple[str, Any]]) -> dict:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise MalformedDocument(f"duplicate key {key!r}")
        out[key] = value
    return out


def _from_json_tree(tree: Any) -> Any:
    if isinstance(tree, list):
        return [_from_json_tree(v) for v in tree]
    if isinstance(tree, dict):
        if BYTES_TAG in tree:
            if len(tree) != 1 or not isinstance(tree[BYTES_TAG], str):
                raise MalformedDocument("malformed byte string")
            return unb64url(tree[BYTES_TAG])
        out = {}
        for key, value in tree.items():
            if key.startswith("$"):
                if not key.startswith("$$"):
                    raise MalformedDocument(f"unescaped reserved key {key!r}")
                key = key[1:]
            out[key] = _from_json_tree(value)
        return out
    if tree is None:
        raise MalformedDocument("null not allowed")
    return tree


def canonical_decode(data: bytes) -> Any:
    """Inverse of canonical_encode; rejects anything not in canonical form."""
    try:
        text = bytes(data).decode("utf-8")
        tree = json.loads(
            text,
            object_pairs_hook=_pairs,
            parse_float=_reject("float"),
            parse_constant=_reject("constant"),
        )
    except MalformedDocument:
        raise
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise MalformedDocument(str(exc)) from exc
    doc = _from_json_tree(tree)
    if canonical_encode(doc) != bytes(data):
        raise MalformedDocument("input is not in canonical form")
    return doc


def digest(doc: Any) -> bytes:
    return hashlib.sha256(canonical_encode(doc)).digest()


def check_id(ident: str) -> str:
    if not isinstance(ident, str) or not _ID_RE.match(ident):
        raise MalformedDocument(f"invalid object id {ident!r}")
    return ident


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
    _fsync_dir(path.parent)


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def frame(doc: Any) -> bytes:
    body = canonical_encode(doc)
    return body + b"\nsha256:" + hashlib.sha256(body).hexdigest().encode() + b"\n"


def unframe(raw: bytes) -> Any:
    body, sep, footer = raw.rpartition(b"\nsha256:")
    if not sep or not footer.endswith(b"\n"):
        raise StorageCorrupt("missing content-hash footer")
    if hashlib.sha256(body).hexdigest().encode() != footer[:-1]:
        raise StorageCorrupt("content hash mismatch")
    try:
        return canonical_decode(body)
    except MalformedDocument as exc:
        raise StorageCorrupt(str(exc)) from exc


class Repository:
    """Filesystem persistence for canonical documents.

    Writes go to a temporary file in the target directory and are renamed
    into place, so a reader sees either the old or the new object.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def exists(self) -> bool:
        return (self.root / "config" / "authority").exists()

    def create_layout(self) -> None:
        for kind in KINDS:
            (self.root / kind).mkdir(parents=True, exist_ok=True)
        os.chmod(self.root, 0o700)

    def _path(self, kind: str, ident: str) -> Path:
        if kind not in KINDS:
            raise MalformedDocument(f"unknown kind {kind!r}")
        return self.root / kind / check_id(ident)

    def save(self, kind: str, ident: str, doc: Any) -> None:
        path = self._path(kind, ident)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, frame(doc))

    def load(self, kind: str, ident: str) -> Any:
        path = self._path(kind, ident)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"{kind}/{ident}") from None
        return unframe(raw)

    def list(self, kind: str) -> list[str]:
        directory = self.root / kind
        if not directory.is_dir():
            return []
        return sorted(p.name for p in directory.iterdir() if not p.name.startswith("."))

    def delete(self, kind: str, ident: str, shred: bool = True) -> None:
        path = self._path(kind, ident)
        if not path.exists():
            return
        if shred:
            size = path.stat().st_size
            with open(path, "r+b") as fh:
                fh.write(b"\0" * size)
                fh.flush()
                os.fsync(fh.fileno())
        path.unlink()
        _fsync_dir(path.parent)

    def save_raw(self, kind: str, ident: str, data: bytes) -> None:
        path = self._path(kind, ident)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, data)

    def load_raw(self, kind: str, ident: str) -> bytes:
        try:
            return self._path(kind, ident).read_bytes()
        except FileNotFoundError:
            raise NotFound(f"{kind}/{ident}") from None

    # audit log: one append-only file plus a separately written head
    def append_audit(self, doc: Any, head: Any) -> None:
        path = self.root / "audit" / "log"
        with open(path, "ab") as fh:
            fh.write(canonical_encode(doc) + b"\n")
            fh.flush()
            os.fsync(fh.fileno())
        _atomic_write(self.root / "audit" / "head", frame(head))

    def read_audit(self) -> tuple[list[Any], Any | None]:
        """Return (records, head).  Undecodable lines come back as raw bytes."""
        path = self.root / "audit" / "log"
        records: list[Any] = []
        if path.exists():
            for line in path.read_bytes().split(b"\n"):
                if not line:
                    continue
                try:
                    records.append(canonical_decode(line))
                except MalformedDocument:
                    records.append(line)
        head_path = self.root / "audit" / "head"
        head = unframe(head_path.read_bytes()) if head_path.exists() else None
        return records, head

    def iter_files(self) -> Iterator[Path]:
        for path in self.root.rglob("*"):
            if path.is_file():
                yield path

    @contextlib.contextmanager
    def lock(self, wait: bool = False, timeout: float = 30.0):
        """Exclusive per-repository lock held for one CLI invocation."""
        self.root.mkdir(parents=True, exist_ok=True)
        fh = open(self.root / ".lock", "a+b")
        try:
            deadline = time.monotonic() + timeout
            while True:
                try:
                    fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
                    break
                except BlockingIOError:
                    if not wait or time.monotonic() > deadline:
                        raise RepoLocked(str(self.root)) from None
                    time.sleep(0.05)
            yield self
        finally:
            fh.close()
