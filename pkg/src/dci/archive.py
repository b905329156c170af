"""Component archives: file format, digest, and the per-node archive store.

An archive file is::

    b"CCAR" | u32 big-endian manifest length | manifest JSON | payload

The checksum is BLAKE2b with a 16-byte digest over ``manifest JSON ||
payload``, rendered as 32 lowercase hex characters. The store keeps one
``<id>.ccar`` file per archive plus ``index.json``; a write is only
committed once the index has been renamed into place.
"""

from __future__ import annotations

import hashlib
import http.client
import json
import logging
import os
import struct
import tempfile
import threading
import urllib.error
import urllib.parse
import urllib.request
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

from dci.errors import (
    ChecksumMismatch,
    FetchFailure,
    IdConflict,
    InUse,
    InvalidManifest,
    IoFailure,
    MalformedArchive,
    NotFound,
)
from dci.model import ArchiveManifest, ComponentArchive, canonical_json, is_identifier, validate_manifest
from dci.model.codec import CodecError, decode

log = logging.getLogger(__name__)

MAGIC = b"CCAR"
_HEADER = struct.Struct(">4sI")
DIGEST_SIZE = 16
INDEX_FILE = "index.json"
SUFFIX = ".ccar"


def digest(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).hexdigest()


def manifest_bytes(manifest: ArchiveManifest) -> bytes:
    return canonical_json(manifest)


def pack(manifest: ArchiveManifest, payload: bytes = b"") -> ComponentArchive:
    errors = validate_manifest(manifest)
    if errors:
        raise InvalidManifest("; ".join(str(e) for e in errors))
    payload = bytes(payload)
    return ComponentArchive(manifest, payload, digest(manifest_bytes(manifest) + payload))


def verify(archive: ComponentArchive) -> bool:
    return digest(manifest_bytes(archive.manifest) + archive.payload) == archive.checksum


def encode_archive(archive: ComponentArchive) -> bytes:
    mb = manifest_bytes(archive.manifest)
    return _HEADER.pack(MAGIC, len(mb)) + mb + archive.payload


def decode_archive(data: bytes) -> ComponentArchive:
    """Parse an archive file; the checksum is recomputed from the bytes."""
    if len(data) < _HEADER.size:
        raise MalformedArchive("shorter than header")
    magic, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MalformedArchive(f"bad magic {magic!r}")
    end = _HEADER.size + n
    if end > len(data):
        raise MalformedArchive("manifest runs past end of file")
    mb = data[_HEADER.size:end]
    try:
        manifest = decode(ArchiveManifest, mb)
    except CodecError as exc:
        raise MalformedArchive(f"bad manifest: {exc}") from exc
    if manifest_bytes(manifest) != mb:
        raise MalformedArchive("manifest is not in canonical form")
    payload = data[end:]
    return ComponentArchive(manifest, payload, digest(mb + payload))


def write_archive(path: str | os.PathLike, archive: ComponentArchive) -> None:
    Path(path).write_bytes(encode_archive(archive))


def read_archive(path: str | os.PathLike) -> ComponentArchive:
    return decode_archive(Path(path).read_bytes())


def fetch_url(url: str, timeout: float = 30.0) -> bytes:
    """Fetch ``file:`` or ``http(s):`` URLs; a short read raises FetchFailure."""
    scheme = urllib.parse.urlsplit(url).scheme
    if scheme not in ("file", "http", "https"):
        raise FetchFailure(f"unsupported scheme {scheme!r}")
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            length = resp.headers.get("Content-Length")
            data = resp.read()
    except http.client.IncompleteRead as exc:
        raise ChecksumMismatch(f"{url}: got {len(exc.partial)} of {length} bytes") from exc
    except (urllib.error.URLError, http.client.HTTPException, OSError, ValueError) as exc:
        raise FetchFailure(f"{url}: {exc}") from exc
    if length is not None and int(length) != len(data):
        raise ChecksumMismatch(f"{url}: got {len(data)} of {length} bytes")
    return data


@dataclass(frozen=True)
class IndexEntry:
    checksum: str
    byte_size: int


class ArchiveStore:
    """Directory-backed archive store.

    ``in_use`` is consulted before uninstall/update; the node agent points it
    at its live-home bookkeeping.
    """

    def __init__(self, root: str | os.PathLike, in_use: Callable[[str], bool] | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.in_use: Callable[[str], bool] = in_use or (lambda _id: False)
        self._lock = threading.RLock()
        self.index: dict[str, IndexEntry] = self._load_index()

    def _load_index(self) -> dict[str, IndexEntry]:
        path = self.root / INDEX_FILE
        if not path.exists():
            return {}
        raw = json.loads(path.read_bytes())
        return {k: IndexEntry(v["checksum"], v["byte_size"]) for k, v in raw.items()}

    def _path(self, archive_id: str) -> Path:
        return self.root / f"{archive_id}{SUFFIX}"

    def _atomic_write(self, path: Path, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def _commit_index(self, index: dict[str, IndexEntry]) -> None:
        body = canonical_json({k: {"checksum": v.checksum, "byte_size": v.byte_size} for k, v in index.items()})
        self._atomic_write(self.root / INDEX_FILE, body)
        self.index = index

    def _check_id(self, archive_id: str) -> None:
        if not is_identifier(archive_id):
            raise NotFound(f"invalid archive id {archive_id!r}")

    def install(self, archive_id: str, archive: ComponentArchive) -> bool:
        """Push-mode install. Returns False when the identical archive was already there."""
        self._check_id(archive_id)
        if not verify(archive):
            raise ChecksumMismatch(f"{archive_id}: digest does not match {archive.checksum}")
        data = encode_archive(archive)
        with self._lock:
            current = self.index.get(archive_id)
            if current is not None:
                if current.checksum == archive.checksum:
                    return False
                raise IdConflict(f"{archive_id} already installed with checksum {current.checksum}")
            self._store(archive_id, data, archive.checksum)
            return True

    def install_bytes(self, archive_id: str, data: bytes, checksum: str | None = None) -> bool:
        try:
            archive = decode_archive(data)
        except MalformedArchive as exc:
            raise ChecksumMismatch(f"{archive_id}: {exc}") from exc
        if checksum is not None and archive.checksum != checksum:
            raise ChecksumMismatch(f"{archive_id}: expected {checksum}, got {archive.checksum}")
        return self.install(archive_id, archive)

    def install_from_url(self, archive_id: str, url: str, checksum: str | None = None) -> bool:
        """Pull-mode install; ``checksum`` is the digest the fetched bytes must have."""
        return self.install_bytes(archive_id, fetch_url(url), checksum)

    def update(self, archive_id: str, archive: ComponentArchive) -> None:
        self._check_id(archive_id)
        if not verify(archive):
            raise ChecksumMismatch(f"{archive_id}: digest does not match")
        with self._lock:
            if archive_id not in self.index:
                raise NotFound(archive_id)
            if self.in_use(archive_id):
                raise InUse(f"{archive_id} backs a live home")
            self._store(archive_id, encode_archive(archive), archive.checksum)

    def _store(self, archive_id: str, data: bytes, checksum: str) -> None:
        index = dict(self.index)
        index[archive_id] = IndexEntry(checksum, len(data))
        try:
            self._atomic_write(self._path(archive_id), data)
            self._commit_index(index)
        except OSError as exc:
            raise IoFailure(f"{archive_id}: {exc}") from exc

    def retrieve(self, archive_id: str) -> ComponentArchive:
        with self._lock:
            entry = self.index.get(archive_id)
            if entry is None:
                raise NotFound(f"archive {archive_id!r} not installed")
            try:
                data = self._path(archive_id).read_bytes()
            except OSError as exc:
                raise IoFailure(f"{archive_id}: {exc}") from exc
        archive = decode_archive(data)
        if archive.checksum != entry.checksum:
            raise ChecksumMismatch(f"{archive_id}: stored file does not match index")
        return archive

    def checksum(self, archive_id: str) -> str | None:
        entry = self.index.get(archive_id)
        return entry.checksum if entry else None

    def list(self) -> list[str]:
        with self._lock:
            return sorted(self.index)

    def uninstall(self, archive_id: str) -> None:
        with self._lock:
            if archive_id not in self.index:
                raise NotFound(f"archive {archive_id!r} not installed")
            if self.in_use(archive_id):
                raise InUse(f"{archive_id} backs a live home")
            index = dict(self.index)
            del index[archive_id]
            try:
                self._commit_index(index)
                self._path(archive_id).unlink(missing_ok=True)
            except OSError as exc:
                raise IoFailure(f"{archive_id}: {exc}") from exc

    def verify_all(self) -> list[str]:
        """Ids whose file no longer matches the index."""
        bad = []
        for archive_id in self.list():
            try:
                self.retrieve(archive_id)
            except (ChecksumMismatch, MalformedArchive, IoFailure):
                bad.append(archive_id)
        return bad
