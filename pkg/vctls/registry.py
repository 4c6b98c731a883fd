import asyncio
import json
import logging
import os
import time
from dataclasses import dataclass
from typing import Optional, Protocol
from urllib.parse import quote

import aiohttp
import aiosqlite

from .identity import (
    Did,
    DidDocument,
    IdentityError,
    IdentityKeyPair,
    canonical_bytes,
    verify_signature,
)

log = logging.getLogger("vctls.registry")

STATUS_ACTIVE = "active"
STATUS_DEACTIVATED = "deactivated"

MODE_PLAIN = "plain"
MODE_AUTHENTICATED = "authenticated"

HEADER_REQUEST_ID = "X-Request-Id"
HEADER_SIGNATURE = "X-Registry-Signature"
HEADER_VERSION = "X-Registry-Version"

REQUEST_ID_SIZE = 16

SCHEMA = """
PRAGMA journal_mode=WAL;

CREATE TABLE IF NOT EXISTS did_documents (
  method_specific_id TEXT PRIMARY KEY,
  method TEXT NOT NULL,
  document TEXT NOT NULL,
  status TEXT NOT NULL,
  version INTEGER NOT NULL,
  updated_ts INTEGER NOT NULL DEFAULT 0
);

CREATE TABLE IF NOT EXISTS ledger_log (
  id INTEGER PRIMARY KEY AUTOINCREMENT,
  did TEXT NOT NULL,
  op TEXT NOT NULL,
  version INTEGER NOT NULL,
  ts INTEGER NOT NULL
);

CREATE INDEX IF NOT EXISTS idx_ledger_log_did
ON ledger_log(did);
"""


class RegistryError(Exception):
    pass


class AlreadyExists(RegistryError):
    pass


class NotFound(RegistryError):
    pass


class Deactivated(RegistryError):
    pass


class BadControlProof(RegistryError):
    pass


class DocumentMismatch(RegistryError):
    pass


class BadRegistrySignature(RegistryError):
    pass


class RegistryUnavailable(RegistryError):
    pass


class RegistryCircuitOpen(RegistryUnavailable):
    pass


def deactivation_message(did: Did) -> bytes:
    return b"deactivate:" + str(did).encode("ascii")


@dataclass(frozen=True)
class LedgerEntry:
    document: DidDocument
    status: str
    version: int


class Ledger:
    """
    DID Documents keyed by method-specific id. Entries are never deleted,
    so a deactivated id stays taken.
    """

    def __init__(self, path: str):
        self.path = path
        self.conn: Optional[aiosqlite.Connection] = None
        self._write_lock = asyncio.Lock()

    async def open(self):
        if self.path != ":memory:":
            parent = os.path.dirname(self.path)
            if parent:
                os.makedirs(parent, exist_ok=True)
        self.conn = await aiosqlite.connect(self.path)
        await self.conn.executescript(SCHEMA)
        await self._migrate()
        await self.conn.commit()

    async def close(self):
        if self.conn:
            await self.conn.close()
            self.conn = None

    async def __aenter__(self) -> "Ledger":
        await self.open()
        return self

    async def __aexit__(self, *exc):
        await self.close()

    async def _migrate(self):
        assert self.conn
        # ledgers written before updated_ts existed
        await self._ensure_column("did_documents", "updated_ts", "INTEGER NOT NULL DEFAULT 0")

    async def _ensure_column(self, table: str, column: str, ddl: str):
        assert self.conn
        cur = await self.conn.execute(f"PRAGMA table_info({table})")
        cols = [row[1] for row in await cur.fetchall()]
        if column not in cols:
            await self.conn.execute(f"ALTER TABLE {table} ADD COLUMN {column} {ddl}")

    async def _log(self, did: Did, op: str, version: int):
        assert self.conn
        await self.conn.execute(
            "INSERT INTO ledger_log(did, op, version, ts) VALUES(?, ?, ?, ?)",
            (str(did), op, version, int(time.time())),
        )

    async def _fetch(self, did: Did) -> Optional[LedgerEntry]:
        assert self.conn
        cur = await self.conn.execute(
            "SELECT method, document, status, version FROM did_documents WHERE method_specific_id=?",
            (did.method_specific_id,),
        )
        row = await cur.fetchone()
        if not row or row[0] != did.method_name:
            return None
        try:
            document = DidDocument.from_dict(json.loads(row[1]))
        except (IdentityError, json.JSONDecodeError) as e:
            raise RegistryError(f"stored document for {did} is corrupt: {e}") from e
        return LedgerEntry(document=document, status=row[2], version=int(row[3]))

    async def lookup(self, did: Did) -> LedgerEntry:
        entry = await self._fetch(did)
        if entry is None:
            raise NotFound(f"{did} is not registered")
        return entry

    async def resolve(self, did: Did) -> LedgerEntry:
        entry = await self.lookup(did)
        if entry.status != STATUS_ACTIVE:
            raise Deactivated(f"{did} was deactivated")
        return entry

    async def create(self, doc: DidDocument) -> Did:
        assert self.conn
        async with self._write_lock:
            cur = await self.conn.execute(
                "SELECT 1 FROM did_documents WHERE method_specific_id=?",
                (doc.id.method_specific_id,),
            )
            if await cur.fetchone():
                raise AlreadyExists(f"{doc.id} already has a ledger entry")
            await self.conn.execute(
                "INSERT INTO did_documents(method_specific_id, method, document, status, version, updated_ts) "
                "VALUES(?, ?, ?, ?, 1, ?)",
                (
                    doc.id.method_specific_id,
                    doc.id.method_name,
                    canonical_bytes(doc).decode("utf-8"),
                    STATUS_ACTIVE,
                    int(time.time()),
                ),
            )
            await self._log(doc.id, "create", 1)
            await self.conn.commit()
        log.debug("Created %s", doc.id)
        return doc.id

    async def update(self, did: Did, new_doc: DidDocument, proof: bytes) -> int:
        """
        proof: signature by the currently registered key over canonical_bytes(new_doc)
        """
        assert self.conn
        if new_doc.id != did:
            raise DocumentMismatch(f"new document is for {new_doc.id}, not {did}")
        async with self._write_lock:
            current = await self.resolve(did)
            if not verify_signature(current.document.public_key, proof, canonical_bytes(new_doc)):
                raise BadControlProof(f"update of {did} is not signed by its controller")
            version = current.version + 1
            await self.conn.execute(
                "UPDATE did_documents SET document=?, version=?, updated_ts=? WHERE method_specific_id=?",
                (canonical_bytes(new_doc).decode("utf-8"), version, int(time.time()), did.method_specific_id),
            )
            await self._log(did, "update", version)
            await self.conn.commit()
        log.debug("Updated %s to version %s", did, version)
        return version

    async def deactivate(self, did: Did, proof: bytes) -> int:
        """
        proof: signature by the currently registered key over deactivation_message(did)
        """
        assert self.conn
        async with self._write_lock:
            current = await self.resolve(did)
            if not verify_signature(current.document.public_key, proof, deactivation_message(did)):
                raise BadControlProof(f"deactivation of {did} is not signed by its controller")
            await self.conn.execute(
                "UPDATE did_documents SET status=?, updated_ts=? WHERE method_specific_id=?",
                (STATUS_DEACTIVATED, int(time.time()), did.method_specific_id),
            )
            await self._log(did, "deactivate", current.version)
            await self.conn.commit()
        log.debug("Deactivated %s", did)
        return current.version

    async def counts(self) -> dict:
        assert self.conn
        out = {STATUS_ACTIVE: 0, STATUS_DEACTIVATED: 0}
        cur = await self.conn.execute("SELECT status, COUNT(*) FROM did_documents GROUP BY status")
        for status, n in await cur.fetchall():
            out[status] = int(n)
        cur = await self.conn.execute("SELECT COUNT(*) FROM ledger_log")
        row = await cur.fetchone()
        out["log_entries"] = int(row[0]) if row else 0
        cur = await self.conn.execute("SELECT COALESCE(MAX(updated_ts), 0) FROM did_documents")
        row = await cur.fetchone()
        out["last_change_ts"] = int(row[0]) if row else 0
        return out

    async def history(self, did: Did) -> list[tuple[str, int, int]]:
        assert self.conn
        cur = await self.conn.execute(
            "SELECT op, version, ts FROM ledger_log WHERE did=? ORDER BY id",
            (str(did),),
        )
        return [(row[0], int(row[1]), int(row[2])) for row in await cur.fetchall()]


# resolution


@dataclass(frozen=True)
class Resolution:
    body: bytes
    version: int
    signature: Optional[bytes] = None


class ResolutionSource(Protocol):
    async def fetch(self, did: Did, request_id: bytes) -> Resolution:
        ...


def sign_resolution(registry_keys: IdentityKeyPair, request_id: bytes, body: bytes) -> bytes:
    return registry_keys.sign(request_id + body)


class LedgerSource:
    """In-process resolution straight from a ledger."""

    def __init__(self, ledger: Ledger, registry_keys: Optional[IdentityKeyPair] = None):
        self.ledger = ledger
        self.registry_keys = registry_keys

    async def fetch(self, did: Did, request_id: bytes) -> Resolution:
        entry = await self.ledger.resolve(did)
        body = canonical_bytes(entry.document)
        signature = None
        if self.registry_keys is not None:
            signature = sign_resolution(self.registry_keys, request_id, body)
        return Resolution(body=body, version=entry.version, signature=signature)


class HttpSource:
    def __init__(
        self,
        session: aiohttp.ClientSession,
        base_url: str,
        timeout_seconds: int = 15,
        cooldown_seconds: int = 5,
    ):
        self.session = session
        self.base_url = base_url.rstrip("/")
        self.timeout = aiohttp.ClientTimeout(total=timeout_seconds)
        self.cooldown_seconds = max(0, int(cooldown_seconds))
        self._down_until_ts = 0.0
        self._last_failure_log_ts = 0.0
        self._last_failure_sig = ""

    def should_log_failure(self, message: str, interval_sec: int = 60) -> bool:
        """
        Logs at most once per interval, or immediately if the failure signature changes.
        """
        now = time.monotonic()
        sig = (message or "")[:200]
        if sig != self._last_failure_sig:
            self._last_failure_sig = sig
            self._last_failure_log_ts = now
            return True
        if now - self._last_failure_log_ts >= max(1, int(interval_sec)):
            self._last_failure_log_ts = now
            return True
        return False

    def _trip(self, message: str):
        self._down_until_ts = time.monotonic() + self.cooldown_seconds
        if self.should_log_failure(message):
            log.warning("Registry at %s unavailable: %s", self.base_url, message)

    async def fetch(self, did: Did, request_id: bytes) -> Resolution:
        if time.monotonic() < self._down_until_ts:
            raise RegistryCircuitOpen(f"registry cooldown for another {self._down_until_ts - time.monotonic():.1f}s")

        # ids may carry ":" "/" or "%", so each segment is escaped whole
        url = f"{self.base_url}/resolve/{quote(did.method_name, safe='')}/{quote(did.method_specific_id, safe='')}"
        headers = {HEADER_REQUEST_ID: request_id.hex()}
        try:
            async with self.session.get(url, headers=headers, timeout=self.timeout) as resp:
                body = await resp.read()
                if resp.status == 404:
                    raise NotFound(f"{did} is not registered")
                if resp.status == 410:
                    raise Deactivated(f"{did} was deactivated")
                if resp.status != 200:
                    raise RegistryUnavailable(f"HTTP {resp.status}: {body[:200]!r}")
                signature_hex = resp.headers.get(HEADER_SIGNATURE, "")
                version_text = resp.headers.get(HEADER_VERSION, "0")
        except RegistryUnavailable as e:
            self._trip(str(e))
            raise
        except (asyncio.TimeoutError, aiohttp.ClientError) as e:
            message = f"{type(e).__name__}: {e}"
            self._trip(message)
            raise RegistryUnavailable(message) from e

        signature = None
        if signature_hex:
            try:
                signature = bytes.fromhex(signature_hex)
            except ValueError:
                signature = b""
        try:
            version = int(version_text)
        except ValueError:
            version = 0
        return Resolution(body=body, version=version, signature=signature)


class MitmSource:
    """
    Sits between an endpoint and its registry and answers selected DIDs with
    forged documents. It can sign only with its own keys, never the registry's.
    """

    def __init__(
        self,
        inner: ResolutionSource,
        forged: dict[Did, DidDocument],
        attacker_keys: Optional[IdentityKeyPair] = None,
    ):
        self.inner = inner
        self.forged = dict(forged)
        self.attacker_keys = attacker_keys
        self.intercepted = 0

    async def fetch(self, did: Did, request_id: bytes) -> Resolution:
        doc = self.forged.get(did)
        if doc is None:
            return await self.inner.fetch(did, request_id)
        self.intercepted += 1
        body = canonical_bytes(doc)
        signature = None
        if self.attacker_keys is not None:
            signature = sign_resolution(self.attacker_keys, request_id, body)
        return Resolution(body=body, version=1, signature=signature)


def mitm_wrap(
    inner: ResolutionSource,
    forged: dict[Did, DidDocument],
    attacker_keys: Optional[IdentityKeyPair] = None,
) -> MitmSource:
    return MitmSource(inner, forged, attacker_keys)


class ResolverChannel:
    def __init__(self, mode: str = MODE_PLAIN, registry_pk: Optional[bytes] = None):
        if mode not in (MODE_PLAIN, MODE_AUTHENTICATED):
            raise ValueError(f"unknown resolver channel mode {mode!r}")
        if mode == MODE_AUTHENTICATED and registry_pk is None:
            raise ValueError("authenticated channel needs the registry public key")
        self.mode = mode
        self.registry_pk = registry_pk
        self.resolve_counter = 0
        self.resolve_seconds = 0.0

    def reset(self):
        self.resolve_counter = 0
        self.resolve_seconds = 0.0

    def check(self, request_id: bytes, resolution: Resolution):
        if self.mode != MODE_AUTHENTICATED:
            return
        assert self.registry_pk is not None
        if not resolution.signature:
            raise BadRegistrySignature("registry response carries no signature")
        if not verify_signature(self.registry_pk, resolution.signature, request_id + resolution.body):
            raise BadRegistrySignature("registry signature does not verify")

    async def resolve(self, source: ResolutionSource, did: Did) -> DidDocument:
        self.resolve_counter += 1
        request_id = os.urandom(REQUEST_ID_SIZE)
        started = time.perf_counter()
        try:
            resolution = await source.fetch(did, request_id)
        finally:
            self.resolve_seconds += time.perf_counter() - started
        self.check(request_id, resolution)

        try:
            doc = DidDocument.from_dict(json.loads(resolution.body.decode("utf-8")))
        except (IdentityError, UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DocumentMismatch(f"resolver returned an unreadable document for {did}: {e}") from e
        if doc.id != did:
            raise DocumentMismatch(f"resolver answered {did} with a document for {doc.id}")
        return doc


async def resolve(did: Did, channel: ResolverChannel, source: ResolutionSource) -> DidDocument:
    return await channel.resolve(source, did)


async def http_resolve(
    session: aiohttp.ClientSession,
    base_url: str,
    did: Did,
    channel: ResolverChannel,
    timeout_seconds: int = 15,
) -> DidDocument:
    return await channel.resolve(HttpSource(session, base_url, timeout_seconds, cooldown_seconds=0), did)


class DidResolver:
    """
    What an endpoint holds: a source, the channel it trusts, and an optional
    cache that lives for one handshake.
    """

    def __init__(self, source: ResolutionSource, channel: ResolverChannel, use_cache: bool = False):
        self.source = source
        self.channel = channel
        self.use_cache = use_cache
        self._cache: dict[Did, DidDocument] = {}

    @property
    def resolve_counter(self) -> int:
        return self.channel.resolve_counter

    def clear_cache(self):
        self._cache.clear()

    async def resolve(self, did: Did) -> DidDocument:
        if self.use_cache and did in self._cache:
            return self._cache[did]
        doc = await self.channel.resolve(self.source, did)
        if self.use_cache:
            self._cache[did] = doc
        return doc


def load_registry_keys(path: str, create: bool = False) -> IdentityKeyPair:
    """Registry signing key, stored as a hex seed like endpoint keys."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return IdentityKeyPair.from_hex(f.read())
    except FileNotFoundError:
        if not create:
            raise
    keys = IdentityKeyPair.generate()
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "x", encoding="utf-8") as f:
        f.write(keys.to_hex() + "\n")
    log.info("Generated registry key %s (public %s)", path, keys.pk.hex())
    return keys
