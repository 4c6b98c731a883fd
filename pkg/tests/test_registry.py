import asyncio
import os
import random
import tempfile
import time
import unittest

import aiohttp
import aiosqlite

from node.main import serve_http
from vctls.identity import Did, DidDocument, IdentityKeyPair, canonical_bytes, generate_identity
from vctls.registry import (
    HEADER_SIGNATURE,
    HEADER_VERSION,
    MODE_AUTHENTICATED,
    MODE_PLAIN,
    AlreadyExists,
    BadControlProof,
    BadRegistrySignature,
    Deactivated,
    DidResolver,
    DocumentMismatch,
    HttpSource,
    Ledger,
    LedgerSource,
    NotFound,
    RegistryCircuitOpen,
    RegistryUnavailable,
    Resolution,
    ResolverChannel,
    deactivation_message,
    http_resolve,
    load_registry_keys,
    mitm_wrap,
    resolve,
    sign_resolution,
)


class FakeResponse:
    def __init__(self, status: int, body: bytes = b"", headers=None):
        self.status = status
        self.body = body
        self.headers = headers or {}

    async def __aenter__(self):
        return self

    async def __aexit__(self, exc_type, exc, tb):
        return False

    async def read(self):
        return self.body


class FakeSession:
    def __init__(self, response=None, error=None):
        self.response = response
        self.error = error
        self.calls = []

    def get(self, url, headers=None, timeout=None):
        self.calls.append((url, dict(headers or {})))
        if self.error:
            raise self.error
        return self.response


class StaticSource:
    """Answers every fetch with a fixed resolution."""

    def __init__(self, resolution: Resolution):
        self.resolution = resolution

    async def fetch(self, did, request_id):
        return self.resolution


class LedgerTests(unittest.IsolatedAsyncioTestCase):
    async def asyncSetUp(self):
        self.ledger = Ledger(":memory:")
        await self.ledger.open()
        self.keys, self.did, self.doc = generate_identity("iota", b"alice")

    async def asyncTearDown(self):
        await self.ledger.close()

    async def test_create_then_resolve(self):
        await self.ledger.create(self.doc)

        entry = await self.ledger.resolve(self.did)

        self.assertEqual(entry.document, self.doc)
        self.assertEqual(entry.version, 1)

    async def test_create_twice(self):
        await self.ledger.create(self.doc)

        with self.assertRaises(AlreadyExists):
            await self.ledger.create(self.doc)

    async def test_tombstones_persist(self):
        await self.ledger.create(self.doc)
        await self.ledger.deactivate(self.did, self.keys.sign(deactivation_message(self.did)))

        with self.assertRaises(AlreadyExists):
            await self.ledger.create(self.doc)
        with self.assertRaises(Deactivated):
            await self.ledger.resolve(self.did)

    async def test_unknown_did(self):
        with self.assertRaises(NotFound):
            await self.ledger.resolve(self.did)

    async def test_update_rotates_key(self):
        await self.ledger.create(self.doc)
        new_keys = IdentityKeyPair.generate(b"alice-2")
        new_doc = DidDocument(id=self.did, public_key=new_keys.pk)

        version = await self.ledger.update(self.did, new_doc, self.keys.sign(canonical_bytes(new_doc)))

        self.assertEqual(version, 2)
        self.assertEqual((await self.ledger.resolve(self.did)).document.public_key, new_keys.pk)

        with self.assertRaises(BadControlProof):
            await self.ledger.deactivate(self.did, self.keys.sign(deactivation_message(self.did)))

    async def test_update_with_unrelated_key(self):
        await self.ledger.create(self.doc)
        new_doc = DidDocument(id=self.did, public_key=IdentityKeyPair.generate(b"x").pk)

        with self.assertRaises(BadControlProof):
            await self.ledger.update(self.did, new_doc, IdentityKeyPair.generate(b"mallory").sign(canonical_bytes(new_doc)))

    async def test_update_for_another_did(self):
        await self.ledger.create(self.doc)
        _, _, other_doc = generate_identity("iota", b"bob")

        with self.assertRaises(DocumentMismatch):
            await self.ledger.update(self.did, other_doc, self.keys.sign(canonical_bytes(other_doc)))

    async def test_update_after_deactivate(self):
        await self.ledger.create(self.doc)
        await self.ledger.deactivate(self.did, self.keys.sign(deactivation_message(self.did)))
        new_doc = DidDocument(id=self.did, public_key=IdentityKeyPair.generate(b"y").pk)

        with self.assertRaises(Deactivated):
            await self.ledger.update(self.did, new_doc, self.keys.sign(canonical_bytes(new_doc)))
        with self.assertRaises(Deactivated):
            await self.ledger.deactivate(self.did, self.keys.sign(deactivation_message(self.did)))

    async def test_deactivated_never_resolves_again(self):
        rng = random.Random(13)
        for round_no in range(20):
            keys, did, doc = generate_identity("iota", rng.randbytes(16))
            await self.ledger.create(doc)
            deactivated = False
            for _ in range(rng.randint(1, 6)):
                op = rng.choice(["update", "deactivate", "resolve"])
                try:
                    if op == "update":
                        new_keys = IdentityKeyPair.generate(rng.randbytes(16))
                        new_doc = DidDocument(id=did, public_key=new_keys.pk)
                        await self.ledger.update(did, new_doc, keys.sign(canonical_bytes(new_doc)))
                        keys = new_keys
                    elif op == "deactivate":
                        await self.ledger.deactivate(did, keys.sign(deactivation_message(did)))
                        deactivated = True
                    else:
                        await self.ledger.resolve(did)
                        self.assertFalse(deactivated, f"round {round_no}")
                except Deactivated:
                    self.assertTrue(deactivated)

    async def test_history_and_counts(self):
        before = int(time.time())
        await self.ledger.create(self.doc)
        new_doc = DidDocument(id=self.did, public_key=IdentityKeyPair.generate(b"z").pk)
        await self.ledger.update(self.did, new_doc, self.keys.sign(canonical_bytes(new_doc)))

        history = await self.ledger.history(self.did)
        counts = await self.ledger.counts()

        self.assertEqual([(op, v) for op, v, _ in history], [("create", 1), ("update", 2)])
        last_change = counts.pop("last_change_ts")
        self.assertEqual(counts, {"active": 1, "deactivated": 0, "log_entries": 2})
        self.assertGreaterEqual(last_change, before)
        self.assertLessEqual(last_change, int(time.time()))

    async def test_older_ledger_file_gains_update_times(self):
        fd, path = tempfile.mkstemp(suffix=".sqlite3")
        os.close(fd)
        try:
            async with aiosqlite.connect(path) as conn:
                await conn.execute(
                    "CREATE TABLE did_documents (method_specific_id TEXT PRIMARY KEY, method TEXT NOT NULL, "
                    "document TEXT NOT NULL, status TEXT NOT NULL, version INTEGER NOT NULL)"
                )
                await conn.commit()

            async with Ledger(path) as ledger:
                self.assertEqual((await ledger.counts())["last_change_ts"], 0)
                await ledger.create(self.doc)
                self.assertGreater((await ledger.counts())["last_change_ts"], 0)
                self.assertEqual((await ledger.resolve(self.did)).document, self.doc)
        finally:
            os.remove(path)

    async def test_method_is_part_of_the_key(self):
        await self.ledger.create(self.doc)
        wrong = type(self.did)("web", self.did.method_specific_id)

        with self.assertRaises(NotFound):
            await self.ledger.resolve(wrong)

    async def test_file_ledger_survives_reopen(self):
        fd, path = tempfile.mkstemp(suffix=".sqlite3")
        os.close(fd)
        try:
            async with Ledger(path) as ledger:
                await ledger.create(self.doc)
            async with Ledger(path) as ledger:
                self.assertEqual((await ledger.resolve(self.did)).document, self.doc)
        finally:
            for suffix in ("", "-wal", "-shm"):
                if os.path.exists(path + suffix):
                    os.remove(path + suffix)


class ResolverChannelTests(unittest.IsolatedAsyncioTestCase):
    async def asyncSetUp(self):
        self.ledger = Ledger(":memory:")
        await self.ledger.open()
        self.registry_keys = IdentityKeyPair.generate(b"registry")
        self.keys, self.did, self.doc = generate_identity("iota", b"victim")
        await self.ledger.create(self.doc)

    async def asyncTearDown(self):
        await self.ledger.close()

    async def test_resolve_counts_every_call(self):
        channel = ResolverChannel()
        source = LedgerSource(self.ledger)

        for i in range(5):
            self.assertEqual(await resolve(self.did, channel, source), self.doc)
            self.assertEqual(channel.resolve_counter, i + 1)

        _, unknown, _ = generate_identity("iota", b"nobody")
        with self.assertRaises(NotFound):
            await resolve(unknown, channel, source)
        self.assertEqual(channel.resolve_counter, 6)

    async def test_authenticated_mode_checks_signature(self):
        channel = ResolverChannel(MODE_AUTHENTICATED, self.registry_keys.pk)

        doc = await resolve(self.did, channel, LedgerSource(self.ledger, self.registry_keys))
        self.assertEqual(doc, self.doc)

        with self.assertRaises(BadRegistrySignature):
            await resolve(self.did, channel, LedgerSource(self.ledger, IdentityKeyPair.generate(b"other")))
        with self.assertRaises(BadRegistrySignature):
            await resolve(self.did, channel, LedgerSource(self.ledger))

    async def test_signature_covers_request_id(self):
        body = canonical_bytes(self.doc)
        replayed = Resolution(body=body, version=1, signature=sign_resolution(self.registry_keys, bytes(16), body))
        channel = ResolverChannel(MODE_AUTHENTICATED, self.registry_keys.pk)

        with self.assertRaises(BadRegistrySignature):
            await resolve(self.did, channel, StaticSource(replayed))

    async def test_answer_for_another_did_is_rejected(self):
        _, _, other_doc = generate_identity("iota", b"someone-else")
        channel = ResolverChannel()

        with self.assertRaises(DocumentMismatch):
            await resolve(self.did, channel, StaticSource(Resolution(canonical_bytes(other_doc), 1)))
        with self.assertRaises(DocumentMismatch):
            await resolve(self.did, channel, StaticSource(Resolution(b"not json", 1)))

    async def test_authenticated_mode_needs_key(self):
        with self.assertRaises(ValueError):
            ResolverChannel(MODE_AUTHENTICATED)
        with self.assertRaises(ValueError):
            ResolverChannel("ipsec")

    async def test_mitm_on_plain_channel_returns_forgery(self):
        attacker = IdentityKeyPair.generate(b"attacker")
        forged = DidDocument(id=self.did, public_key=attacker.pk)
        source = mitm_wrap(LedgerSource(self.ledger), {self.did: forged}, attacker)

        doc = await resolve(self.did, ResolverChannel(MODE_PLAIN), source)

        self.assertEqual(doc.public_key, attacker.pk)
        self.assertEqual(source.intercepted, 1)

    async def test_mitm_on_authenticated_channel_is_detected(self):
        attacker = IdentityKeyPair.generate(b"attacker")
        forged = DidDocument(id=self.did, public_key=attacker.pk)
        source = mitm_wrap(LedgerSource(self.ledger, self.registry_keys), {self.did: forged}, attacker)
        channel = ResolverChannel(MODE_AUTHENTICATED, self.registry_keys.pk)

        with self.assertRaises(BadRegistrySignature):
            await resolve(self.did, channel, source)

    async def test_mitm_passes_other_dids_through(self):
        _, other, other_doc = generate_identity("iota", b"bystander")
        await self.ledger.create(other_doc)
        forged = DidDocument(id=self.did, public_key=IdentityKeyPair.generate(b"a").pk)
        source = mitm_wrap(LedgerSource(self.ledger, self.registry_keys), {self.did: forged})
        channel = ResolverChannel(MODE_AUTHENTICATED, self.registry_keys.pk)

        self.assertEqual(await resolve(other, channel, source), other_doc)
        self.assertEqual(source.intercepted, 0)

    async def test_resolver_cache(self):
        channel = ResolverChannel()
        resolver = DidResolver(LedgerSource(self.ledger), channel, use_cache=True)

        await resolver.resolve(self.did)
        await resolver.resolve(self.did)
        self.assertEqual(resolver.resolve_counter, 1)

        resolver.clear_cache()
        await resolver.resolve(self.did)
        self.assertEqual(resolver.resolve_counter, 2)


class HttpSourceTests(unittest.IsolatedAsyncioTestCase):
    def setUp(self):
        _, self.did, self.doc = generate_identity("iota", b"http")

    async def test_status_mapping(self):
        for status, error in ((404, NotFound), (410, Deactivated), (500, RegistryUnavailable)):
            source = HttpSource(FakeSession(FakeResponse(status)), "http://registry", cooldown_seconds=0)
            with self.assertRaises(error, msg=str(status)):
                await source.fetch(self.did, bytes(16))

    async def test_request_carries_path_and_request_id(self):
        session = FakeSession(FakeResponse(200, canonical_bytes(self.doc), {HEADER_VERSION: "3"}))
        source = HttpSource(session, "http://registry/")

        resolution = await source.fetch(self.did, bytes(range(16)))

        url, headers = session.calls[0]
        self.assertEqual(url, f"http://registry/resolve/iota/{self.did.method_specific_id}")
        self.assertEqual(headers["X-Request-Id"], bytes(range(16)).hex())
        self.assertEqual(resolution.version, 3)
        self.assertIsNone(resolution.signature)

    async def test_path_segments_are_escaped(self):
        keys = IdentityKeyPair.generate(b"web")
        doc = DidDocument(Did("web", "example.com:users/a b?x#y%"), keys.pk)
        session = FakeSession(FakeResponse(200, canonical_bytes(doc)))

        await HttpSource(session, "http://registry").fetch(doc.id, bytes(16))

        url, _ = session.calls[0]
        self.assertEqual(url, "http://registry/resolve/web/example.com%3Ausers%2Fa%20b%3Fx%23y%25")

    async def test_stripped_signature_header(self):
        registry_keys = IdentityKeyPair.generate(b"registry")
        session = FakeSession(FakeResponse(200, canonical_bytes(self.doc)))
        channel = ResolverChannel(MODE_AUTHENTICATED, registry_keys.pk)

        with self.assertRaises(BadRegistrySignature):
            await resolve(self.did, channel, HttpSource(session, "http://registry"))

    async def test_cooldown_after_failure(self):
        session = FakeSession(error=aiohttp.ClientConnectionError("refused"))
        source = HttpSource(session, "http://registry", cooldown_seconds=60)

        with self.assertRaises(RegistryUnavailable):
            await source.fetch(self.did, bytes(16))
        with self.assertRaises(RegistryCircuitOpen):
            await source.fetch(self.did, bytes(16))
        self.assertEqual(len(session.calls), 1)

    def test_failure_logging_is_rate_limited(self):
        source = HttpSource(FakeSession(), "http://registry")

        self.assertTrue(source.should_log_failure("boom"))
        self.assertFalse(source.should_log_failure("boom"))
        self.assertTrue(source.should_log_failure("other"))


class HttpServiceTests(unittest.IsolatedAsyncioTestCase):
    async def asyncSetUp(self):
        self.ledger = Ledger(":memory:")
        await self.ledger.open()
        self.registry_keys = IdentityKeyPair.generate(b"registry")
        self.keys, self.did, self.doc = generate_identity("iota", b"served")
        await self.ledger.create(self.doc)
        self.session = aiohttp.ClientSession()

    async def asyncTearDown(self):
        await self.session.close()
        await self.ledger.close()

    async def test_http_and_in_process_resolution_agree(self):
        for mode in (MODE_PLAIN, MODE_AUTHENTICATED):
            service = await serve_http(self.ledger, mode=mode, registry_keys=self.registry_keys)
            try:
                pk = self.registry_keys.pk if mode == MODE_AUTHENTICATED else None
                over_http = ResolverChannel(mode, pk)
                in_process = ResolverChannel(mode, pk)
                source = LedgerSource(self.ledger, self.registry_keys if mode == MODE_AUTHENTICATED else None)

                a = await http_resolve(self.session, service.base_url, self.did, over_http)
                b = await resolve(self.did, in_process, source)

                self.assertEqual(a, b)
                self.assertEqual(canonical_bytes(a), canonical_bytes(b))
                self.assertEqual(over_http.resolve_counter, in_process.resolve_counter)
            finally:
                await service.stop()

    async def test_unknown_and_deactivated(self):
        service = await serve_http(self.ledger)
        try:
            _, unknown, _ = generate_identity("iota", b"unknown")
            with self.assertRaises(NotFound):
                await http_resolve(self.session, service.base_url, unknown, ResolverChannel())

            await self.ledger.deactivate(self.did, self.keys.sign(deactivation_message(self.did)))
            with self.assertRaises(Deactivated):
                await http_resolve(self.session, service.base_url, self.did, ResolverChannel())
        finally:
            await service.stop()

    async def test_authenticated_service_headers(self):
        service = await serve_http(self.ledger, mode=MODE_AUTHENTICATED, registry_keys=self.registry_keys)
        try:
            url = f"{service.base_url}/resolve/iota/{self.did.method_specific_id}"
            async with self.session.get(url) as resp:
                self.assertEqual(resp.status, 400)
            async with self.session.get(url, headers={"X-Request-Id": "ab" * 16}) as resp:
                body = await resp.read()
                self.assertEqual(resp.status, 200)
                self.assertEqual(body, canonical_bytes(self.doc))
                self.assertEqual(resp.headers[HEADER_VERSION], "1")
                self.assertEqual(len(bytes.fromhex(resp.headers[HEADER_SIGNATURE])), 64)
            async with self.session.get(f"{service.base_url}/api/stats") as resp:
                stats = await resp.json()
            self.assertEqual(stats["active"], 1)
            self.assertGreater(stats["last_change_ts"], 0)
            self.assertEqual(stats["mode"], MODE_AUTHENTICATED)
        finally:
            await service.stop()

    async def test_ids_with_reserved_characters_resolve_over_http(self):
        keys = IdentityKeyPair.generate(b"web")
        doc = DidDocument(Did("web", "example.com:users/a b%41"), keys.pk)
        await self.ledger.create(doc)
        service = await serve_http(self.ledger)
        try:
            resolved = await http_resolve(self.session, service.base_url, doc.id, ResolverChannel())
        finally:
            await service.stop()

        self.assertEqual(resolved, doc)

    async def test_healthz(self):
        service = await serve_http(self.ledger)
        try:
            async with self.session.get(f"{service.base_url}/healthz") as resp:
                self.assertEqual(await resp.text(), "ok")
        finally:
            await service.stop()

    async def test_concurrent_resolutions(self):
        service = await serve_http(self.ledger)
        try:
            channel = ResolverChannel()
            docs = await asyncio.gather(*(
                http_resolve(self.session, service.base_url, self.did, channel) for _ in range(10)
            ))
            self.assertTrue(all(d == self.doc for d in docs))
            self.assertEqual(channel.resolve_counter, 10)
        finally:
            await service.stop()


class RegistryKeyFileTests(unittest.TestCase):
    def test_created_once_then_reused(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "keys", "registry.key")
            first = load_registry_keys(path, create=True)
            second = load_registry_keys(path)

            self.assertEqual(first.pk, second.pk)

    def test_missing_without_create(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(FileNotFoundError):
                load_registry_keys(os.path.join(tmp, "absent.key"))


if __name__ == "__main__":
    unittest.main()
