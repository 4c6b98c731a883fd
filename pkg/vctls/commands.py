import argparse
import asyncio
import json
import logging
import os
import random
from datetime import timedelta
from typing import Callable, Optional

import aiohttp

from .bench import CRED_KINDS, BenchError, LawViolation, parse_scenarios, run_bench, write_records
from .config import Config, parse_bind, parse_duration
from .handshake import (
    AlertDescription,
    ClientHandshake,
    EndpointConfig,
    HandshakeAlert,
    HandshakeAborted,
    HandshakeEndpoint,
    HandshakeFailure,
    Role,
    ServerHandshake,
    run_handshake,
)
from .identity import (
    ChainBundle,
    ChainCertificate,
    Did,
    DidDocument,
    IdentityError,
    IdentityKeyPair,
    RawKeyBundle,
    VcBundle,
    VerifiableCredential,
    decode_pem,
    decode_pem_all,
    encode_pem,
    generate_identity,
    issue_vc,
    make_chain,
    parse_timestamp,
    utcnow,
)
from .registry import (
    MODE_AUTHENTICATED,
    MODE_PLAIN,
    DidResolver,
    HttpSource,
    Ledger,
    LedgerSource,
    RegistryError,
    ResolverChannel,
    load_registry_keys,
    mitm_wrap,
)
from .texts import (
    format_bench_table,
    format_metrics,
    msg_alert,
    msg_attack_blocked,
    msg_attack_inapplicable,
    msg_attack_succeeded,
    msg_attack_unexpected,
    msg_chain_created,
    msg_identity_created,
    msg_registry_listening,
    msg_vc_issued,
)
from .transport import StreamTransport, TransportClosed, accept_one, open_tcp
from .wire import CertificateKind

log = logging.getLogger("vctls.commands")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_IDENTITY = 4
EXIT_REGISTRY = 5
EXIT_LAW_VIOLATION = 6
EXIT_ATTACK_SUCCEEDED = 7
EXIT_UNEXPECTED = 8
EXIT_INAPPLICABLE = 9

KEY_FILE = "identity.key"
DOC_FILE = "did-document.pem"
VC_FILE = "vc.pem"
ROOT_FILE = "root.pem"
CHAIN_FILE = "chain.pem"
LEAF_KEY_FILE = "leaf.key"


class CommandError(Exception):
    exit_code = EXIT_USAGE


class UsageError(CommandError):
    exit_code = EXIT_USAGE


class ClaimsError(CommandError):
    exit_code = EXIT_USAGE


class BundleError(CommandError):
    exit_code = EXIT_IO


class Inapplicable(CommandError):
    exit_code = EXIT_INAPPLICABLE


def exit_code_for(e: BaseException) -> int:
    if isinstance(e, HandshakeAlert):
        return int(e.description)
    if isinstance(e, CommandError):
        return e.exit_code
    if isinstance(e, LawViolation):
        return EXIT_LAW_VIOLATION
    if isinstance(e, BenchError):
        return EXIT_USAGE
    if isinstance(e, IdentityError):
        return EXIT_IDENTITY
    if isinstance(e, RegistryError):
        return EXIT_REGISTRY
    if isinstance(e, OSError):
        return EXIT_IO
    if isinstance(e, ValueError):
        return EXIT_USAGE
    return EXIT_UNEXPECTED


# bundle files


def _write_new(path: str, text: str):
    try:
        with open(path, "x", encoding="utf-8") as f:
            f.write(text)
    except FileExistsError:
        raise BundleError(f"{path} already exists, refusing to overwrite") from None


def _read_text(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except OSError as e:
        raise BundleError(f"cannot read {path}: {e.strerror or e}") from e


def read_keys(path: str) -> IdentityKeyPair:
    return IdentityKeyPair.from_hex(_read_text(path))


def load_identity(directory: str) -> tuple[IdentityKeyPair, DidDocument]:
    keys = read_keys(os.path.join(directory, KEY_FILE))
    doc = decode_pem(_read_text(os.path.join(directory, DOC_FILE)), DidDocument)
    if doc.public_key != keys.pk:
        raise BundleError(f"{directory}: key file does not match the DID Document")
    return keys, doc


def load_vc_bundle(directory: str) -> VcBundle:
    keys, doc = load_identity(directory)
    vc = decode_pem(_read_text(os.path.join(directory, VC_FILE)), VerifiableCredential)
    if vc.subject != doc.id:
        raise BundleError(f"{directory}: credential subject {vc.subject} is not {doc.id}")
    return VcBundle(keys=keys, document=doc, vc=vc)


def load_chain_bundle(directory: str) -> ChainBundle:
    keys = read_keys(os.path.join(directory, LEAF_KEY_FILE))
    certs = tuple(decode_pem_all(_read_text(os.path.join(directory, CHAIN_FILE)), ChainCertificate))
    if certs[0].subject_pk != keys.pk:
        raise BundleError(f"{directory}: leaf key does not match the first certificate")
    return ChainBundle(keys=keys, certificates=certs)


def load_claims(path: str) -> dict:
    text = _read_text(path)
    try:
        claims = json.loads(text)
    except json.JSONDecodeError as e:
        raise ClaimsError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(claims, dict):
        raise ClaimsError(f"{path}:1:1: claims must be a JSON object")
    return claims


# argument helpers


def parse_kinds(text: str) -> tuple[CertificateKind, ...]:
    kinds = []
    for name in (text or "").split(","):
        name = name.strip().lower()
        if not name:
            continue
        if name not in CRED_KINDS:
            raise UsageError(f"unknown certificate type {name!r}, expected one of {sorted(CRED_KINDS)}")
        kinds.append(CRED_KINDS[name])
    return tuple(dict.fromkeys(kinds))


def parse_method_codes(text: Optional[str], cfg: Config) -> tuple[int, ...]:
    table = cfg.did_methods_table
    if not text:
        return tuple(code for code, _ in table.items())
    codes = []
    for name in text.split(","):
        code = table.code(name.strip())
        if code is None:
            raise UsageError(f"DID method {name.strip()!r} is not in the method table")
        codes.append(code)
    return tuple(codes)


def parse_pins(values: list[str]) -> dict[Did, bytes]:
    pins = {}
    for item in values or ():
        did_text, sep, pk_hex = item.rpartition("=")
        if not sep:
            raise UsageError(f"--pin-issuer expects DID=HEXKEY, got {item!r}")
        try:
            pk = bytes.fromhex(pk_hex)
        except ValueError:
            raise UsageError(f"--pin-issuer key for {did_text} is not hex") from None
        if len(pk) != 32:
            raise UsageError(f"--pin-issuer key for {did_text} must be 32 bytes")
        pins[Did.parse(did_text)] = pk
    return pins


def parse_raw_keys(values: list[str]) -> frozenset[bytes]:
    out = set()
    for item in values or ():
        try:
            pk = bytes.fromhex(item)
        except ValueError:
            raise UsageError(f"--trust-raw {item!r} is not hex") from None
        if len(pk) != 32:
            raise UsageError("--trust-raw keys must be 32 bytes")
        out.add(pk)
    return frozenset(out)


def registry_public_key(args: argparse.Namespace, cfg: Config) -> Optional[bytes]:
    if args.mode != MODE_AUTHENTICATED:
        return None
    text = args.registry_key or cfg.registry_public_key
    if not text:
        raise UsageError("authenticated mode needs --registry-key or REGISTRY_PUBLIC_KEY")
    try:
        pk = bytes.fromhex(text)
    except ValueError:
        raise UsageError("registry public key is not hex") from None
    if len(pk) != 32:
        raise UsageError("registry public key must be 32 bytes")
    return pk


def load_credentials(args: argparse.Namespace) -> dict:
    credentials = {}
    if args.vc:
        credentials[CertificateKind.VC] = load_vc_bundle(args.vc)
    if args.chain:
        credentials[CertificateKind.X509] = load_chain_bundle(args.chain)
    if args.rpk:
        credentials[CertificateKind.RAW_PUBLIC_KEY] = RawKeyBundle(read_keys(args.rpk))
    return credentials


def build_endpoint_config(
    role: Role,
    args: argparse.Namespace,
    cfg: Config,
    resolver: DidResolver,
) -> EndpointConfig:
    credentials = load_credentials(args)
    presented = parse_kinds(args.present) if args.present else tuple(credentials)
    accepted = parse_kinds(args.accept)
    anchors = []
    for path in args.trust_anchor or ():
        anchors.extend(decode_pem_all(_read_text(path), ChainCertificate))

    common = dict(
        role=role,
        credentials=credentials,
        did_methods=parse_method_codes(args.did_methods, cfg),
        method_table=cfg.did_methods_table,
        trusted_issuers=parse_pins(args.pin_issuer),
        trust_anchors=tuple(anchors),
        trusted_raw_keys=parse_raw_keys(args.trust_raw),
        resolver=resolver,
        rfc7250_enabled=not args.legacy,
        codepoints=cfg.codepoints,
    )
    try:
        if role is Role.CLIENT:
            return EndpointConfig(client_cert_types=presented, server_cert_types=accepted, **common)
        return EndpointConfig(
            client_cert_types=accepted,
            server_cert_types=presented,
            request_client_auth=args.mutual,
            **common,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e


def http_resolver(session: aiohttp.ClientSession, args: argparse.Namespace, cfg: Config) -> DidResolver:
    source = HttpSource(
        session,
        args.registry_url or cfg.registry_url,
        timeout_seconds=cfg.http_timeout_seconds,
        cooldown_seconds=cfg.registry_cooldown_sec,
    )
    return DidResolver(source, ResolverChannel(args.mode, registry_public_key(args, cfg)))


def _report_alert(role: Role, e: HandshakeAlert) -> int:
    print(msg_alert(role.value, e.alert_name, str(e)))
    return int(e.description)


async def _run_endpoint(endpoint: HandshakeEndpoint, timeout: float):
    try:
        await asyncio.wait_for(endpoint.run(), timeout)
    except asyncio.TimeoutError:
        await endpoint.close()
        raise HandshakeFailure(f"no handshake within {timeout:.0f}s") from None


# verbs


async def cmd_genid(args: argparse.Namespace, cfg: Config) -> int:
    os.makedirs(args.out, exist_ok=True)
    key_path = os.path.join(args.out, KEY_FILE)
    doc_path = os.path.join(args.out, DOC_FILE)
    for path in (key_path, doc_path):
        if os.path.exists(path):
            raise BundleError(f"{path} already exists, refusing to overwrite")

    seed = bytes.fromhex(args.seed) if args.seed else None
    keys, did, doc = generate_identity(args.method, seed, cfg.did_methods_table)
    async with Ledger(args.ledger or cfg.ledger_path) as ledger:
        await ledger.create(doc)

    _write_new(key_path, keys.to_hex() + "\n")
    _write_new(doc_path, encode_pem(doc))
    print(msg_identity_created(str(did), args.out))
    return EXIT_OK


async def cmd_issue(args: argparse.Namespace, cfg: Config) -> int:
    issuer_keys, issuer_doc = load_identity(args.issuer)
    subject = Did.parse(args.subject)
    claims = load_claims(args.claims)

    not_before = parse_timestamp(args.not_before) if args.not_before else utcnow()
    if args.not_after:
        not_after = parse_timestamp(args.not_after)
    else:
        validity = parse_duration(args.validity) if args.validity else cfg.vc_validity_sec
        not_after = not_before + timedelta(seconds=validity)

    vc = issue_vc(issuer_keys, issuer_doc.id, subject, claims, not_before, not_after)
    _write_new(args.out, encode_pem(vc))
    print(msg_vc_issued(vc.id, str(subject), args.out))
    return EXIT_OK


async def cmd_genchain(args: argparse.Namespace, cfg: Config) -> int:
    os.makedirs(args.out, exist_ok=True)
    paths = [os.path.join(args.out, name) for name in (ROOT_FILE, CHAIN_FILE, LEAF_KEY_FILE)]
    for path in paths:
        if os.path.exists(path):
            raise BundleError(f"{path} already exists, refusing to overwrite")

    validity = parse_duration(args.validity) if args.validity else cfg.vc_validity_sec
    now = utcnow()
    bundle = make_chain(
        (args.root_name, args.ca_name, args.subject),
        now - timedelta(minutes=5),
        now + timedelta(seconds=validity),
    )
    root_path, chain_path, key_path = paths
    _write_new(root_path, encode_pem(bundle.root))
    _write_new(chain_path, "".join(encode_pem(c) for c in bundle.certificates))
    _write_new(key_path, bundle.keys.to_hex() + "\n")
    print(msg_chain_created(args.subject, args.out))
    return EXIT_OK


async def cmd_serve_registry(args: argparse.Namespace, cfg: Config) -> int:
    from node.main import serve_http

    if args.mode not in (MODE_PLAIN, MODE_AUTHENTICATED):
        raise UsageError(f"unknown registry mode {args.mode!r}")
    host, port = parse_bind(args.bind or cfg.registry_bind)
    registry_keys = None
    if args.mode == MODE_AUTHENTICATED:
        registry_keys = load_registry_keys(args.key or cfg.registry_key_path, create=True)
        print(f"registry public key {registry_keys.pk.hex()}")

    async with Ledger(args.ledger or cfg.ledger_path) as ledger:
        service = await serve_http(ledger, host, port, args.mode, registry_keys)
        print(msg_registry_listening(service.base_url, args.mode))
        try:
            await service.task
        finally:
            await service.stop()
    return EXIT_OK


async def cmd_server(
    args: argparse.Namespace,
    cfg: Config,
    on_listening: Optional[Callable[[str, int], None]] = None,
) -> int:
    host, port = parse_bind(args.listen)
    async with aiohttp.ClientSession() as session:
        config = build_endpoint_config(Role.SERVER, args, cfg, http_resolver(session, args, cfg))
        transport = await accept_one(host, port, on_listening)
        endpoint = ServerHandshake(config, transport)
        try:
            await _run_endpoint(endpoint, cfg.handshake_timeout_sec)
            await endpoint.send_application_data(await endpoint.receive_application_data())
        except HandshakeAlert as e:
            return _report_alert(Role.SERVER, e)
        finally:
            await endpoint.close()

    print(format_metrics(Role.SERVER.value, endpoint.outcome, endpoint.metrics, cfg.codepoints))
    return EXIT_OK


async def cmd_client(args: argparse.Namespace, cfg: Config) -> int:
    host, port = parse_bind(args.connect)
    message = args.message.encode("utf-8")
    if not message:
        raise UsageError("--message must not be empty")
    async with aiohttp.ClientSession() as session:
        config = build_endpoint_config(Role.CLIENT, args, cfg, http_resolver(session, args, cfg))
        try:
            transport: StreamTransport = await open_tcp(host, port, cfg.handshake_timeout_sec)
        except TransportClosed as e:
            raise BundleError(str(e)) from e
        endpoint = ClientHandshake(config, transport)
        try:
            await _run_endpoint(endpoint, cfg.handshake_timeout_sec)
            await endpoint.send_application_data(message)
            echo = await endpoint.receive_application_data()
            if echo != message:
                raise HandshakeFailure("echo came back altered")
        except HandshakeAlert as e:
            return _report_alert(Role.CLIENT, e)
        finally:
            await endpoint.close()

    print(format_metrics(Role.CLIENT.value, endpoint.outcome, endpoint.metrics, cfg.codepoints))
    print(f"  echo               {echo.decode('utf-8', 'replace')}")
    return EXIT_OK


async def cmd_bench(args: argparse.Namespace, cfg: Config) -> int:
    text = _read_text(args.scenarios)
    repetitions = args.repetitions or cfg.bench_repetitions
    specs = parse_scenarios(text, args.scenarios, repetitions)

    code = EXIT_OK
    try:
        reports = await run_bench(
            specs,
            pool_size=args.pool_size or cfg.bench_pool_size,
            workers=args.workers or cfg.bench_workers,
            seed=args.seed,
            codepoints=cfg.codepoints,
            methods=cfg.did_methods_table,
            validity=timedelta(seconds=cfg.vc_validity_sec),
            timeout=cfg.handshake_timeout_sec,
        )
    except LawViolation as e:
        log.error("%s", e)
        reports = e.reports
        code = EXIT_LAW_VIOLATION

    print(format_bench_table(reports))
    if args.records:
        write_records(args.records, reports)
    return code


async def cmd_attack(args: argparse.Namespace, cfg: Config) -> int:
    """
    A forged DID Document for the victim is injected between the client and
    the registry. The attacker presents the victim's credential and signs
    CertificateVerify with its own key.
    """
    from node.main import serve_http

    if args.server_cred != "vc":
        raise Inapplicable(msg_attack_inapplicable(args.server_cred))
    mode = args.mode
    if mode not in (MODE_PLAIN, MODE_AUTHENTICATED):
        raise UsageError(f"unknown resolver mode {mode!r}")

    rng = random.Random(args.seed)
    table = cfg.did_methods_table
    method = table.names()[0]
    codes = tuple(code for code, _ in table.items())
    registry_keys = IdentityKeyPair.generate(rng.randbytes(32))

    async with Ledger(":memory:") as ledger, aiohttp.ClientSession() as session:
        issuer_keys, issuer, issuer_doc = generate_identity(method, rng.randbytes(32), table)
        victim_keys, victim, victim_doc = generate_identity(method, rng.randbytes(32), table)
        await ledger.create(issuer_doc)
        await ledger.create(victim_doc)
        now = utcnow()
        vc = issue_vc(
            issuer_keys, issuer, victim, {"deviceId": "victim-device"},
            now - timedelta(minutes=5), now + timedelta(days=1),
        )
        attacker_keys = IdentityKeyPair.generate(rng.randbytes(32))
        forged = DidDocument(id=victim, public_key=attacker_keys.pk)
        print(f"victim {victim} registered with key {victim_keys.pk.hex()[:16]}...")
        print(f"attacker answers resolutions of {victim} with key {attacker_keys.pk.hex()[:16]}...")

        service = None
        signing_keys = registry_keys if mode == MODE_AUTHENTICATED else None
        if args.via_http:
            service = await serve_http(ledger, mode=mode, registry_keys=signing_keys)
            inner = HttpSource(session, service.base_url, cfg.http_timeout_seconds, cooldown_seconds=0)
        else:
            inner = LedgerSource(ledger, signing_keys)
        mitm = mitm_wrap(inner, {victim: forged}, attacker_keys)
        channel = ResolverChannel(mode, registry_keys.pk if mode == MODE_AUTHENTICATED else None)

        common = dict(did_methods=codes, method_table=table, codepoints=cfg.codepoints)
        client = EndpointConfig(
            role=Role.CLIENT,
            server_cert_types=(CertificateKind.VC,),
            resolver=DidResolver(mitm, channel),
            **common,
        )
        impostor = EndpointConfig(
            role=Role.SERVER,
            credentials={CertificateKind.VC: VcBundle(keys=attacker_keys, document=forged, vc=vc)},
            server_cert_types=(CertificateKind.VC,),
            **common,
        )
        try:
            result = await run_handshake(client, impostor, timeout=cfg.handshake_timeout_sec)
        except HandshakeAborted as e:
            print(f"forged resolutions served: {mitm.intercepted}")
            if mode == MODE_AUTHENTICATED and e.description == AlertDescription.BAD_CERTIFICATE:
                print(msg_attack_blocked(e.alert_name, str(e.client_error)))
                return EXIT_OK
            print(msg_attack_unexpected(mode, f"{e.alert_name}: {e}"))
            return EXIT_UNEXPECTED
        finally:
            if service is not None:
                await service.stop()

    for entry in result.client.message_log:
        print(f"  client {entry.direction:<8} {entry.msg_type.name}")
    print(f"forged resolutions served: {mitm.intercepted}")
    if mode == MODE_PLAIN:
        print(msg_attack_succeeded(str(victim)))
        return EXIT_ATTACK_SUCCEEDED
    print(msg_attack_unexpected(mode, "impersonation completed over an authenticated channel"))
    return EXIT_UNEXPECTED
