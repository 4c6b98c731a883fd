"""
Client and server handshake state machines.

Certificate types are negotiated per direction (X.509-type chain, raw public
key, or verifiable credential). When a credential is selected for either
direction the endpoints also agree on the DID methods both can resolve.
"""
import asyncio
import logging
import os
import time
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum, IntEnum
from typing import Callable, Iterable, Mapping, Optional, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, hmac, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDFExpand

from .identity import (
    ChainBundle,
    ChainCertificate,
    Credential,
    Did,
    IdentityError,
    IdentityKeyPair,
    RawKeyBundle,
    VcBundle,
    VerifiableCredential,
    decode_der,
    encode_der,
    utcnow,
    verify_chain,
    verify_signature,
    verify_vc,
)
from .registry import DidResolver, RegistryError, RegistryUnavailable
from .transport import MemoryTransport, Transport, TransportClosed
from .wire import (
    DEFAULT_DID_METHODS,
    GROUP_X25519,
    MAX_CIPHERTEXT,
    MAX_RECORD_PAYLOAD,
    RECORD_HEADER_SIZE,
    SIG_ED25519,
    TLS_AES_256_GCM_SHA384,
    TLS_VERSION_1_3,
    AuthTagMismatch,
    Certificate,
    CertificateEntry,
    CertificateKind,
    CertificateRequest,
    CertificateVerify,
    ClientHello,
    Codepoints,
    ContentType,
    DidMethodTable,
    EncryptedExtensions,
    ExtensionType,
    Finished,
    HandshakeMessage,
    HandshakeType,
    PayloadTooLarge,
    Record,
    ServerHello,
    TrafficKeys,
    WireError,
    decode_alert,
    decode_cert_type_list,
    decode_cert_type_selection,
    decode_did_methods,
    decode_key_share_client,
    decode_key_share_server,
    decode_message,
    decode_signature_algorithms,
    decode_supported_versions_client,
    decode_supported_versions_server,
    encode_alert,
    encode_cert_type_list,
    encode_cert_type_selection,
    encode_did_methods,
    encode_key_share_client,
    encode_key_share_server,
    encode_message,
    encode_plaintext_record,
    encode_signature_algorithms,
    encode_supported_versions_client,
    encode_supported_versions_server,
    find_extension,
    message_length,
    open_record,
    parse_record_header,
    seal_record,
)

log = logging.getLogger("vctls.handshake")

HASH_ALGORITHM = hashes.SHA384()
HASH_SIZE = 48
KEY_SIZE = 32
IV_SIZE = 12

PUBLIC_KEY_BYTES = 32
SIGNATURE_BYTES = 64

CV_CONTEXT_SERVER = b"TLS 1.3, server CertificateVerify"
CV_CONTEXT_CLIENT = b"TLS 1.3, client CertificateVerify"


class Role(Enum):
    CLIENT = "client"
    SERVER = "server"


class State(Enum):
    START = 0
    WAIT_SERVER_HELLO = 1
    WAIT_ENCRYPTED_EXTENSIONS = 2
    WAIT_CERTIFICATE_OR_REQUEST = 3
    WAIT_CERTIFICATE = 4
    WAIT_CERTIFICATE_VERIFY = 5
    WAIT_FINISHED = 6
    WAIT_CLIENT_HELLO = 7
    WAIT_CLIENT_CERTIFICATE = 8
    WAIT_CLIENT_CERTIFICATE_VERIFY = 9
    WAIT_CLIENT_FINISHED = 10
    CONNECTED = 11
    FAILED = 12


class AlertDescription(IntEnum):
    BAD_RECORD_MAC = 20
    HANDSHAKE_FAILURE = 40
    BAD_CERTIFICATE = 42
    UNSUPPORTED_CERTIFICATE = 43
    DECODE_ERROR = 50
    DECRYPT_ERROR = 51
    CERTIFICATE_REQUIRED = 116


def alert_name(description: int) -> str:
    try:
        return AlertDescription(description).name.lower()
    except ValueError:
        return f"alert_{description}"


class HandshakeAlert(Exception):
    description: int = AlertDescription.HANDSHAKE_FAILURE

    @property
    def alert_name(self) -> str:
        return alert_name(self.description)


class UnsupportedCertificate(HandshakeAlert):
    description = AlertDescription.UNSUPPORTED_CERTIFICATE


class HandshakeFailure(HandshakeAlert):
    description = AlertDescription.HANDSHAKE_FAILURE


class CredentialTypeMismatch(HandshakeFailure):
    pass


class BadCertificate(HandshakeAlert):
    description = AlertDescription.BAD_CERTIFICATE


class DecryptError(HandshakeAlert):
    description = AlertDescription.DECRYPT_ERROR


class DecodeError(HandshakeAlert):
    description = AlertDescription.DECODE_ERROR


class BadRecordMac(HandshakeAlert):
    description = AlertDescription.BAD_RECORD_MAC


class CertificateRequired(HandshakeAlert):
    description = AlertDescription.CERTIFICATE_REQUIRED


class PeerAlert(HandshakeAlert):
    """The peer aborted and told us why."""

    def __init__(self, description: int):
        super().__init__(f"peer sent {alert_name(description)}")
        self.description = description


class HandshakeAborted(HandshakeAlert):
    def __init__(self, client_error: Optional[BaseException], server_error: Optional[BaseException]):
        self.client_error = client_error
        self.server_error = server_error
        origin = None
        for err in (client_error, server_error):
            if isinstance(err, HandshakeAlert) and not isinstance(err, PeerAlert):
                origin = err
                break
        if origin is None:
            origin = client_error if isinstance(client_error, HandshakeAlert) else server_error
        if isinstance(origin, HandshakeAlert):
            self.description = origin.description
        super().__init__(f"client: {client_error!r}; server: {server_error!r}")


def as_alert(e: BaseException) -> Optional[HandshakeAlert]:
    if isinstance(e, HandshakeAlert):
        return e
    if isinstance(e, AuthTagMismatch):
        return BadRecordMac(str(e))
    if isinstance(e, WireError):
        return DecodeError(f"{type(e).__name__}: {e}")
    if isinstance(e, TransportClosed):
        return HandshakeFailure(f"transport lost: {e}")
    return None


# key schedule


def hkdf_label(label: bytes, context: bytes, length: int) -> bytes:
    full_label = b"tls13 " + label
    return length.to_bytes(2, "big") + bytes([len(full_label)]) + full_label + bytes([len(context)]) + context


def hkdf_expand_label(secret: bytes, label: bytes, context: bytes, length: int) -> bytes:
    return HKDFExpand(
        algorithm=HASH_ALGORITHM,
        length=length,
        info=hkdf_label(label, context, length),
    ).derive(secret)


def hkdf_extract(salt: bytes, key_material: bytes) -> bytes:
    h = hmac.HMAC(salt, HASH_ALGORITHM)
    h.update(key_material)
    return h.finalize()


def _hash(data: bytes) -> bytes:
    h = hashes.Hash(HASH_ALGORITHM)
    h.update(data)
    return h.finalize()


EMPTY_HASH = _hash(b"")


def derive_secret(secret: bytes, label: bytes, transcript_hash: bytes) -> bytes:
    return hkdf_expand_label(secret, label, transcript_hash, HASH_SIZE)


@dataclass(frozen=True, repr=False)
class SessionSecrets:
    shared_secret: bytes
    early_secret: bytes
    handshake_secret: bytes
    master_secret: bytes
    client_handshake_traffic_secret: bytes
    server_handshake_traffic_secret: bytes
    client_finished_key: bytes
    server_finished_key: bytes
    client_application_traffic_secret: Optional[bytes] = None
    server_application_traffic_secret: Optional[bytes] = None

    def __repr__(self) -> str:
        return "SessionSecrets(<redacted>)"


def key_schedule(
    shared_secret: bytes,
    hello_hash: bytes,
    server_finished_hash: Optional[bytes] = None,
) -> SessionSecrets:
    """
    hello_hash: transcript hash through ServerHello
    server_finished_hash: transcript hash through the server Finished
    """
    zeros = bytes(HASH_SIZE)
    early = hkdf_extract(zeros, zeros)
    handshake = hkdf_extract(derive_secret(early, b"derived", EMPTY_HASH), shared_secret)
    master = hkdf_extract(derive_secret(handshake, b"derived", EMPTY_HASH), zeros)
    c_hs = derive_secret(handshake, b"c hs traffic", hello_hash)
    s_hs = derive_secret(handshake, b"s hs traffic", hello_hash)
    c_ap = s_ap = None
    if server_finished_hash is not None:
        c_ap = derive_secret(master, b"c ap traffic", server_finished_hash)
        s_ap = derive_secret(master, b"s ap traffic", server_finished_hash)
    return SessionSecrets(
        shared_secret=shared_secret,
        early_secret=early,
        handshake_secret=handshake,
        master_secret=master,
        client_handshake_traffic_secret=c_hs,
        server_handshake_traffic_secret=s_hs,
        client_finished_key=hkdf_expand_label(c_hs, b"finished", b"", HASH_SIZE),
        server_finished_key=hkdf_expand_label(s_hs, b"finished", b"", HASH_SIZE),
        client_application_traffic_secret=c_ap,
        server_application_traffic_secret=s_ap,
    )


def traffic_keys(secret: bytes) -> TrafficKeys:
    return TrafficKeys(
        key=hkdf_expand_label(secret, b"key", b"", KEY_SIZE),
        iv=hkdf_expand_label(secret, b"iv", b"", IV_SIZE),
    )


class Transcript:
    """Running SHA-384 over every handshake message, in order."""

    def __init__(self):
        self._hash = hashes.Hash(HASH_ALGORITHM)
        self.size = 0

    def append(self, data: bytes):
        self._hash.update(data)
        self.size += len(data)

    def digest(self) -> bytes:
        return self._hash.copy().finalize()


# certificate messages and their verification


def build_certificate(credential: Credential, kind: CertificateKind, context: bytes = b"") -> Certificate:
    if kind is CertificateKind.VC:
        if not isinstance(credential, VcBundle):
            raise CredentialTypeMismatch(f"{type(credential).__name__} cannot be sent as a VC")
        entries = (CertificateEntry(encode_der(credential.vc)),)
    elif kind is CertificateKind.X509:
        if not isinstance(credential, ChainBundle):
            raise CredentialTypeMismatch(f"{type(credential).__name__} cannot be sent as a certificate chain")
        entries = tuple(CertificateEntry(c.to_bytes()) for c in credential.certificates if not c.self_signed)
    else:
        if not isinstance(credential, RawKeyBundle):
            raise CredentialTypeMismatch(f"{type(credential).__name__} cannot be sent as a raw public key")
        entries = (CertificateEntry(credential.keys.pk),)
    return Certificate(entries=entries, certificate_request_context=context)


def identity_objects(cert: Certificate, kind: CertificateKind) -> tuple[int, int]:
    """(public keys, signatures) carried by a Certificate message."""
    n = len(cert.entries)
    if kind is CertificateKind.X509:
        return n, n
    if kind is CertificateKind.VC:
        return 0, n
    return n, 0


def certificate_verify_input(transcript_hash: bytes, role: Role) -> bytes:
    context = CV_CONTEXT_SERVER if role is Role.SERVER else CV_CONTEXT_CLIENT
    return b" " * 64 + context + b"\x00" + transcript_hash


def build_certificate_verify(keys: IdentityKeyPair, transcript_hash: bytes, role: Role) -> CertificateVerify:
    return CertificateVerify(
        algorithm=SIG_ED25519,
        signature=keys.sign(certificate_verify_input(transcript_hash, role)),
    )


def verify_certificate_verify(public_key: bytes, cv: CertificateVerify, transcript_hash: bytes, role: Role):
    if cv.algorithm != SIG_ED25519:
        raise HandshakeFailure(f"unsupported signature algorithm {cv.algorithm:#06x}")
    if not verify_signature(public_key, cv.signature, certificate_verify_input(transcript_hash, role)):
        raise DecryptError(f"{role.value} CertificateVerify does not verify")


def finished_mac(finished_key: bytes, transcript_hash: bytes) -> bytes:
    h = hmac.HMAC(finished_key, HASH_ALGORITHM)
    h.update(transcript_hash)
    return h.finalize()


def verify_finished(finished_key: bytes, transcript_hash: bytes, verify_data: bytes):
    h = hmac.HMAC(finished_key, HASH_ALGORITHM)
    h.update(transcript_hash)
    try:
        h.verify(verify_data)
    except InvalidSignature as e:
        raise DecryptError("Finished MAC mismatch") from e


async def authenticate_peer_vc(
    cert: Certificate,
    shared_methods: Sequence[int],
    method_table: DidMethodTable,
    trusted_issuers: Mapping[Did, bytes],
    resolver: DidResolver,
    now: datetime,
) -> bytes:
    """
    Returns the key the peer's CertificateVerify must verify under: the one
    in the DID Document of the credential subject.
    """
    if len(cert.entries) != 1:
        raise BadCertificate(f"VC Certificate carries {len(cert.entries)} entries")
    try:
        vc = decode_der(cert.entries[0].cert_data, VerifiableCredential)
    except IdentityError as e:
        raise BadCertificate(f"undecodable credential: {e}") from e

    try:
        issuer_pk = trusted_issuers.get(vc.issuer)
        if issuer_pk is None:
            issuer_pk = (await resolver.resolve(vc.issuer)).public_key
        subject = verify_vc(vc, issuer_pk, now)

        code = method_table.code(subject.method_name)
        if code is None or code not in shared_methods:
            raise HandshakeFailure(f"{subject} uses a DID method outside the shared list")

        return (await resolver.resolve(subject)).public_key
    except IdentityError as e:
        raise BadCertificate(f"credential rejected: {type(e).__name__}: {e}") from e
    except RegistryUnavailable as e:
        raise HandshakeFailure(f"resolver unavailable: {e}") from e
    except RegistryError as e:
        raise BadCertificate(f"resolution failed: {type(e).__name__}: {e}") from e


def authenticate_peer_x509(cert: Certificate, trust_anchors: Sequence[ChainCertificate], now: datetime) -> bytes:
    try:
        chain = [ChainCertificate.from_bytes(entry.cert_data) for entry in cert.entries]
        return verify_chain(chain, trust_anchors, now)
    except IdentityError as e:
        raise BadCertificate(f"certificate chain rejected: {type(e).__name__}: {e}") from e


def authenticate_peer_rpk(cert: Certificate, trusted_raw_keys: Iterable[bytes]) -> bytes:
    if len(cert.entries) != 1 or len(cert.entries[0].cert_data) != PUBLIC_KEY_BYTES:
        raise BadCertificate("raw public key Certificate must carry one 32-byte key")
    pk = cert.entries[0].cert_data
    if pk not in set(trusted_raw_keys):
        raise BadCertificate("raw public key is not trusted")
    return pk


# negotiation


@dataclass(frozen=True)
class NegotiationOutcome:
    client_cert_type: Optional[int]
    server_cert_type: int
    shared_did_methods: tuple[int, ...] = ()
    fallback: bool = False


_BUNDLE_TYPES = {
    CertificateKind.VC: VcBundle,
    CertificateKind.X509: ChainBundle,
    CertificateKind.RAW_PUBLIC_KEY: RawKeyBundle,
}


@dataclass(frozen=True)
class EndpointConfig:
    """
    client_cert_types: on a client, what it can present; on a server, what it accepts.
    server_cert_types: on a client, what it accepts; on a server, what it can present.
    Both are in preference order.
    """
    role: Role
    credentials: Mapping[CertificateKind, Credential] = field(default_factory=dict)
    client_cert_types: tuple[CertificateKind, ...] = ()
    server_cert_types: tuple[CertificateKind, ...] = (CertificateKind.X509,)
    did_methods: tuple[int, ...] = ()
    method_table: DidMethodTable = DEFAULT_DID_METHODS
    trusted_issuers: Mapping[Did, bytes] = field(default_factory=dict)
    trust_anchors: tuple[ChainCertificate, ...] = ()
    trusted_raw_keys: frozenset[bytes] = frozenset()
    resolver: Optional[DidResolver] = None
    request_client_auth: bool = False
    rfc7250_enabled: bool = True
    codepoints: Codepoints = Codepoints()
    clock: Callable[[], datetime] = utcnow
    random_source: Callable[[int], bytes] = os.urandom

    def __post_init__(self):
        object.__setattr__(self, "client_cert_types", tuple(self.client_cert_types))
        object.__setattr__(self, "server_cert_types", tuple(self.server_cert_types))
        object.__setattr__(self, "did_methods", tuple(self.did_methods))
        object.__setattr__(self, "trust_anchors", tuple(self.trust_anchors))
        object.__setattr__(self, "trusted_raw_keys", frozenset(self.trusted_raw_keys))

        for code in self.did_methods:
            if not self.method_table.knows(code):
                raise ValueError(f"DID method code {code} is not in the method table")

        if self.role is Role.CLIENT:
            presented, accepted = self.client_cert_types, self.server_cert_types
            if self.offers_vc and not self.did_methods:
                raise ValueError("a client offering the VC certificate type must send did_methods")
        else:
            presented, accepted = self.server_cert_types, self.client_cert_types
            if CertificateKind.VC in self.server_cert_types and not self.did_methods:
                raise ValueError("a server presenting a VC needs a did_methods list")
            if self.request_client_auth and CertificateKind.VC in self.client_cert_types and not self.did_methods:
                raise ValueError("a server accepting VC client certificates must send did_methods")

        for kind in presented:
            credential = self.credentials.get(kind)
            if not isinstance(credential, _BUNDLE_TYPES[kind]):
                raise ValueError(f"{kind.value} is offered but no matching credential is configured")
        verifies_peer = self.role is Role.CLIENT or self.request_client_auth
        if verifies_peer and CertificateKind.VC in accepted and self.resolver is None:
            raise ValueError("accepting VC certificates needs a DID resolver")

    @property
    def presented_types(self) -> tuple[CertificateKind, ...]:
        return self.client_cert_types if self.role is Role.CLIENT else self.server_cert_types

    @property
    def accepted_types(self) -> tuple[CertificateKind, ...]:
        return self.server_cert_types if self.role is Role.CLIENT else self.client_cert_types

    @property
    def offers_vc(self) -> bool:
        return CertificateKind.VC in self.client_cert_types or CertificateKind.VC in self.server_cert_types


def _pick(offer: Sequence[int], supported: Sequence[CertificateKind], codepoints: Codepoints) -> Optional[int]:
    for code in offer:
        kind = codepoints.kind_for(code)
        if kind is not None and kind in supported:
            return code
    return None


def negotiate_cert_types(
    client_types: Optional[Sequence[int]],
    server_types: Optional[Sequence[int]],
    config: EndpointConfig,
) -> NegotiationOutcome:
    """
    client_types / server_types: the client's client_certificate_type and
    server_certificate_type lists, None when the extension was absent.
    The client's order wins in both directions.
    """
    if not config.rfc7250_enabled:
        client_types = server_types = None
    x509 = config.codepoints.code_for(CertificateKind.X509)
    fallback = server_types is None and (client_types is None or not config.request_client_auth)

    server_code = _pick(server_types if server_types is not None else (x509,), config.server_cert_types, config.codepoints)
    if server_code is None:
        raise UnsupportedCertificate("no server certificate type in common")

    client_code = None
    if config.request_client_auth:
        client_code = _pick(client_types if client_types is not None else (x509,), config.client_cert_types, config.codepoints)
        if client_code is None:
            raise UnsupportedCertificate("no client certificate type in common")

    return NegotiationOutcome(client_code, server_code, (), fallback)


def negotiate_did_methods(
    client_methods: Optional[Sequence[int]],
    server_methods: Sequence[int],
    vc_for_server: bool = True,
    vc_for_client: bool = False,
) -> tuple[int, ...]:
    """
    Intersection in client order. A client that sent no list gets the
    server's own list, unless the server itself authenticates with a VC.
    """
    if client_methods is None:
        if vc_for_server:
            raise HandshakeFailure("VC server authentication selected but the client sent no did_methods")
        return tuple(server_methods)
    server_set = set(server_methods)
    shared = tuple(m for m in client_methods if m in server_set)
    if not shared and (vc_for_server or vc_for_client):
        raise HandshakeFailure("no DID method in common")
    return shared


def check_own_did_in_shared(did: Did, shared: Sequence[int], method_table: DidMethodTable):
    code = method_table.code(did.method_name)
    if code is None or code not in shared:
        raise HandshakeFailure(f"own DID method {did.method_name!r} is not among the shared methods")


# endpoints


@dataclass
class FlightMetrics:
    bytes_sent: int = 0
    bytes_received: int = 0
    keys_sent: int = 0
    signatures_sent: int = 0
    keys_received: int = 0
    signatures_received: int = 0
    did_resolves: int = 0
    resolve_seconds: float = 0.0
    wall_clock: float = 0.0

    @property
    def objects_sent(self) -> int:
        return self.keys_sent * PUBLIC_KEY_BYTES + self.signatures_sent * SIGNATURE_BYTES

    @property
    def objects_received(self) -> int:
        return self.keys_received * PUBLIC_KEY_BYTES + self.signatures_received * SIGNATURE_BYTES


@dataclass(frozen=True)
class LoggedMessage:
    direction: str
    msg_type: HandshakeType
    extension_types: tuple[int, ...] = ()


class RecordLayer:
    def __init__(self, transport: Transport):
        self.transport = transport
        self.write_keys: Optional[TrafficKeys] = None
        self.read_keys: Optional[TrafficKeys] = None
        self.bytes_sent = 0
        self.bytes_received = 0
        self._handshake_buf = bytearray()

    async def send_record(self, content_type: ContentType, payload: bytes):
        rec = Record(content_type, payload)
        if self.write_keys is None:
            data = encode_plaintext_record(rec)
        else:
            data = seal_record(self.write_keys, rec)
        self.bytes_sent += len(data)
        await self.transport.send(data)

    async def send_fragmented(self, content_type: ContentType, data: bytes):
        for i in range(0, len(data), MAX_RECORD_PAYLOAD):
            await self.send_record(content_type, data[i:i + MAX_RECORD_PAYLOAD])

    async def send_alert(self, description: int):
        await self.send_record(ContentType.ALERT, encode_alert(description))

    async def read_record(self) -> Record:
        header = await self.transport.read_exactly(RECORD_HEADER_SIZE)
        content_type, _, length = parse_record_header(header)
        if length > MAX_CIPHERTEXT:
            raise PayloadTooLarge(f"record declares {length} bytes")
        body = await self.transport.read_exactly(length)
        self.bytes_received += RECORD_HEADER_SIZE + length

        if content_type == ContentType.ALERT:
            raise PeerAlert(decode_alert(body))
        if self.read_keys is None:
            if content_type != ContentType.HANDSHAKE:
                raise DecodeError(f"unexpected plaintext record type {content_type}")
            return Record(ContentType.HANDSHAKE, body)
        if content_type != ContentType.APPLICATION_DATA:
            raise DecodeError(f"plaintext record type {content_type} after keys were installed")
        rec = open_record(self.read_keys, header + body)
        if rec.content_type == ContentType.ALERT:
            raise PeerAlert(decode_alert(rec.payload))
        return rec

    async def read_handshake(self) -> bytes:
        buf = self._handshake_buf
        while True:
            if len(buf) >= 4:
                total = message_length(bytes(buf[:4]))
                if len(buf) >= total:
                    out = bytes(buf[:total])
                    del buf[:total]
                    return out
            rec = await self.read_record()
            if rec.content_type != ContentType.HANDSHAKE or not rec.payload:
                raise DecodeError("expected a handshake record")
            buf += rec.payload


class HandshakeEndpoint:
    role: Role

    def __init__(self, config: EndpointConfig, transport: Transport):
        if config.role is not self.role:
            raise ValueError(f"{self.role.value} endpoint given a {config.role.value} config")
        self.config = config
        self.transport = transport
        self.records = RecordLayer(transport)
        self.transcript = Transcript()
        self.metrics = FlightMetrics()
        self.message_log: list[LoggedMessage] = []
        self.state = State.START
        self.outcome: Optional[NegotiationOutcome] = None
        self.secrets: Optional[SessionSecrets] = None
        self.peer_public_key: Optional[bytes] = None
        self._shared_secret = b""
        self._hello_hash = b""

    async def run(self) -> "HandshakeEndpoint":
        resolver = self.config.resolver
        if resolver is not None:
            resolver.clear_cache()
        resolves_before = resolver.channel.resolve_counter if resolver else 0
        seconds_before = resolver.channel.resolve_seconds if resolver else 0.0
        started = time.perf_counter()
        try:
            await self._handshake()
        except BaseException as e:
            self.state = State.FAILED
            self.secrets = None
            alert = as_alert(e)
            if alert is not None and not isinstance(alert, PeerAlert):
                try:
                    await self.records.send_alert(alert.description)
                except (TransportClosed, WireError):
                    pass
            await self.transport.close()
            if alert is None:
                raise
            log.warning("%s handshake aborted: %s (%s)", self.role.value, alert.alert_name, alert)
            if alert is e:
                raise
            raise alert from e
        finally:
            self.metrics.wall_clock = time.perf_counter() - started
            self.metrics.bytes_sent = self.records.bytes_sent
            self.metrics.bytes_received = self.records.bytes_received
            if resolver is not None:
                self.metrics.did_resolves = resolver.channel.resolve_counter - resolves_before
                self.metrics.resolve_seconds = resolver.channel.resolve_seconds - seconds_before

        assert self.secrets is not None
        if self.role is Role.CLIENT:
            write, read = self.secrets.client_application_traffic_secret, self.secrets.server_application_traffic_secret
        else:
            write, read = self.secrets.server_application_traffic_secret, self.secrets.client_application_traffic_secret
        self.records.write_keys = traffic_keys(write)
        self.records.read_keys = traffic_keys(read)
        self.state = State.CONNECTED
        log.debug("%s handshake complete: %s", self.role.value, self.outcome)
        return self

    async def _handshake(self):
        raise NotImplementedError

    async def send_application_data(self, data: bytes):
        if not data:
            raise ValueError("application data must be non-empty")
        if self.state is not State.CONNECTED:
            raise HandshakeFailure("handshake is not complete")
        try:
            await self.records.send_fragmented(ContentType.APPLICATION_DATA, data)
        except (WireError, TransportClosed) as e:
            raise as_alert(e) from e

    async def receive_application_data(self) -> bytes:
        if self.state is not State.CONNECTED:
            raise HandshakeFailure("handshake is not complete")
        try:
            rec = await self.records.read_record()
        except (WireError, TransportClosed) as e:
            raise as_alert(e) from e
        if rec.content_type != ContentType.APPLICATION_DATA:
            raise DecodeError(f"unexpected {rec.content_type.name} record after the handshake")
        return rec.payload

    async def close(self):
        await self.transport.close()

    async def _send(self, msg: HandshakeMessage):
        data = encode_message(msg)
        self.transcript.append(data)
        self.message_log.append(LoggedMessage("sent", msg.msg_type, _extension_types(msg)))
        await self.records.send_fragmented(ContentType.HANDSHAKE, data)

    async def _receive(self, *expected: type) -> HandshakeMessage:
        data = await self.records.read_handshake()
        msg = decode_message(data)
        if not isinstance(msg, expected):
            raise DecodeError(f"unexpected {msg.msg_type.name} while in {self.state.name}")
        self.transcript.append(data)
        self.message_log.append(LoggedMessage("received", msg.msg_type, _extension_types(msg)))
        return msg

    def _derive_handshake_keys(self, shared_secret: bytes):
        self._shared_secret = shared_secret
        self._hello_hash = self.transcript.digest()
        self.secrets = key_schedule(shared_secret, self._hello_hash)
        client_keys = traffic_keys(self.secrets.client_handshake_traffic_secret)
        server_keys = traffic_keys(self.secrets.server_handshake_traffic_secret)
        if self.role is Role.CLIENT:
            self.records.write_keys, self.records.read_keys = client_keys, server_keys
        else:
            self.records.write_keys, self.records.read_keys = server_keys, client_keys

    def _derive_application_secrets(self):
        self.secrets = key_schedule(self._shared_secret, self._hello_hash, self.transcript.digest())

    async def _send_credential(self, kind: CertificateKind, context: bytes = b""):
        credential = self.config.credentials.get(kind)
        if credential is None:
            raise CertificateRequired(f"no {kind.value} credential to present")
        if kind is CertificateKind.VC:
            assert isinstance(credential, VcBundle)
            assert self.outcome is not None
            check_own_did_in_shared(credential.did, self.outcome.shared_did_methods, self.config.method_table)
        cert = build_certificate(credential, kind, context)
        keys, signatures = identity_objects(cert, kind)
        await self._send(cert)
        await self._send(build_certificate_verify(credential.keys, self.transcript.digest(), self.role))
        self.metrics.keys_sent += keys
        self.metrics.signatures_sent += signatures + 1

    async def _authenticate_peer(self, cert: Certificate, kind: CertificateKind) -> bytes:
        cfg = self.config
        if kind not in cfg.accepted_types:
            raise UnsupportedCertificate(f"peer certificate type {kind.value} was never offered")
        now = cfg.clock()
        if kind is CertificateKind.VC:
            assert self.outcome is not None and cfg.resolver is not None
            pk = await authenticate_peer_vc(
                cert,
                self.outcome.shared_did_methods,
                cfg.method_table,
                cfg.trusted_issuers,
                cfg.resolver,
                now,
            )
        elif kind is CertificateKind.X509:
            pk = authenticate_peer_x509(cert, cfg.trust_anchors, now)
        else:
            pk = authenticate_peer_rpk(cert, cfg.trusted_raw_keys)
        keys, signatures = identity_objects(cert, kind)
        self.metrics.keys_received += keys
        self.metrics.signatures_received += signatures
        return pk

    async def _verify_peer(self, peer_role: Role):
        transcript_hash = self.transcript.digest()
        cv = await self._receive(CertificateVerify)
        assert self.peer_public_key is not None
        verify_certificate_verify(self.peer_public_key, cv, transcript_hash, peer_role)
        self.metrics.signatures_received += 1

    def _ephemeral_key(self) -> X25519PrivateKey:
        return X25519PrivateKey.from_private_bytes(self.config.random_source(32))


def _extension_types(msg: HandshakeMessage) -> tuple[int, ...]:
    return tuple(int(e.extension_type) for e in getattr(msg, "extensions", ()))


def _public_bytes(key: X25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )


def _exchange(key: X25519PrivateKey, peer_share: bytes) -> bytes:
    try:
        return key.exchange(X25519PublicKey.from_public_bytes(peer_share))
    except ValueError as e:
        raise HandshakeFailure(f"bad x25519 key share: {e}") from e


class ClientHandshake(HandshakeEndpoint):
    role = Role.CLIENT

    def _client_hello_extensions(self, share: bytes) -> list:
        cfg = self.config
        cp = cfg.codepoints
        exts = [
            encode_supported_versions_client([TLS_VERSION_1_3]),
            encode_signature_algorithms([SIG_ED25519]),
            encode_key_share_client([(GROUP_X25519, share)]),
        ]
        if cfg.rfc7250_enabled:
            if cfg.client_cert_types:
                exts.append(encode_cert_type_list(
                    ExtensionType.CLIENT_CERTIFICATE_TYPE, [cp.code_for(k) for k in cfg.client_cert_types]
                ))
            if cfg.server_cert_types:
                exts.append(encode_cert_type_list(
                    ExtensionType.SERVER_CERTIFICATE_TYPE, [cp.code_for(k) for k in cfg.server_cert_types]
                ))
            if cfg.offers_vc:
                exts.append(encode_did_methods(cfg.did_methods, cp.did_methods_extension))
        return exts

    def _check_server_hello(self, sh: ServerHello) -> bytes:
        if sh.cipher_suite != TLS_AES_256_GCM_SHA384:
            raise HandshakeFailure(f"server selected cipher suite {sh.cipher_suite:#06x}")
        version = decode_supported_versions_server(find_extension(sh.extensions, ExtensionType.SUPPORTED_VERSIONS))
        if version != TLS_VERSION_1_3:
            raise HandshakeFailure(f"server selected version {version:#06x}")
        group, share = decode_key_share_server(find_extension(sh.extensions, ExtensionType.KEY_SHARE))
        if group != GROUP_X25519:
            raise HandshakeFailure(f"server selected group {group:#06x}")
        return share

    def _process_encrypted_extensions(self, ee: EncryptedExtensions) -> tuple[int, Optional[int], tuple[int, ...], bool]:
        cfg = self.config
        cp = cfg.codepoints
        sct = find_extension(ee.extensions, ExtensionType.SERVER_CERTIFICATE_TYPE)
        cct = find_extension(ee.extensions, ExtensionType.CLIENT_CERTIFICATE_TYPE)
        dm = find_extension(ee.extensions, cp.did_methods_extension)
        if not cfg.rfc7250_enabled and (sct or cct or dm):
            raise HandshakeFailure("server sent certificate-type extensions that were never offered")

        server_code = decode_cert_type_selection(sct) if sct else cp.code_for(CertificateKind.X509)
        if cp.kind_for(server_code) not in cfg.server_cert_types:
            raise UnsupportedCertificate(f"server certificate type {server_code} is not accepted")
        client_code = decode_cert_type_selection(cct) if cct else None
        if client_code is not None and cp.kind_for(client_code) not in cfg.client_cert_types:
            raise UnsupportedCertificate(f"client certificate type {client_code} was never offered")

        shared: tuple[int, ...] = ()
        if dm is not None:
            shared = decode_did_methods(dm)
            if cfg.offers_vc and any(m not in cfg.did_methods for m in shared):
                raise HandshakeFailure("server listed DID methods the client never offered")
        vc_code = cp.code_for(CertificateKind.VC)
        if vc_code in (server_code, client_code) and not shared:
            raise HandshakeFailure("VC selected without shared DID methods")
        return server_code, client_code, shared, sct is None and cct is None

    async def _handshake(self):
        cfg = self.config
        eph = self._ephemeral_key()
        await self._send(ClientHello(
            random=cfg.random_source(32),
            extensions=tuple(self._client_hello_extensions(_public_bytes(eph))),
        ))

        self.state = State.WAIT_SERVER_HELLO
        sh = await self._receive(ServerHello)
        self._derive_handshake_keys(_exchange(eph, self._check_server_hello(sh)))

        self.state = State.WAIT_ENCRYPTED_EXTENSIONS
        ee = await self._receive(EncryptedExtensions)
        server_code, client_selection, shared, fallback = self._process_encrypted_extensions(ee)

        self.state = State.WAIT_CERTIFICATE_OR_REQUEST
        msg = await self._receive(CertificateRequest, Certificate)
        request = None
        client_code = None
        if isinstance(msg, CertificateRequest):
            request = msg
            client_code = client_selection if client_selection is not None else cfg.codepoints.code_for(CertificateKind.X509)
            self.state = State.WAIT_CERTIFICATE
            msg = await self._receive(Certificate)
        elif client_selection is not None:
            raise HandshakeFailure("client certificate type selected without a CertificateRequest")
        self.outcome = NegotiationOutcome(client_code, server_code, shared, fallback)

        server_kind = cfg.codepoints.kind_for(server_code)
        self.peer_public_key = await self._authenticate_peer(msg, server_kind)
        self.state = State.WAIT_CERTIFICATE_VERIFY
        await self._verify_peer(Role.SERVER)

        self.state = State.WAIT_FINISHED
        transcript_hash = self.transcript.digest()
        fin = await self._receive(Finished)
        assert self.secrets is not None
        verify_finished(self.secrets.server_finished_key, transcript_hash, fin.verify_data)
        self._derive_application_secrets()

        if request is not None:
            assert client_code is not None
            client_kind = cfg.codepoints.kind_for(client_code)
            if client_kind is None or client_kind not in cfg.credentials:
                raise CertificateRequired(f"no credential for client certificate type {client_code}")
            await self._send_credential(client_kind, request.certificate_request_context)
        await self._send(Finished(finished_mac(self.secrets.client_finished_key, self.transcript.digest())))


class ServerHandshake(HandshakeEndpoint):
    role = Role.SERVER

    def _check_client_hello(self, ch: ClientHello) -> bytes:
        if TLS_AES_256_GCM_SHA384 not in ch.cipher_suites:
            raise HandshakeFailure("client does not offer TLS_AES_256_GCM_SHA384")
        versions = decode_supported_versions_client(find_extension(ch.extensions, ExtensionType.SUPPORTED_VERSIONS))
        if TLS_VERSION_1_3 not in versions:
            raise HandshakeFailure("client does not offer TLS 1.3")
        algorithms = decode_signature_algorithms(find_extension(ch.extensions, ExtensionType.SIGNATURE_ALGORITHMS))
        if SIG_ED25519 not in algorithms:
            raise HandshakeFailure("client does not accept Ed25519 signatures")
        for group, share in decode_key_share_client(find_extension(ch.extensions, ExtensionType.KEY_SHARE)):
            if group == GROUP_X25519:
                return share
        raise HandshakeFailure("client sent no x25519 key share")

    async def _handshake(self):
        cfg = self.config
        cp = cfg.codepoints

        self.state = State.WAIT_CLIENT_HELLO
        ch = await self._receive(ClientHello)
        client_share = self._check_client_hello(ch)

        client_types = server_types = client_methods = None
        if cfg.rfc7250_enabled:
            ext = find_extension(ch.extensions, ExtensionType.CLIENT_CERTIFICATE_TYPE)
            client_types = decode_cert_type_list(ext) if ext else None
            ext = find_extension(ch.extensions, ExtensionType.SERVER_CERTIFICATE_TYPE)
            server_types = decode_cert_type_list(ext) if ext else None
            ext = find_extension(ch.extensions, cp.did_methods_extension)
            client_methods = decode_did_methods(ext) if ext else None

        outcome = negotiate_cert_types(client_types, server_types, cfg)
        server_kind = cp.kind_for(outcome.server_cert_type)
        client_kind = cp.kind_for(outcome.client_cert_type) if outcome.client_cert_type is not None else None
        if CertificateKind.VC in (server_kind, client_kind):
            shared = negotiate_did_methods(
                client_methods,
                cfg.did_methods,
                vc_for_server=server_kind is CertificateKind.VC,
                vc_for_client=client_kind is CertificateKind.VC,
            )
            outcome = replace(outcome, shared_did_methods=shared)
        self.outcome = outcome
        if server_kind is CertificateKind.VC:
            credential = cfg.credentials[CertificateKind.VC]
            assert isinstance(credential, VcBundle)
            check_own_did_in_shared(credential.did, outcome.shared_did_methods, cfg.method_table)

        eph = self._ephemeral_key()
        await self._send(ServerHello(
            random=cfg.random_source(32),
            extensions=(
                encode_supported_versions_server(TLS_VERSION_1_3),
                encode_key_share_server(GROUP_X25519, _public_bytes(eph)),
            ),
        ))
        self._derive_handshake_keys(_exchange(eph, client_share))

        ee_exts = []
        client_selection = None
        if not outcome.fallback:
            if server_types is not None:
                ee_exts.append(encode_cert_type_selection(ExtensionType.SERVER_CERTIFICATE_TYPE, outcome.server_cert_type))
            if client_types is not None and cfg.request_client_auth:
                client_selection = encode_cert_type_selection(ExtensionType.CLIENT_CERTIFICATE_TYPE, outcome.client_cert_type)
                ee_exts.append(client_selection)
        if outcome.shared_did_methods:
            ee_exts.append(encode_did_methods(outcome.shared_did_methods, cp.did_methods_extension))
        await self._send(EncryptedExtensions(tuple(ee_exts)))

        if cfg.request_client_auth:
            cr_exts = [encode_signature_algorithms([SIG_ED25519])]
            if client_selection is not None:
                cr_exts.append(client_selection)
            await self._send(CertificateRequest(tuple(cr_exts)))

        await self._send_credential(server_kind)
        assert self.secrets is not None
        await self._send(Finished(finished_mac(self.secrets.server_finished_key, self.transcript.digest())))
        client_finished_key = self.secrets.client_finished_key
        self._derive_application_secrets()

        if cfg.request_client_auth:
            assert client_kind is not None
            self.state = State.WAIT_CLIENT_CERTIFICATE
            cert = await self._receive(Certificate)
            self.peer_public_key = await self._authenticate_peer(cert, client_kind)
            self.state = State.WAIT_CLIENT_CERTIFICATE_VERIFY
            await self._verify_peer(Role.CLIENT)

        self.state = State.WAIT_CLIENT_FINISHED
        transcript_hash = self.transcript.digest()
        fin = await self._receive(Finished)
        verify_finished(client_finished_key, transcript_hash, fin.verify_data)


@dataclass
class HandshakeResult:
    client: ClientHandshake
    server: ServerHandshake
    echo: Optional[bytes] = None

    @property
    def outcome(self) -> NegotiationOutcome:
        assert self.server.outcome is not None
        return self.server.outcome

    @property
    def client_secrets(self) -> SessionSecrets:
        assert self.client.secrets is not None
        return self.client.secrets

    @property
    def server_secrets(self) -> SessionSecrets:
        assert self.server.secrets is not None
        return self.server.secrets

    @property
    def client_metrics(self) -> FlightMetrics:
        return self.client.metrics

    @property
    def server_metrics(self) -> FlightMetrics:
        return self.server.metrics


async def run_handshake(
    client_config: EndpointConfig,
    server_config: EndpointConfig,
    transports: Optional[tuple[Transport, Transport]] = None,
    echo: Optional[bytes] = b"ping",
    timeout: Optional[float] = 10.0,
) -> HandshakeResult:
    """
    Runs both endpoints against each other, then an encrypted echo round
    trip. Each endpoint should own its resolver channel so resolve counts
    stay per endpoint.
    """
    if echo is not None and not echo:
        raise ValueError("echo must be non-empty, or None to skip the round trip")
    if transports is None:
        transports = MemoryTransport.pair()
    client = ClientHandshake(client_config, transports[0])
    server = ServerHandshake(server_config, transports[1])
    result = HandshakeResult(client, server)

    async def client_side():
        try:
            await client.run()
            if echo is not None:
                await client.send_application_data(echo)
                result.echo = await client.receive_application_data()
                if result.echo != echo:
                    raise HandshakeFailure("echo came back altered")
        except BaseException:
            await client.close()
            raise

    async def server_side():
        try:
            await server.run()
            if echo is not None:
                await server.send_application_data(await server.receive_application_data())
        except BaseException:
            await server.close()
            raise

    try:
        client_err, server_err = await asyncio.wait_for(
            asyncio.gather(client_side(), server_side(), return_exceptions=True),
            timeout,
        )
    except asyncio.TimeoutError:
        await client.close()
        await server.close()
        raise HandshakeAborted(
            HandshakeFailure("client timed out"),
            HandshakeFailure("server timed out"),
        ) from None

    for err in (client_err, server_err):
        if err is not None and not isinstance(err, HandshakeAlert):
            raise err
    if client_err is not None or server_err is not None:
        raise HandshakeAborted(client_err, server_err)
    return result
