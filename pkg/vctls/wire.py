"""
Handshake message, extension and record-layer codec.

Layouts follow the TLS 1.3 presentation language: big-endian integers,
vectors prefixed with a length field whose width is fixed by the upper
bound of the vector.
"""
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import ClassVar, Iterable, Optional, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

TLS_VERSION_1_2 = 0x0303
TLS_VERSION_1_3 = 0x0304
TLS_AES_256_GCM_SHA384 = 0x1302
GROUP_X25519 = 0x001D
SIG_ED25519 = 0x0807

RANDOM_SIZE = 32
X25519_KEY_SIZE = 32
MAX_RECORD_PAYLOAD = 2**14
MAX_CIPHERTEXT = MAX_RECORD_PAYLOAD + 256
RECORD_HEADER_SIZE = 5
AEAD_TAG_SIZE = 16
MAX_SEQUENCE = 2**64 - 1
ALERT_LEVEL_FATAL = 2

DEFAULT_VC_CERT_TYPE = 240
DEFAULT_DID_METHODS_EXTENSION = 0xFF00


class WireError(Exception):
    pass


class FieldTooLong(WireError):
    pass


class MissingMandatoryExtension(WireError):
    pass


class Truncated(WireError):
    pass


class UnknownMessageType(WireError):
    pass


class VectorBoundViolation(WireError):
    pass


class EmptyList(WireError):
    pass


class OddLength(WireError):
    pass


class LengthMismatch(WireError):
    pass


class DuplicateExtension(WireError):
    pass


class PayloadTooLarge(WireError):
    pass


class SequenceExhausted(WireError):
    pass


class AuthTagMismatch(WireError):
    pass


class HandshakeType(IntEnum):
    CLIENT_HELLO = 1
    SERVER_HELLO = 2
    ENCRYPTED_EXTENSIONS = 8
    CERTIFICATE = 11
    CERTIFICATE_REQUEST = 13
    CERTIFICATE_VERIFY = 15
    FINISHED = 20


class ContentType(IntEnum):
    ALERT = 21
    HANDSHAKE = 22
    APPLICATION_DATA = 23


class ExtensionType(IntEnum):
    SIGNATURE_ALGORITHMS = 13
    CLIENT_CERTIFICATE_TYPE = 19
    SERVER_CERTIFICATE_TYPE = 20
    SUPPORTED_VERSIONS = 43
    KEY_SHARE = 51


class CertificateKind(Enum):
    X509 = "x509"
    RAW_PUBLIC_KEY = "rpk"
    VC = "vc"


@dataclass(frozen=True)
class Codepoints:
    """Code points the registries never assigned; both are overridable."""
    vc_cert_type: int = DEFAULT_VC_CERT_TYPE
    did_methods_extension: int = DEFAULT_DID_METHODS_EXTENSION

    def __post_init__(self):
        if not 0 <= self.vc_cert_type <= 0xFF or self.vc_cert_type in (0, 1, 2, 3):
            raise ValueError(f"VC certificate type must be an unregistered byte value, got {self.vc_cert_type}")
        if not 0 <= self.did_methods_extension <= 0xFFFF:
            raise ValueError(f"did_methods code point out of range: {self.did_methods_extension}")
        if self.did_methods_extension in set(ExtensionType):
            raise ValueError(f"did_methods code point collides with a baseline extension: {self.did_methods_extension}")

    def code_for(self, kind: CertificateKind) -> int:
        if kind is CertificateKind.X509:
            return 0
        if kind is CertificateKind.RAW_PUBLIC_KEY:
            return 2
        return self.vc_cert_type

    def kind_for(self, code: int) -> Optional[CertificateKind]:
        if code == 0:
            return CertificateKind.X509
        if code == 2:
            return CertificateKind.RAW_PUBLIC_KEY
        if code == self.vc_cert_type:
            return CertificateKind.VC
        return None


class DidMethodTable:
    """One-to-one mapping between DID method names and their 16-bit codes."""

    def __init__(self, entries: dict[int, str]):
        names = [n.lower() for n in entries.values()]
        if len(set(names)) != len(names):
            raise ValueError("DID method names must be unique")
        self._by_code = {int(c): n.lower() for c, n in entries.items()}
        self._by_name = {n: c for c, n in self._by_code.items()}

    def code(self, name: str) -> Optional[int]:
        return self._by_name.get(name.lower())

    def name(self, code: int) -> Optional[str]:
        return self._by_code.get(code)

    def knows(self, code: int) -> bool:
        return code in self._by_code

    def names(self) -> list[str]:
        return list(self._by_name)

    def items(self) -> list[tuple[int, str]]:
        return sorted(self._by_code.items())


DEFAULT_DID_METHODS = DidMethodTable({0: "iota", 1: "key", 2: "web", 3: "example"})


class Writer:
    def __init__(self):
        self._buf = bytearray()

    def u8(self, value: int) -> "Writer":
        self._buf += struct.pack("!B", value)
        return self

    def u16(self, value: int) -> "Writer":
        self._buf += struct.pack("!H", value)
        return self

    def u24(self, value: int) -> "Writer":
        self._buf += struct.pack("!I", value)[1:]
        return self

    def u32(self, value: int) -> "Writer":
        self._buf += struct.pack("!I", value)
        return self

    def u64(self, value: int) -> "Writer":
        self._buf += struct.pack("!Q", value)
        return self

    def raw(self, data: bytes) -> "Writer":
        self._buf += data
        return self

    def fixed(self, data: bytes, size: int, name: str) -> "Writer":
        if len(data) > size:
            raise FieldTooLong(f"{name}: {len(data)} bytes, expected {size}")
        if len(data) < size:
            raise VectorBoundViolation(f"{name}: {len(data)} bytes, expected {size}")
        self._buf += data
        return self

    def vector(self, data: bytes, width: int, min_len: int = 0, max_len: Optional[int] = None, name: str = "vector") -> "Writer":
        limit = (1 << (8 * width)) - 1 if max_len is None else max_len
        if len(data) > limit:
            raise FieldTooLong(f"{name}: {len(data)} bytes exceeds {limit}")
        if len(data) < min_len:
            raise VectorBoundViolation(f"{name}: {len(data)} bytes below {min_len}")
        self._buf += len(data).to_bytes(width, "big")
        self._buf += data
        return self

    def getvalue(self) -> bytes:
        return bytes(self._buf)


class Reader:
    def __init__(self, data: bytes):
        self._data = bytes(data)
        self._pos = 0

    def remaining(self) -> int:
        return len(self._data) - self._pos

    def take(self, n: int) -> bytes:
        if self.remaining() < n:
            raise Truncated(f"need {n} bytes, have {self.remaining()}")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("!H", self.take(2))[0]

    def u24(self) -> int:
        return int.from_bytes(self.take(3), "big")

    def u32(self) -> int:
        return struct.unpack("!I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("!Q", self.take(8))[0]

    def vector(self, width: int, min_len: int = 0, max_len: Optional[int] = None, name: str = "vector") -> bytes:
        n = int.from_bytes(self.take(width), "big")
        limit = (1 << (8 * width)) - 1 if max_len is None else max_len
        if n < min_len or n > limit:
            raise VectorBoundViolation(f"{name}: length {n} outside {min_len}..{limit}")
        return self.take(n)

    def expect_end(self, name: str = "body"):
        if self.remaining():
            raise LengthMismatch(f"{name}: {self.remaining()} trailing bytes")


@dataclass(frozen=True)
class Extension:
    extension_type: int
    extension_data: bytes = b""


Extensions = tuple[Extension, ...]


def _write_extensions(w: Writer, extensions: Iterable[Extension], min_len: int = 0):
    inner = Writer()
    seen = set()
    for ext in extensions:
        if ext.extension_type in seen:
            raise DuplicateExtension(f"extension {ext.extension_type} appears twice")
        seen.add(ext.extension_type)
        inner.u16(ext.extension_type)
        inner.vector(ext.extension_data, 2, name=f"extension {ext.extension_type}")
    w.vector(inner.getvalue(), 2, min_len=min_len, name="extensions")


def _read_extensions(r: Reader, min_len: int = 0) -> Extensions:
    inner = Reader(r.vector(2, min_len=min_len, name="extensions"))
    out = []
    seen = set()
    while inner.remaining():
        ext_type = inner.u16()
        if ext_type in seen:
            raise DuplicateExtension(f"extension {ext_type} appears twice")
        seen.add(ext_type)
        out.append(Extension(ext_type, inner.vector(2, name=f"extension {ext_type}")))
    return tuple(out)


def find_extension(extensions: Iterable[Extension], ext_type: int) -> Optional[Extension]:
    for ext in extensions:
        if ext.extension_type == ext_type:
            return ext
    return None


@dataclass(frozen=True)
class ClientHello:
    msg_type: ClassVar[HandshakeType] = HandshakeType.CLIENT_HELLO
    random: bytes
    extensions: Extensions
    legacy_session_id: bytes = b""
    cipher_suites: tuple[int, ...] = (TLS_AES_256_GCM_SHA384,)
    legacy_compression_methods: bytes = b"\x00"
    legacy_version: int = TLS_VERSION_1_2


@dataclass(frozen=True)
class ServerHello:
    msg_type: ClassVar[HandshakeType] = HandshakeType.SERVER_HELLO
    random: bytes
    extensions: Extensions
    legacy_session_id_echo: bytes = b""
    cipher_suite: int = TLS_AES_256_GCM_SHA384
    legacy_compression_method: int = 0
    legacy_version: int = TLS_VERSION_1_2


@dataclass(frozen=True)
class EncryptedExtensions:
    msg_type: ClassVar[HandshakeType] = HandshakeType.ENCRYPTED_EXTENSIONS
    extensions: Extensions = ()


@dataclass(frozen=True)
class CertificateRequest:
    msg_type: ClassVar[HandshakeType] = HandshakeType.CERTIFICATE_REQUEST
    extensions: Extensions
    certificate_request_context: bytes = b""


@dataclass(frozen=True)
class CertificateEntry:
    cert_data: bytes
    extensions: Extensions = ()


@dataclass(frozen=True)
class Certificate:
    msg_type: ClassVar[HandshakeType] = HandshakeType.CERTIFICATE
    entries: tuple[CertificateEntry, ...]
    certificate_request_context: bytes = b""


@dataclass(frozen=True)
class CertificateVerify:
    msg_type: ClassVar[HandshakeType] = HandshakeType.CERTIFICATE_VERIFY
    algorithm: int
    signature: bytes


@dataclass(frozen=True)
class Finished:
    msg_type: ClassVar[HandshakeType] = HandshakeType.FINISHED
    verify_data: bytes


HandshakeMessage = Union[
    ClientHello,
    ServerHello,
    EncryptedExtensions,
    CertificateRequest,
    Certificate,
    CertificateVerify,
    Finished,
]

_MANDATORY = {
    HandshakeType.CLIENT_HELLO: (
        ExtensionType.SUPPORTED_VERSIONS,
        ExtensionType.KEY_SHARE,
        ExtensionType.SIGNATURE_ALGORITHMS,
    ),
    HandshakeType.SERVER_HELLO: (
        ExtensionType.SUPPORTED_VERSIONS,
        ExtensionType.KEY_SHARE,
    ),
}


def _check_mandatory(msg_type: HandshakeType, extensions: Extensions):
    for ext_type in _MANDATORY.get(msg_type, ()):
        if find_extension(extensions, ext_type) is None:
            raise MissingMandatoryExtension(f"{msg_type.name} lacks {ext_type.name}")


def _encode_body(msg: HandshakeMessage) -> bytes:
    w = Writer()
    if isinstance(msg, ClientHello):
        _check_mandatory(msg.msg_type, msg.extensions)
        w.u16(msg.legacy_version)
        w.fixed(msg.random, RANDOM_SIZE, "ClientHello.random")
        w.vector(msg.legacy_session_id, 1, max_len=32, name="legacy_session_id")
        suites = Writer()
        for suite in msg.cipher_suites:
            suites.u16(suite)
        w.vector(suites.getvalue(), 2, min_len=2, max_len=0xFFFE, name="cipher_suites")
        w.vector(msg.legacy_compression_methods, 1, min_len=1, name="legacy_compression_methods")
        _write_extensions(w, msg.extensions, min_len=8)
    elif isinstance(msg, ServerHello):
        _check_mandatory(msg.msg_type, msg.extensions)
        w.u16(msg.legacy_version)
        w.fixed(msg.random, RANDOM_SIZE, "ServerHello.random")
        w.vector(msg.legacy_session_id_echo, 1, max_len=32, name="legacy_session_id_echo")
        w.u16(msg.cipher_suite)
        w.u8(msg.legacy_compression_method)
        _write_extensions(w, msg.extensions, min_len=6)
    elif isinstance(msg, EncryptedExtensions):
        _write_extensions(w, msg.extensions)
    elif isinstance(msg, CertificateRequest):
        w.vector(msg.certificate_request_context, 1, name="certificate_request_context")
        _write_extensions(w, msg.extensions, min_len=2)
    elif isinstance(msg, Certificate):
        if not msg.entries:
            raise VectorBoundViolation("Certificate needs at least one entry")
        w.vector(msg.certificate_request_context, 1, name="certificate_request_context")
        entries = Writer()
        for entry in msg.entries:
            entries.vector(entry.cert_data, 3, min_len=1, name="cert_data")
            _write_extensions(entries, entry.extensions)
        w.vector(entries.getvalue(), 3, name="certificate_list")
    elif isinstance(msg, CertificateVerify):
        w.u16(msg.algorithm)
        w.vector(msg.signature, 2, name="signature")
    elif isinstance(msg, Finished):
        if not msg.verify_data:
            raise VectorBoundViolation("Finished.verify_data is empty")
        w.raw(msg.verify_data)
    else:
        raise UnknownMessageType(f"cannot encode {type(msg).__name__}")
    return w.getvalue()


def encode_message(msg: HandshakeMessage) -> bytes:
    body = _encode_body(msg)
    if len(body) > 0xFFFFFF:
        raise FieldTooLong(f"{msg.msg_type.name} body is {len(body)} bytes")
    return Writer().u8(msg.msg_type).u24(len(body)).raw(body).getvalue()


def _decode_body(msg_type: HandshakeType, r: Reader) -> HandshakeMessage:
    if msg_type is HandshakeType.CLIENT_HELLO:
        version = r.u16()
        random = r.take(RANDOM_SIZE)
        session_id = r.vector(1, max_len=32, name="legacy_session_id")
        suites_raw = r.vector(2, min_len=2, max_len=0xFFFE, name="cipher_suites")
        if len(suites_raw) % 2:
            raise VectorBoundViolation("cipher_suites has odd length")
        suites = tuple(struct.unpack(f"!{len(suites_raw) // 2}H", suites_raw))
        compression = r.vector(1, min_len=1, name="legacy_compression_methods")
        extensions = _read_extensions(r, min_len=8)
        msg = ClientHello(
            random=random,
            extensions=extensions,
            legacy_session_id=session_id,
            cipher_suites=suites,
            legacy_compression_methods=compression,
            legacy_version=version,
        )
    elif msg_type is HandshakeType.SERVER_HELLO:
        version = r.u16()
        random = r.take(RANDOM_SIZE)
        session_id = r.vector(1, max_len=32, name="legacy_session_id_echo")
        suite = r.u16()
        compression = r.u8()
        extensions = _read_extensions(r, min_len=6)
        msg = ServerHello(
            random=random,
            extensions=extensions,
            legacy_session_id_echo=session_id,
            cipher_suite=suite,
            legacy_compression_method=compression,
            legacy_version=version,
        )
    elif msg_type is HandshakeType.ENCRYPTED_EXTENSIONS:
        msg = EncryptedExtensions(_read_extensions(r))
    elif msg_type is HandshakeType.CERTIFICATE_REQUEST:
        context = r.vector(1, name="certificate_request_context")
        msg = CertificateRequest(extensions=_read_extensions(r, min_len=2), certificate_request_context=context)
    elif msg_type is HandshakeType.CERTIFICATE:
        context = r.vector(1, name="certificate_request_context")
        entries_r = Reader(r.vector(3, name="certificate_list"))
        entries = []
        while entries_r.remaining():
            cert_data = entries_r.vector(3, min_len=1, name="cert_data")
            entries.append(CertificateEntry(cert_data, _read_extensions(entries_r)))
        if not entries:
            raise VectorBoundViolation("Certificate needs at least one entry")
        msg = Certificate(entries=tuple(entries), certificate_request_context=context)
    elif msg_type is HandshakeType.CERTIFICATE_VERIFY:
        algorithm = r.u16()
        msg = CertificateVerify(algorithm=algorithm, signature=r.vector(2, name="signature"))
    else:
        data = r.take(r.remaining())
        if not data:
            raise VectorBoundViolation("Finished.verify_data is empty")
        msg = Finished(data)
    r.expect_end(msg_type.name)
    if msg_type in _MANDATORY:
        _check_mandatory(msg_type, msg.extensions)
    return msg


def decode_message(data: bytes) -> HandshakeMessage:
    r = Reader(data)
    raw_type = r.u8()
    length = r.u24()
    try:
        msg_type = HandshakeType(raw_type)
    except ValueError:
        raise UnknownMessageType(f"handshake type {raw_type}") from None
    body = r.take(length)
    r.expect_end("handshake message")
    return _decode_body(msg_type, Reader(body))


def message_length(header: bytes) -> int:
    """Total encoded size of the message whose 4-byte header is given."""
    if len(header) < 4:
        raise Truncated("handshake header needs 4 bytes")
    return 4 + int.from_bytes(header[1:4], "big")


# extension bodies


def encode_supported_versions_client(versions: Iterable[int]) -> Extension:
    w = Writer()
    for v in versions:
        w.u16(v)
    return Extension(ExtensionType.SUPPORTED_VERSIONS, Writer().vector(w.getvalue(), 1, min_len=2, max_len=254).getvalue())


def decode_supported_versions_client(ext: Extension) -> tuple[int, ...]:
    r = Reader(ext.extension_data)
    raw = r.vector(1, min_len=2, max_len=254, name="supported_versions")
    r.expect_end("supported_versions")
    if len(raw) % 2:
        raise OddLength("supported_versions has odd length")
    return tuple(struct.unpack(f"!{len(raw) // 2}H", raw))


def encode_supported_versions_server(version: int) -> Extension:
    return Extension(ExtensionType.SUPPORTED_VERSIONS, struct.pack("!H", version))


def decode_supported_versions_server(ext: Extension) -> int:
    r = Reader(ext.extension_data)
    version = r.u16()
    r.expect_end("supported_versions")
    return version


def encode_signature_algorithms(algorithms: Iterable[int]) -> Extension:
    w = Writer()
    for alg in algorithms:
        w.u16(alg)
    return Extension(ExtensionType.SIGNATURE_ALGORITHMS, Writer().vector(w.getvalue(), 2, min_len=2, max_len=0xFFFE).getvalue())


def decode_signature_algorithms(ext: Extension) -> tuple[int, ...]:
    r = Reader(ext.extension_data)
    raw = r.vector(2, min_len=2, max_len=0xFFFE, name="signature_algorithms")
    r.expect_end("signature_algorithms")
    if len(raw) % 2:
        raise OddLength("signature_algorithms has odd length")
    return tuple(struct.unpack(f"!{len(raw) // 2}H", raw))


def _write_key_share_entry(w: Writer, group: int, key: bytes):
    w.u16(group)
    w.vector(key, 2, min_len=1, name="key_exchange")


def encode_key_share_client(shares: Iterable[tuple[int, bytes]]) -> Extension:
    inner = Writer()
    for group, key in shares:
        _write_key_share_entry(inner, group, key)
    return Extension(ExtensionType.KEY_SHARE, Writer().vector(inner.getvalue(), 2).getvalue())


def decode_key_share_client(ext: Extension) -> tuple[tuple[int, bytes], ...]:
    r = Reader(ext.extension_data)
    inner = Reader(r.vector(2, name="client_shares"))
    r.expect_end("key_share")
    out = []
    while inner.remaining():
        group = inner.u16()
        out.append((group, inner.vector(2, min_len=1, name="key_exchange")))
    return tuple(out)


def encode_key_share_server(group: int, key: bytes) -> Extension:
    w = Writer()
    _write_key_share_entry(w, group, key)
    return Extension(ExtensionType.KEY_SHARE, w.getvalue())


def decode_key_share_server(ext: Extension) -> tuple[int, bytes]:
    r = Reader(ext.extension_data)
    group = r.u16()
    key = r.vector(2, min_len=1, name="key_exchange")
    r.expect_end("key_share")
    return group, key


def encode_cert_type_list(ext_type: ExtensionType, codes: Iterable[int]) -> Extension:
    """ClientHello form: certificate_types<1..2^8-1>."""
    data = bytes(codes)
    return Extension(ext_type, Writer().vector(data, 1, min_len=1, name=ext_type.name).getvalue())


def decode_cert_type_list(ext: Extension) -> tuple[int, ...]:
    r = Reader(ext.extension_data)
    data = r.vector(1, min_len=1, name="certificate_types")
    r.expect_end("certificate_types")
    return tuple(data)


def encode_cert_type_selection(ext_type: ExtensionType, code: int) -> Extension:
    """EncryptedExtensions form: a single selected type."""
    return Extension(ext_type, bytes([code]))


def decode_cert_type_selection(ext: Extension) -> int:
    r = Reader(ext.extension_data)
    code = r.u8()
    r.expect_end("certificate_type")
    return code


def encode_did_methods(methods: Iterable[int], ext_type: int = DEFAULT_DID_METHODS_EXTENSION) -> Extension:
    methods = tuple(methods)
    if not methods:
        raise EmptyList("did_methods needs at least one method")
    if len(methods) > 32767:
        raise FieldTooLong(f"did_methods carries {len(methods)} methods")
    w = Writer()
    for code in methods:
        if not 0 <= code <= 0xFFFF:
            raise FieldTooLong(f"DID method code {code} does not fit 16 bits")
        w.u16(code)
    body = w.getvalue()
    return Extension(ext_type, Writer().u16(len(body)).raw(body).getvalue())


def decode_did_methods(ext: Extension) -> tuple[int, ...]:
    data = ext.extension_data
    if len(data) < 2:
        raise Truncated("did_methods needs a 2-byte length")
    declared = struct.unpack("!H", data[:2])[0]
    if declared % 2:
        raise OddLength(f"did_methods length {declared} is odd")
    if declared == 0:
        raise EmptyList("did_methods is empty")
    if declared != len(data) - 2:
        raise LengthMismatch(f"did_methods declares {declared} bytes, carries {len(data) - 2}")
    out: list[int] = []
    for (code,) in struct.iter_unpack("!H", data[2:]):
        if code not in out:
            out.append(code)
    return tuple(out)


# record layer


@dataclass(frozen=True)
class Record:
    content_type: ContentType
    payload: bytes


@dataclass
class TrafficKeys:
    key: bytes
    iv: bytes
    sequence: int = 0

    def nonce(self) -> bytes:
        seq = self.sequence.to_bytes(len(self.iv), "big")
        return bytes(a ^ b for a, b in zip(self.iv, seq))


def encode_plaintext_record(rec: Record) -> bytes:
    if len(rec.payload) > MAX_RECORD_PAYLOAD:
        raise PayloadTooLarge(f"record payload is {len(rec.payload)} bytes")
    return Writer().u8(rec.content_type).u16(TLS_VERSION_1_2).vector(rec.payload, 2).getvalue()


def parse_record_header(header: bytes) -> tuple[int, int, int]:
    """Returns (content_type, legacy_version, length)."""
    if len(header) < RECORD_HEADER_SIZE:
        raise Truncated("record header needs 5 bytes")
    return struct.unpack("!BHH", header[:RECORD_HEADER_SIZE])


def seal_record(keys: TrafficKeys, rec: Record) -> bytes:
    if len(rec.payload) > MAX_RECORD_PAYLOAD:
        raise PayloadTooLarge(f"record payload is {len(rec.payload)} bytes")
    if keys.sequence >= MAX_SEQUENCE:
        raise SequenceExhausted("record sequence number space exhausted")
    inner = rec.payload + bytes([rec.content_type])
    header = struct.pack("!BHH", ContentType.APPLICATION_DATA, TLS_VERSION_1_2, len(inner) + AEAD_TAG_SIZE)
    ciphertext = AESGCM(keys.key).encrypt(keys.nonce(), inner, header)
    keys.sequence += 1
    return header + ciphertext


def open_record(keys: TrafficKeys, data: bytes) -> Record:
    if len(data) < RECORD_HEADER_SIZE + AEAD_TAG_SIZE:
        raise Truncated(f"sealed record is {len(data)} bytes")
    if len(data) - RECORD_HEADER_SIZE > MAX_CIPHERTEXT:
        raise PayloadTooLarge(f"sealed record is {len(data)} bytes")
    header = data[:RECORD_HEADER_SIZE]
    try:
        inner = AESGCM(keys.key).decrypt(keys.nonce(), data[RECORD_HEADER_SIZE:], header)
    except InvalidTag as e:
        raise AuthTagMismatch("record failed authentication") from e
    keys.sequence += 1
    content = inner.rstrip(b"\x00")
    if not content:
        raise AuthTagMismatch("record carries no content type")
    try:
        content_type = ContentType(content[-1])
    except ValueError:
        raise AuthTagMismatch(f"unknown inner content type {content[-1]}") from None
    return Record(content_type, content[:-1])


def encode_alert(description: int) -> bytes:
    return bytes([ALERT_LEVEL_FATAL, description])


def decode_alert(payload: bytes) -> int:
    if len(payload) != 2:
        raise LengthMismatch(f"alert is {len(payload)} bytes")
    return payload[1]
