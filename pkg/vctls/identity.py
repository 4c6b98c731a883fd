"""
Self-sovereign identity material: keys, DIDs, DID Documents, credentials,
and the small certificate chain used for X.509-type authentication.
"""
import base64
import binascii
import hashlib
import json
import os
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Optional, Sequence, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .wire import DEFAULT_DID_METHODS, DidMethodTable, Reader, Writer, WireError

VC_CONTEXT = "https://www.w3.org/2018/credentials/v1"
VC_TYPES = ("VerifiableCredential", "IoTCredential")
KEY_TYPE = "Ed25519VerificationKey2018"
PROOF_TYPE = "DataIntegrityProof"
CRYPTOSUITE = "eddsa-sorted-json"
PROOF_PURPOSE = "assertionMethod"
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"

PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
SEED_SIZE = 32

LABEL_VC = "VC"
LABEL_DID_DOCUMENT = "DID DOCUMENT"
LABEL_CHAIN_CERTIFICATE = "CHAIN CERTIFICATE"


class IdentityError(Exception):
    pass


class UnknownMethod(IdentityError):
    pass


class SchemaViolation(IdentityError):
    pass


class Expired(IdentityError):
    pass


class NotYetValid(IdentityError):
    pass


class BadIssuerSignature(IdentityError):
    pass


class InvalidValidityWindow(IdentityError):
    pass


class BadArmor(IdentityError):
    pass


class LabelMismatch(IdentityError):
    pass


class Truncated(IdentityError):
    pass


class BrokenChain(IdentityError):
    pass


class UntrustedRoot(IdentityError):
    pass


def utcnow() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


def format_timestamp(ts: datetime) -> str:
    if ts.tzinfo is None:
        raise SchemaViolation("timestamps must be timezone-aware")
    return ts.astimezone(timezone.utc).strftime(TIMESTAMP_FORMAT)


def parse_timestamp(value) -> datetime:
    try:
        ts = datetime.strptime(value, TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc)
    except (TypeError, ValueError) as e:
        raise SchemaViolation(f"bad timestamp {value!r}") from e
    # strptime matches the T and Z literals case-insensitively
    if format_timestamp(ts) != value:
        raise SchemaViolation(f"timestamp {value!r} is not in canonical form")
    return ts


def parse_hex(value, what: str) -> bytes:
    """Lower-case hex only, so every value has exactly one text form."""
    try:
        raw = bytes.fromhex(value)
    except (TypeError, ValueError) as e:
        raise SchemaViolation(f"{what} is not hex") from e
    if raw.hex() != value:
        raise SchemaViolation(f"{what} is not lower-case hex")
    return raw


def serialize(obj: dict) -> bytes:
    """Sorted keys at every level, no insignificant whitespace, UTF-8."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def verify_signature(public_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class IdentityKeyPair:
    seed: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.seed) != SEED_SIZE:
            raise ValueError(f"Ed25519 seed must be {SEED_SIZE} bytes")

    @classmethod
    def generate(cls, seed: Optional[bytes] = None) -> "IdentityKeyPair":
        """Fresh entropy, or a key derived deterministically from `seed`."""
        if seed is None:
            return cls(os.urandom(SEED_SIZE))
        return cls(hashlib.sha256(seed).digest())

    @property
    def sk(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.seed)

    @property
    def pk(self) -> bytes:
        return self.sk.public_key().public_bytes(
            encoding=serialization.Encoding.Raw,
            format=serialization.PublicFormat.Raw,
        )

    def sign(self, data: bytes) -> bytes:
        return self.sk.sign(data)

    def to_hex(self) -> str:
        return self.seed.hex()

    @classmethod
    def from_hex(cls, text: str) -> "IdentityKeyPair":
        try:
            seed = bytes.fromhex(text.strip())
        except ValueError as e:
            raise SchemaViolation("key file is not hex") from e
        if len(seed) != SEED_SIZE:
            raise SchemaViolation(f"key file holds {len(seed)} bytes, expected {SEED_SIZE}")
        return cls(seed)


@dataclass(frozen=True)
class Did:
    method_name: str
    method_specific_id: str

    def __post_init__(self):
        if not self.method_name or not self.method_specific_id:
            raise SchemaViolation("DID components must be non-empty")
        if self.method_name != self.method_name.lower() or ":" in self.method_name:
            raise SchemaViolation(f"bad DID method name {self.method_name!r}")

    def __str__(self) -> str:
        return f"did:{self.method_name}:{self.method_specific_id}"

    @classmethod
    def parse(cls, text) -> "Did":
        if not isinstance(text, str):
            raise SchemaViolation(f"DID must be a string, got {type(text).__name__}")
        parts = text.split(":", 2)
        if len(parts) != 3 or parts[0] != "did":
            raise SchemaViolation(f"malformed DID {text!r}")
        return cls(parts[1], parts[2])


@dataclass(frozen=True)
class DidDocument:
    id: Did
    public_key: bytes
    key_type: str = KEY_TYPE

    def __post_init__(self):
        if len(self.public_key) != PUBLIC_KEY_SIZE:
            raise SchemaViolation(f"public key must be {PUBLIC_KEY_SIZE} bytes")
        if self.key_type != KEY_TYPE:
            raise SchemaViolation(f"unsupported verification key type {self.key_type!r}")

    @property
    def controller(self) -> Did:
        return self.id

    @property
    def verification_method_id(self) -> str:
        return f"{self.id}#keys-1"

    def to_dict(self) -> dict:
        return {
            "id": str(self.id),
            "authentication": [
                {
                    "id": self.verification_method_id,
                    "type": self.key_type,
                    "controller": str(self.controller),
                    "publicKeyHex": self.public_key.hex(),
                }
            ],
        }

    @classmethod
    def from_dict(cls, data) -> "DidDocument":
        try:
            did = Did.parse(data["id"])
            methods = data["authentication"]
            if not isinstance(methods, list) or len(methods) != 1:
                raise SchemaViolation("DID Document needs exactly one verification method")
            method = methods[0]
            if method["controller"] != str(did):
                raise SchemaViolation("controller differs from the DID")
            if method["id"] != f"{did}#keys-1":
                raise SchemaViolation("verification method id does not extend the DID")
            public_key = parse_hex(method["publicKeyHex"], "publicKeyHex")
            key_type = method["type"]
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaViolation(f"malformed DID Document: {e}") from e
        if set(data) != {"id", "authentication"}:
            raise SchemaViolation("unexpected DID Document fields")
        return cls(id=did, public_key=public_key, key_type=key_type)


@dataclass(frozen=True)
class Proof:
    verification_method: str
    proof_value: bytes
    created: datetime
    type: str = PROOF_TYPE
    cryptosuite: str = CRYPTOSUITE
    proof_purpose: str = PROOF_PURPOSE

    def to_dict(self) -> dict:
        return {
            "type": self.type,
            "cryptosuite": self.cryptosuite,
            "created": format_timestamp(self.created),
            "proofPurpose": self.proof_purpose,
            "verificationMethod": self.verification_method,
            "proofValue": self.proof_value.hex(),
        }

    @classmethod
    def from_dict(cls, data) -> "Proof":
        try:
            return cls(
                verification_method=data["verificationMethod"],
                proof_value=parse_hex(data["proofValue"], "proofValue"),
                created=parse_timestamp(data["created"]),
                type=data["type"],
                cryptosuite=data["cryptosuite"],
                proof_purpose=data["proofPurpose"],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaViolation(f"malformed proof: {e}") from e


@dataclass(frozen=True)
class VerifiableCredential:
    id: str
    issuer: Did
    issuance_date: datetime
    expiration_date: datetime
    credential_subject: dict
    context: tuple[str, ...] = (VC_CONTEXT,)
    type: tuple[str, ...] = VC_TYPES
    proof: Optional[Proof] = None

    @property
    def subject(self) -> Did:
        return Did.parse(self.credential_subject.get("id"))

    def without_proof(self) -> "VerifiableCredential":
        return VerifiableCredential(
            id=self.id,
            issuer=self.issuer,
            issuance_date=self.issuance_date,
            expiration_date=self.expiration_date,
            credential_subject=self.credential_subject,
            context=self.context,
            type=self.type,
        )

    def to_dict(self, include_proof: bool = True) -> dict:
        out = {
            "@context": list(self.context),
            "id": self.id,
            "type": list(self.type),
            "issuer": str(self.issuer),
            "issuanceDate": format_timestamp(self.issuance_date),
            "expirationDate": format_timestamp(self.expiration_date),
            "credentialSubject": self.credential_subject,
        }
        if include_proof and self.proof is not None:
            out["proof"] = self.proof.to_dict()
        return out

    @classmethod
    def from_dict(cls, data) -> "VerifiableCredential":
        try:
            subject = data["credentialSubject"]
            if not isinstance(subject, dict):
                raise SchemaViolation("credentialSubject must be an object")
            vc = cls(
                id=data["id"],
                issuer=Did.parse(data["issuer"]),
                issuance_date=parse_timestamp(data["issuanceDate"]),
                expiration_date=parse_timestamp(data["expirationDate"]),
                credential_subject=subject,
                context=tuple(data["@context"]),
                type=tuple(data["type"]),
                proof=Proof.from_dict(data["proof"]) if "proof" in data else None,
            )
        except (KeyError, TypeError) as e:
            raise SchemaViolation(f"malformed credential: {e}") from e
        check_vc_schema(vc)
        return vc


def check_vc_schema(vc: VerifiableCredential):
    if not vc.context or vc.context[0] != VC_CONTEXT:
        raise SchemaViolation("credential context must start with the VC v1 context")
    if "VerifiableCredential" not in vc.type:
        raise SchemaViolation("credential type lacks VerifiableCredential")
    if not isinstance(vc.id, str) or not vc.id:
        raise SchemaViolation("credential id must be a non-empty string")
    if vc.issuance_date >= vc.expiration_date:
        raise SchemaViolation("issuanceDate must precede expirationDate")
    vc.subject
    if vc.proof is not None:
        check_proof(vc, vc.proof)


def check_proof(vc: VerifiableCredential, proof: Proof):
    # the signature covers only the proof-less body, so every proof field is pinned to it
    if (proof.type, proof.cryptosuite, proof.proof_purpose) != (PROOF_TYPE, CRYPTOSUITE, PROOF_PURPOSE):
        raise SchemaViolation(f"unsupported proof {proof.type}/{proof.cryptosuite}/{proof.proof_purpose}")
    if proof.verification_method != f"{vc.issuer}#keys-1":
        raise SchemaViolation("proof verification method is not the issuer's key")
    if proof.created != vc.issuance_date:
        raise SchemaViolation("proof created time differs from issuanceDate")


def canonical_bytes(doc: Union[VerifiableCredential, DidDocument]) -> bytes:
    if isinstance(doc, VerifiableCredential):
        return serialize(doc.to_dict(include_proof=False))
    return serialize(doc.to_dict())



def generate_identity(
    method_name: str,
    seed: Optional[bytes] = None,
    methods: DidMethodTable = DEFAULT_DID_METHODS,
) -> tuple[IdentityKeyPair, Did, DidDocument]:
    if methods.code(method_name) is None:
        raise UnknownMethod(f"DID method {method_name!r} is not in the method table")
    keys = IdentityKeyPair.generate(seed)
    did = Did(method_name.lower(), hashlib.sha256(keys.pk).hexdigest())
    return keys, did, DidDocument(id=did, public_key=keys.pk)


def issue_vc(
    issuer_keys: IdentityKeyPair,
    issuer: Did,
    subject: Did,
    claims: dict,
    not_before: datetime,
    not_after: datetime,
    credential_id: Optional[str] = None,
) -> VerifiableCredential:
    not_before = not_before.replace(microsecond=0)
    not_after = not_after.replace(microsecond=0)
    if not_before >= not_after:
        raise InvalidValidityWindow(f"validity {not_before} .. {not_after} is empty")
    unsigned = VerifiableCredential(
        id=credential_id or f"urn:uuid:{uuid.uuid4()}",
        issuer=issuer,
        issuance_date=not_before,
        expiration_date=not_after,
        credential_subject={**claims, "id": str(subject)},
    )
    check_vc_schema(unsigned)
    proof = Proof(
        verification_method=f"{issuer}#keys-1",
        proof_value=issuer_keys.sign(canonical_bytes(unsigned)),
        created=unsigned.issuance_date,
    )
    return replace(unsigned, proof=proof)


def verify_vc(vc: VerifiableCredential, issuer_pk: bytes, now: datetime) -> Did:
    check_vc_schema(vc)
    if vc.proof is None:
        raise SchemaViolation("credential carries no proof")
    if len(vc.proof.proof_value) != SIGNATURE_SIZE:
        raise SchemaViolation("proof value must be a 64-byte signature")
    if now < vc.issuance_date:
        raise NotYetValid(f"credential valid from {format_timestamp(vc.issuance_date)}")
    if now > vc.expiration_date:
        raise Expired(f"credential expired at {format_timestamp(vc.expiration_date)}")
    if not verify_signature(issuer_pk, vc.proof.proof_value, canonical_bytes(vc)):
        raise BadIssuerSignature(f"issuer signature on {vc.id} does not verify")
    return vc.subject


# chain certificates


@dataclass(frozen=True)
class ChainCertificate:
    subject: str
    subject_pk: bytes
    issuer: str
    not_before: datetime
    not_after: datetime
    signature: bytes = b""

    @property
    def self_signed(self) -> bool:
        return self.subject == self.issuer

    def tbs_bytes(self) -> bytes:
        w = Writer()
        w.vector(self.subject.encode("utf-8"), 1, min_len=1, name="subject")
        w.vector(self.issuer.encode("utf-8"), 1, min_len=1, name="issuer")
        w.fixed(self.subject_pk, PUBLIC_KEY_SIZE, "subject_pk")
        w.u64(int(self.not_before.timestamp()))
        w.u64(int(self.not_after.timestamp()))
        return w.getvalue()

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "ChainCertificate":
        r = Reader(data)
        try:
            subject = r.vector(1, min_len=1, name="subject").decode("utf-8")
            issuer = r.vector(1, min_len=1, name="issuer").decode("utf-8")
            subject_pk = r.take(PUBLIC_KEY_SIZE)
            not_before = datetime.fromtimestamp(r.u64(), timezone.utc)
            not_after = datetime.fromtimestamp(r.u64(), timezone.utc)
            signature = r.take(SIGNATURE_SIZE)
            r.expect_end("chain certificate")
        except WireError as e:
            raise Truncated(f"chain certificate: {e}") from e
        except (UnicodeDecodeError, ValueError, OverflowError) as e:
            raise SchemaViolation(f"chain certificate: {e}") from e
        return cls(subject, subject_pk, issuer, not_before, not_after, signature)


def sign_certificate(cert: ChainCertificate, issuer_keys: IdentityKeyPair) -> ChainCertificate:
    return ChainCertificate(
        subject=cert.subject,
        subject_pk=cert.subject_pk,
        issuer=cert.issuer,
        not_before=cert.not_before,
        not_after=cert.not_after,
        signature=issuer_keys.sign(cert.tbs_bytes()),
    )


@dataclass(frozen=True)
class VcBundle:
    keys: IdentityKeyPair
    document: DidDocument
    vc: VerifiableCredential

    @property
    def did(self) -> Did:
        return self.vc.subject


@dataclass(frozen=True)
class ChainBundle:
    """Certificates ordered leaf first, root last."""
    keys: IdentityKeyPair
    certificates: tuple[ChainCertificate, ...]

    @property
    def leaf(self) -> ChainCertificate:
        return self.certificates[0]

    @property
    def root(self) -> ChainCertificate:
        return self.certificates[-1]


@dataclass(frozen=True)
class RawKeyBundle:
    keys: IdentityKeyPair


Credential = Union[VcBundle, ChainBundle, RawKeyBundle]


def make_chain(
    names: Sequence[str],
    not_before: datetime,
    not_after: datetime,
    root_keys: Optional[IdentityKeyPair] = None,
    seed: Optional[bytes] = None,
) -> ChainBundle:
    """
    names: (root, intermediate, leaf)
    """
    if len(names) != 3:
        raise ValueError("chains have exactly three links")
    if not_before >= not_after:
        raise InvalidValidityWindow("chain validity window is empty")
    not_before = not_before.replace(microsecond=0)
    not_after = not_after.replace(microsecond=0)
    keys = [
        root_keys or IdentityKeyPair.generate(None if seed is None else seed + b"/root"),
        IdentityKeyPair.generate(None if seed is None else seed + b"/intermediate"),
        IdentityKeyPair.generate(None if seed is None else seed + b"/leaf"),
    ]
    certs = []
    for i, name in enumerate(names):
        issuer_index = max(0, i - 1)
        cert = ChainCertificate(
            subject=name,
            subject_pk=keys[i].pk,
            issuer=names[issuer_index],
            not_before=not_before,
            not_after=not_after,
        )
        certs.append(sign_certificate(cert, keys[issuer_index]))
    return ChainBundle(keys=keys[2], certificates=tuple(reversed(certs)))


def _check_window(cert: ChainCertificate, now: datetime):
    if now < cert.not_before or now > cert.not_after:
        raise Expired(f"certificate {cert.subject!r} is outside its validity window")


def verify_chain(chain: Sequence[ChainCertificate], anchors: Sequence[ChainCertificate], now: datetime) -> bytes:
    """
    chain is leaf first and may omit the root. Returns the leaf public key.
    """
    if not chain:
        raise BrokenChain("empty chain")
    for cert in chain:
        _check_window(cert, now)
    for child, parent in zip(chain, chain[1:]):
        if child.issuer != parent.subject or not verify_signature(parent.subject_pk, child.signature, child.tbs_bytes()):
            raise BrokenChain(f"{child.subject!r} is not signed by {parent.subject!r}")

    top = chain[-1]
    for anchor in anchors:
        if not anchor.self_signed:
            continue
        if top.self_signed:
            if anchor.subject != top.subject or anchor.subject_pk != top.subject_pk:
                continue
        elif anchor.subject != top.issuer:
            continue
        _check_window(anchor, now)
        if not verify_signature(anchor.subject_pk, anchor.signature, anchor.tbs_bytes()):
            raise UntrustedRoot(f"anchor {anchor.subject!r} is not properly self-signed")
        if not top.self_signed and not verify_signature(anchor.subject_pk, top.signature, top.tbs_bytes()):
            continue
        return chain[0].subject_pk
    if top.self_signed:
        raise UntrustedRoot(f"root {top.subject!r} is not a configured trust anchor")
    raise UntrustedRoot(f"issuer {top.issuer!r} is not a configured trust anchor")


# DER / PEM


def _kind_of(obj) -> str:
    if isinstance(obj, VerifiableCredential):
        return LABEL_VC
    if isinstance(obj, DidDocument):
        return LABEL_DID_DOCUMENT
    if isinstance(obj, ChainCertificate):
        return LABEL_CHAIN_CERTIFICATE
    raise TypeError(f"no encoding for {type(obj).__name__}")


_CLASS_BY_LABEL = {
    LABEL_VC: VerifiableCredential,
    LABEL_DID_DOCUMENT: DidDocument,
    LABEL_CHAIN_CERTIFICATE: ChainCertificate,
}


def encode_der(obj: Union[VerifiableCredential, DidDocument, ChainCertificate]) -> bytes:
    if isinstance(obj, ChainCertificate):
        return obj.to_bytes()
    _kind_of(obj)
    body = serialize(obj.to_dict())
    return len(body).to_bytes(4, "big") + body


def decode_der(data: bytes, cls: type):
    if cls is ChainCertificate:
        if not data:
            raise Truncated("empty chain certificate")
        return ChainCertificate.from_bytes(data)
    if len(data) < 4:
        raise Truncated(f"DER form needs a 4-byte length, got {len(data)} bytes")
    declared = int.from_bytes(data[:4], "big")
    body = data[4:]
    if len(body) < declared:
        raise Truncated(f"DER form declares {declared} bytes, carries {len(body)}")
    if len(body) > declared:
        raise SchemaViolation(f"DER form has {len(body) - declared} trailing bytes")
    try:
        parsed = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaViolation(f"DER body is not a document: {e}") from e
    if not isinstance(parsed, dict):
        raise SchemaViolation("DER body is not an object")
    if cls is VerifiableCredential:
        obj = VerifiableCredential.from_dict(parsed)
    elif cls is DidDocument:
        obj = DidDocument.from_dict(parsed)
    else:
        raise TypeError(f"no decoding for {cls.__name__}")
    # one encoding per object: escapes, spacing and key order must match ours
    if serialize(obj.to_dict()) != body:
        raise SchemaViolation("DER body is not in canonical form")
    return obj


def encode_pem(obj) -> str:
    label = _kind_of(obj)
    b64 = base64.b64encode(encode_der(obj)).decode("ascii")
    lines = [b64[i:i + 64] for i in range(0, len(b64), 64)]
    return f"-----BEGIN {label}-----\n" + "\n".join(lines) + f"\n-----END {label}-----\n"


def _split_pem_blocks(text: str) -> list[tuple[str, str]]:
    blocks = []
    label = None
    body: list[str] = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("-----BEGIN ") and line.endswith("-----"):
            if label is not None:
                raise BadArmor("nested BEGIN line")
            label = line[len("-----BEGIN "):-5]
            body = []
        elif line.startswith("-----END ") and line.endswith("-----"):
            end_label = line[len("-----END "):-5]
            if label is None or end_label != label:
                raise BadArmor(f"unbalanced END {end_label!r}")
            blocks.append((label, "".join(body)))
            label = None
        elif label is not None:
            body.append(line)
        else:
            raise BadArmor("text outside armor")
    if label is not None:
        raise BadArmor(f"missing END {label!r}")
    if not blocks:
        raise BadArmor("no PEM block found")
    return blocks


def decode_pem_all(text: str, cls: type) -> list:
    expected = _kind_of_class(cls)
    out = []
    for label, b64 in _split_pem_blocks(text):
        if label != expected:
            raise LabelMismatch(f"expected {expected!r}, found {label!r}")
        try:
            der = base64.b64decode(b64, validate=True)
        except (binascii.Error, ValueError) as e:
            raise BadArmor(f"bad base64 body: {e}") from e
        try:
            out.append(decode_der(der, cls))
        except Truncated as e:
            raise BadArmor(f"truncated body: {e}") from e
    return out


def decode_pem(text: str, cls: type):
    blocks = decode_pem_all(text, cls)
    if len(blocks) != 1:
        raise BadArmor(f"expected one PEM block, found {len(blocks)}")
    return blocks[0]


def _kind_of_class(cls: type) -> str:
    for label, known in _CLASS_BY_LABEL.items():
        if known is cls:
            return label
    raise TypeError(f"no PEM label for {cls.__name__}")
