import json
import random
import unittest
from dataclasses import replace
from datetime import datetime, timedelta, timezone

from vctls.identity import (
    BadArmor,
    BadIssuerSignature,
    BrokenChain,
    ChainCertificate,
    Did,
    DidDocument,
    Expired,
    IdentityError,
    IdentityKeyPair,
    InvalidValidityWindow,
    LabelMismatch,
    NotYetValid,
    SchemaViolation,
    Truncated,
    UnknownMethod,
    UntrustedRoot,
    VerifiableCredential,
    canonical_bytes,
    decode_der,
    decode_pem,
    decode_pem_all,
    encode_der,
    encode_pem,
    generate_identity,
    issue_vc,
    make_chain,
    verify_chain,
    verify_vc,
)

NOW = datetime(2026, 3, 1, 12, 0, tzinfo=timezone.utc)


def make_vc(claims=None, seed=b"issuer", subject_seed=b"subject", start=None, end=None):
    issuer_keys, issuer, _ = generate_identity("iota", seed)
    _, subject, _ = generate_identity("iota", subject_seed)
    vc = issue_vc(
        issuer_keys,
        issuer,
        subject,
        claims if claims is not None else {"deviceId": "sensor-1", "model": "tx-7"},
        start or NOW - timedelta(days=1),
        end or NOW + timedelta(days=30),
        credential_id="urn:uuid:00000000-0000-4000-8000-000000000001",
    )
    return issuer_keys, vc


class GenerateIdentityTests(unittest.TestCase):
    def test_fixed_seed_is_deterministic(self):
        a = generate_identity("iota", b"seed")
        b = generate_identity("iota", b"seed")

        self.assertEqual(a[1], b[1])
        self.assertEqual(a[2], b[2])
        self.assertEqual(a[0].pk, b[0].pk)

    def test_fresh_entropy_gives_distinct_dids(self):
        self.assertNotEqual(generate_identity("iota")[1], generate_identity("iota")[1])

    def test_unknown_method(self):
        with self.assertRaises(UnknownMethod):
            generate_identity("nosuch")

    def test_document_shape(self):
        keys, did, doc = generate_identity("web", b"x")

        self.assertEqual(str(did), f"did:web:{did.method_specific_id}")
        self.assertEqual(len(did.method_specific_id), 64)
        self.assertEqual(doc.controller, did)
        self.assertTrue(doc.verification_method_id.startswith(str(did)))
        self.assertEqual(doc.public_key, keys.pk)

    def test_did_parsing(self):
        self.assertEqual(Did.parse("did:iota:abc"), Did("iota", "abc"))
        self.assertEqual(Did.parse("did:web:example.com:user"), Did("web", "example.com:user"))
        for bad in ("iota:abc", "did:iota", "did::abc", "did:IOTA:abc", 42):
            with self.assertRaises(SchemaViolation, msg=repr(bad)):
                Did.parse(bad)

    def test_key_hex_form(self):
        keys = IdentityKeyPair.generate(b"k")

        self.assertEqual(IdentityKeyPair.from_hex(keys.to_hex()).pk, keys.pk)
        with self.assertRaises(SchemaViolation):
            IdentityKeyPair.from_hex("zz")
        with self.assertRaises(SchemaViolation):
            IdentityKeyPair.from_hex("00" * 31)


class CanonicalBytesTests(unittest.TestCase):
    def test_claim_order_does_not_matter(self):
        _, a = make_vc({"a": 1, "b": {"x": 1, "y": 2}})
        _, b = make_vc({"b": {"y": 2, "x": 1}, "a": 1})

        self.assertEqual(canonical_bytes(a), canonical_bytes(b))

    def test_expiration_second_changes_bytes(self):
        _, a = make_vc(end=NOW + timedelta(days=30))
        _, b = make_vc(end=NOW + timedelta(days=30, seconds=1))

        self.assertNotEqual(canonical_bytes(a), canonical_bytes(b))

    def test_proof_is_excluded(self):
        _, vc = make_vc()

        self.assertIsNotNone(vc.proof)
        self.assertEqual(canonical_bytes(vc), canonical_bytes(vc.without_proof()))

    def test_timestamps_are_utc_z_form(self):
        _, vc = make_vc()

        self.assertIn(b'"expirationDate":"2026-03-31T12:00:00Z"', canonical_bytes(vc))
        self.assertNotIn(b" ", canonical_bytes(vc))

    def test_distinct_claims_give_distinct_bytes(self):
        rng = random.Random(5)
        seen = set()
        for i in range(100):
            _, vc = make_vc({"n": i, "r": rng.random()})
            seen.add(canonical_bytes(vc))

        self.assertEqual(len(seen), 100)


class IssueVerifyTests(unittest.TestCase):
    def test_issue_then_verify(self):
        issuer_keys, vc = make_vc()

        subject = verify_vc(vc, issuer_keys.pk, NOW)

        self.assertEqual(subject, vc.subject)
        self.assertEqual(vc.type, ("VerifiableCredential", "IoTCredential"))
        self.assertEqual(len(vc.proof.proof_value), 64)
        self.assertTrue(vc.proof.verification_method.startswith(str(vc.issuer)))

    def test_random_claims_verify(self):
        rng = random.Random(21)
        for i in range(1000):
            claims = {f"k{j}": rng.choice([rng.random(), str(rng.random()), [1, 2], {"n": j}]) for j in range(rng.randint(0, 6))}
            issuer_keys, vc = make_vc(claims, seed=rng.randbytes(8), subject_seed=rng.randbytes(8))

            self.assertEqual(verify_vc(vc, issuer_keys.pk, NOW), vc.subject)

    def test_changed_claim_is_rejected(self):
        issuer_keys, vc = make_vc()
        forged = replace(vc, credential_subject={**vc.credential_subject, "model": "tx-8"})

        with self.assertRaises(BadIssuerSignature):
            verify_vc(forged, issuer_keys.pk, NOW)

    def test_wrong_issuer_key(self):
        _, vc = make_vc()

        with self.assertRaises(BadIssuerSignature):
            verify_vc(vc, IdentityKeyPair.generate(b"other").pk, NOW)

    def test_validity_window(self):
        issuer_keys, vc = make_vc()

        with self.assertRaises(Expired):
            verify_vc(vc, issuer_keys.pk, NOW + timedelta(days=31))
        with self.assertRaises(NotYetValid):
            verify_vc(vc, issuer_keys.pk, NOW - timedelta(days=2))

    def test_empty_window_is_refused(self):
        with self.assertRaises(InvalidValidityWindow):
            make_vc(start=NOW, end=NOW - timedelta(seconds=1))

    def test_missing_proof(self):
        issuer_keys, vc = make_vc()

        with self.assertRaises(SchemaViolation):
            verify_vc(vc.without_proof(), issuer_keys.pk, NOW)

    def test_type_must_include_verifiable_credential(self):
        issuer_keys, vc = make_vc()

        with self.assertRaises(SchemaViolation):
            verify_vc(replace(vc, type=("IoTCredential",)), issuer_keys.pk, NOW)

    def test_proof_created_is_pinned_to_issuance(self):
        issuer_keys, vc = make_vc()
        moved = replace(vc, proof=replace(vc.proof, created=vc.proof.created + timedelta(hours=1)))

        with self.assertRaises(SchemaViolation):
            verify_vc(moved, issuer_keys.pk, NOW)

    def test_proof_metadata_must_match(self):
        issuer_keys, vc = make_vc()
        cases = [
            replace(vc.proof, type="Ed25519Signature2020"),
            replace(vc.proof, cryptosuite="eddsa-rdfc-2022"),
            replace(vc.proof, proof_purpose="authentication"),
            replace(vc.proof, verification_method=f"{vc.issuer}#keys-1x"),
            replace(vc.proof, created=vc.expiration_date + timedelta(seconds=1)),
        ]
        for proof in cases:
            with self.assertRaises(SchemaViolation, msg=repr(proof)):
                verify_vc(replace(vc, proof=proof), issuer_keys.pk, NOW)


class EncodingTests(unittest.TestCase):
    def test_pem_round_trip(self):
        _, vc = make_vc()
        _, _, doc = generate_identity("key", b"doc")

        self.assertEqual(decode_pem(encode_pem(vc), VerifiableCredential), vc)
        self.assertEqual(decode_pem(encode_pem(doc), DidDocument), doc)
        self.assertTrue(encode_pem(vc).startswith("-----BEGIN VC-----\n"))
        self.assertTrue(encode_pem(doc).startswith("-----BEGIN DID DOCUMENT-----\n"))

    def test_label_mismatch(self):
        _, vc = make_vc()

        with self.assertRaises(LabelMismatch):
            decode_pem(encode_pem(vc), DidDocument)

    def test_truncated_body(self):
        _, vc = make_vc()
        lines = encode_pem(vc).splitlines()
        lines[-2] = lines[-2][:-1]

        with self.assertRaises(BadArmor):
            decode_pem("\n".join(lines), VerifiableCredential)

    def test_missing_end_line(self):
        _, vc = make_vc()

        with self.assertRaises(BadArmor):
            decode_pem(encode_pem(vc).rsplit("-----END", 1)[0], VerifiableCredential)

    def test_der_round_trip_and_framing(self):
        _, vc = make_vc()
        der = encode_der(vc)

        self.assertEqual(int.from_bytes(der[:4], "big"), len(der) - 4)
        self.assertEqual(der[4:], json.dumps(vc.to_dict(), sort_keys=True, separators=(",", ":")).encode())
        self.assertEqual(decode_der(der, VerifiableCredential), vc)

    def test_der_errors(self):
        _, vc = make_vc()
        der = encode_der(vc)

        with self.assertRaises(Truncated):
            decode_der(b"", VerifiableCredential)
        with self.assertRaises(Truncated):
            decode_der(der[:-1], VerifiableCredential)
        with self.assertRaises(SchemaViolation):
            decode_der(der + b"x", VerifiableCredential)

    def test_every_single_byte_mutation_is_rejected(self):
        issuer_keys, vc = make_vc()
        der = encode_der(vc)
        edits = (lambda b: (b + 1) % 256, lambda b: b ^ 0x20, lambda b: (b + 0xFF) % 256, lambda b: b ^ 0x80)

        for offset in range(len(der)):
            for edit in edits:
                mutated = bytearray(der)
                mutated[offset] = edit(mutated[offset])
                with self.subTest(offset=offset, byte=mutated[offset]):
                    with self.assertRaises(IdentityError):
                        verify_vc(decode_der(bytes(mutated), VerifiableCredential), issuer_keys.pk, NOW)

    def test_non_canonical_text_forms(self):
        _, vc = make_vc()
        body = json.dumps(vc.to_dict(), sort_keys=True, separators=(",", ":"))
        proof_hex = vc.proof.proof_value.hex()
        variants = [
            body.replace("T12:00:00Z", "t12:00:00Z", 1),
            body.replace("T12:00:00Z", "T12:00:00z", 1),
            body.replace(proof_hex, proof_hex.upper()),
            body.replace(",", ", ", 1),
            json.dumps(vc.to_dict(), separators=(",", ":")),
            body.replace('"sensor-1"', '"sensor\\u002d1"'),
        ]
        for text in variants:
            self.assertNotEqual(text, body)
            raw = text.encode()
            with self.assertRaises(SchemaViolation, msg=text[:80]):
                decode_der(len(raw).to_bytes(4, "big") + raw, VerifiableCredential)

    def test_document_key_type_is_checked(self):
        _, _, doc = generate_identity("iota", b"doc")
        data = doc.to_dict()
        data["authentication"][0]["type"] = "JsonWebKey2020"

        with self.assertRaises(SchemaViolation):
            DidDocument.from_dict(data)
        with self.assertRaises(SchemaViolation):
            DidDocument(doc.id, doc.public_key, key_type="X25519KeyAgreementKey2019")

    def test_random_documents_round_trip(self):
        rng = random.Random(8)
        for i in range(1000):
            _, _, doc = generate_identity(rng.choice(["iota", "key", "web"]), rng.randbytes(16))
            _, vc = make_vc({"i": i}, seed=rng.randbytes(8))

            self.assertEqual(decode_der(encode_der(doc), DidDocument), doc)
            self.assertEqual(decode_pem(encode_pem(vc), VerifiableCredential), vc)


class ChainTests(unittest.TestCase):
    def chain(self, seed=b"chain"):
        return make_chain(("root", "ca", "leaf"), NOW - timedelta(days=1), NOW + timedelta(days=1), seed=seed)

    def test_three_link_chain_verifies(self):
        bundle = self.chain()

        self.assertEqual([c.subject for c in bundle.certificates], ["leaf", "ca", "root"])
        self.assertTrue(bundle.root.self_signed)
        self.assertEqual(verify_chain(bundle.certificates, [bundle.root], NOW), bundle.keys.pk)

    def test_root_may_be_omitted_in_transit(self):
        bundle = self.chain()

        self.assertEqual(verify_chain(bundle.certificates[:2], [bundle.root], NOW), bundle.keys.pk)

    def test_corrupted_intermediate_signature(self):
        bundle = self.chain()
        leaf, ca, root = bundle.certificates
        bad = replace(ca, signature=bytes(64))

        with self.assertRaises(BrokenChain):
            verify_chain([leaf, bad, root], [root], NOW)

    def test_foreign_root(self):
        bundle = self.chain()
        other = self.chain(seed=b"other")

        with self.assertRaises(UntrustedRoot):
            verify_chain(bundle.certificates[:2], [other.root], NOW)
        with self.assertRaises(UntrustedRoot):
            verify_chain(bundle.certificates, [other.root], NOW)

    def test_expired_chain(self):
        bundle = self.chain()

        with self.assertRaises(Expired):
            verify_chain(bundle.certificates, [bundle.root], NOW + timedelta(days=2))

    def test_signature_and_key_counts(self):
        bundle = self.chain()
        transmitted = [c for c in bundle.certificates if not c.self_signed]

        self.assertEqual(len(bundle.certificates), 3)
        self.assertTrue(all(len(c.signature) == 64 for c in bundle.certificates))
        self.assertEqual(len(transmitted), 2)

    def test_pem_with_several_blocks(self):
        bundle = self.chain()
        text = "".join(encode_pem(c) for c in bundle.certificates)

        self.assertEqual(tuple(decode_pem_all(text, ChainCertificate)), bundle.certificates)

    def test_empty_window(self):
        with self.assertRaises(InvalidValidityWindow):
            make_chain(("r", "c", "l"), NOW, NOW)


if __name__ == "__main__":
    unittest.main()
