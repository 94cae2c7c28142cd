import dataclasses

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from crypto_suite import DIGEST_SIZE, DetRandom, KeyMaterial, sha3_256
from errors import AuthenticationFailure, CapsuleParseError, ParamsError, ReclaimRejected, TagMismatch
from kem_capsule import (ALPHA_SIZE, NONCE_SIZE, Capsule, InnerEnvelope, auth_proof, compute_hint, decapsulate,
                         derive_shared_secret, derive_transport_keys, encapsulate, generate_vector, load_vectors,
                         open_envelope, parse_vector_line, reclaim_key, reclaim_response, vector_context,
                         vector_params, verify_reclaim, write_vectors)
from math_core import ScalarSecret, gen_params, keygen
from utils import flip_bit


@pytest.fixture
def parties(params4):
    rng = DetRandom("test-kem-parties", b"seed")
    sender = ScalarSecret.generate(params4, rng)
    recipient = ScalarSecret.generate(params4, rng)
    return sender, recipient, keygen(params4, recipient)


@pytest.fixture
def context(params4):
    return vector_context(params4)


def seal(params, parties, context, payload=b"meet at noon", seed=b"enc"):
    sender, _, recipient_pub = parties
    rng = DetRandom("test-kem", seed)
    return encapsulate(params, sender, recipient_pub, context, payload, rng.read(ALPHA_SIZE), rng)


def test_decapsulate_recovers_transport_keys(params4, parties, context):
    _, recipient, recipient_pub = parties
    enc = seal(params4, parties, context)
    keys = decapsulate(params4, recipient, recipient_pub, enc.capsule.to_bytes(), context)
    assert keys.k_auth == enc.k_auth

    contents = open_envelope(keys.k_enc, enc.envelope, enc.hint)
    assert contents.payload == b"meet at noon"
    assert contents.h == auth_proof(enc.k_auth)
    assert contents.reclaim_tag == enc.secrets.reclaim_tag


def test_both_sides_derive_the_same_secret(params4, parties):
    sender, recipient, recipient_pub = parties
    sender_pub = keygen(params4, sender)
    assert derive_shared_secret(params4, sender, sender_pub, recipient_pub) == \
        derive_shared_secret(params4, recipient, recipient_pub, sender_pub)


def test_capsule_layout(params4, parties, context):
    enc = seal(params4, parties, context)
    data = enc.capsule.to_bytes()
    assert len(data) == 2 * params4.matrix_size + NONCE_SIZE + 32
    assert enc.hint == sha3_256(data)
    assert Capsule.from_bytes(data, params4) == enc.capsule


def test_wrong_context_is_tag_mismatch(params4, parties, context):
    _, recipient, recipient_pub = parties
    enc = seal(params4, parties, context)
    other = dataclasses.replace(context, ttl=context.ttl + 1)
    with pytest.raises(TagMismatch):
        decapsulate(params4, recipient, recipient_pub, enc.capsule, other)


def test_wrong_recipient_is_tag_mismatch(params4, parties, context):
    enc = seal(params4, parties, context)
    stranger = ScalarSecret(3, 5)
    with pytest.raises(TagMismatch):
        decapsulate(params4, stranger, keygen(params4, stranger), enc.capsule, context)


def test_tampered_capsule_rejected(params4, parties, context):
    _, recipient, recipient_pub = parties
    data = seal(params4, parties, context).capsule.to_bytes()
    nonce_bit = (2 * params4.matrix_size) * 8
    with pytest.raises(TagMismatch):
        decapsulate(params4, recipient, recipient_pub, flip_bit(data, nonce_bit), context)
    with pytest.raises(CapsuleParseError):
        decapsulate(params4, recipient, recipient_pub, data[:-1], context)


def test_envelope_bound_to_hint(params4, parties, context):
    _, recipient, recipient_pub = parties
    enc = seal(params4, parties, context)
    keys = decapsulate(params4, recipient, recipient_pub, enc.capsule, context)
    with pytest.raises(AuthenticationFailure):
        open_envelope(keys.k_enc, enc.envelope, bytes(32))
    with pytest.raises(CapsuleParseError):
        InnerEnvelope.from_bytes(enc.envelope.to_bytes()[:20])


def test_alpha_length_checked(params4, parties, context):
    sender, _, recipient_pub = parties
    with pytest.raises(ParamsError):
        encapsulate(params4, sender, recipient_pub, context, b"x", b"short")


def test_hints_are_distinct(params2):
    rng = DetRandom("test-hints", b"seed")
    recipient_pub = keygen(params2, ScalarSecret.generate(params2, rng))
    sender = ScalarSecret.generate(params2, rng)
    context = vector_context(params2)
    hints, proofs = set(), set()
    for _ in range(10_000):
        enc = encapsulate(params2, sender, recipient_pub, context, b"", rng.read(ALPHA_SIZE), rng)
        hints.add(enc.hint)
        proofs.add(auth_proof(enc.k_auth))
    assert len(hints) == 10_000
    assert len(proofs) == 10_000


@pytest.mark.parametrize("dim,pairs", [(2, 200), (4, 200), (8, 200)])
def test_transport_keys_agree(dim, pairs):
    params = gen_params(64, dim, b"nika")
    rng = DetRandom("test-transport", bytes([dim]))
    for _ in range(pairs):
        s, r = ScalarSecret.generate(params, rng), ScalarSecret.generate(params, rng)
        s_pub, r_pub = keygen(params, s), keygen(params, r)
        nonce = rng.read(NONCE_SIZE)
        sender_keys = derive_transport_keys(derive_shared_secret(params, s, s_pub, r_pub), nonce)
        recipient_keys = derive_transport_keys(derive_shared_secret(params, r, r_pub, s_pub), nonce)
        assert sender_keys.k_enc.data == recipient_keys.k_enc.data
        assert sender_keys.k_auth.data == recipient_keys.k_auth.data


def test_transport_keys_agree_production_size():
    params = gen_params(192, 8, b"nika-production")
    rng = DetRandom("test-transport", b"production")
    for _ in range(20):
        s, r = ScalarSecret.generate(params, rng), ScalarSecret.generate(params, rng)
        s_pub, r_pub = keygen(params, s), keygen(params, r)
        nonce = rng.read(NONCE_SIZE)
        sender_keys = derive_transport_keys(derive_shared_secret(params, s, s_pub, r_pub), nonce)
        recipient_keys = derive_transport_keys(derive_shared_secret(params, r, r_pub, s_pub), nonce)
        assert sender_keys.k_enc.data == recipient_keys.k_enc.data
        assert sender_keys.k_auth.data == recipient_keys.k_auth.data


def test_transfer_keys_are_independent(params4, parties, context):
    _, recipient, recipient_pub = parties
    enc = seal(params4, parties, context)
    keys = decapsulate(params4, recipient, recipient_pub, enc.capsule.to_bytes(), context)
    k_rec = reclaim_key(enc.secrets.r, enc.secrets.alpha)
    assert len({keys.k_enc.data, keys.k_auth.data, k_rec.data}) == 3


@settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(data=st.data())
def test_random_capsule_rejected(params4, parties, context, data):
    _, recipient, recipient_pub = parties
    size = 2 * params4.matrix_size + NONCE_SIZE + DIGEST_SIZE
    capsule = data.draw(st.binary(min_size=size, max_size=size))
    with pytest.raises((TagMismatch, CapsuleParseError)):
        decapsulate(params4, recipient, recipient_pub, capsule, context)


@settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(h=st.binary(min_size=DIGEST_SIZE, max_size=DIGEST_SIZE),
       key=st.binary(min_size=DIGEST_SIZE, max_size=DIGEST_SIZE))
def test_random_proof_and_key_fail(params4, parties, context, h, key):
    _, recipient, recipient_pub = parties
    enc = seal(params4, parties, context)
    k_enc = decapsulate(params4, recipient, recipient_pub, enc.capsule.to_bytes(), context).k_enc
    assert h != open_envelope(k_enc, enc.envelope, enc.hint).h
    if key != k_enc.data:
        with pytest.raises(AuthenticationFailure):
            open_envelope(KeyMaterial(key, "enc"), enc.envelope, enc.hint)


def test_hint_depends_on_capsule_only():
    assert compute_hint(b"capsule") == sha3_256(b"capsule")


def test_reclaim_accepts_committed_values(params4, parties, context):
    enc = seal(params4, parties, context)
    s = enc.secrets
    n = bytes(range(32))
    resp = reclaim_response(s, n, 7, context)
    assert verify_reclaim(s.r, s.alpha, n, 7, context, resp, s.reclaim_tag, s.c)


@pytest.mark.parametrize("field,reason", [
    ("r", "bad-R"),
    ("alpha", "bad-alpha"),
    ("idx", "bad-mac"),
    ("n", "bad-mac"),
    ("context", "bad-mac"),
])
def test_reclaim_rejections(params4, parties, context, field, reason):
    enc = seal(params4, parties, context)
    s = enc.secrets
    n = bytes(range(32))
    resp = reclaim_response(s, n, 7, context)
    args = {"r": s.r, "alpha": s.alpha, "n": n, "idx": 7, "context": context}
    if field == "r":
        args["r"] = flip_bit(s.r, 0)
    elif field == "alpha":
        args["alpha"] = flip_bit(s.alpha, 3)
    elif field == "idx":
        args["idx"] = 8
    elif field == "n":
        args["n"] = bytes(32)
    else:
        args["context"] = dataclasses.replace(context, refund_output="elsewhere")
    with pytest.raises(ReclaimRejected) as exc:
        verify_reclaim(args["r"], args["alpha"], args["n"], args["idx"], args["context"], resp,
                       s.reclaim_tag, s.c)
    assert exc.value.reason == reason


@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(r=st.one_of(st.none(), st.binary(min_size=32, max_size=32)),
       alpha=st.one_of(st.none(), st.binary(min_size=ALPHA_SIZE, max_size=ALPHA_SIZE)))
def test_only_committed_secrets_reclaim(params4, parties, context, r, alpha):
    enc = seal(params4, parties, context)
    s = enc.secrets
    # None stands for the committed value
    r = s.r if r is None else r
    alpha = s.alpha if alpha is None else alpha
    n = bytes(range(32))
    resp = reclaim_response(s, n, 7, context)
    if r == s.r and alpha == s.alpha:
        assert verify_reclaim(r, alpha, n, 7, context, resp, s.reclaim_tag, s.c)
        return
    with pytest.raises(ReclaimRejected):
        verify_reclaim(r, alpha, n, 7, context, resp, s.reclaim_tag, s.c)


def test_vectors_are_deterministic():
    params = vector_params()
    assert generate_vector(params, b"vector-0") == generate_vector(params, b"vector-0", idx=0)
    assert generate_vector(params, b"vector-0") != generate_vector(params, b"vector-1")


def test_vectors_verify_after_reload(tmp_path):
    params = vector_params()
    records = [(f"vector-{i}", generate_vector(params, f"vector-{i}".encode(), idx=i)) for i in range(2)]
    path = tmp_path / "vectors.txt"
    write_vectors(str(path), records)
    loaded = load_vectors(str(path))
    assert loaded == records

    context = vector_context(params)
    for name, fields in loaded:
        capsule = bytes.fromhex(fields["capsule"])
        assert sha3_256(capsule).hex() == fields["hint"]
        assert bytes.fromhex(fields["context"]) == context.to_bytes()
        assert sha3_256(bytes.fromhex(fields["alpha"])).hex() == fields["c"]


def test_malformed_vector_line():
    with pytest.raises(CapsuleParseError):
        parse_vector_line("vector-0 capsule")
    with pytest.raises(CapsuleParseError):
        parse_vector_line("   ")
