import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dflsim.codec import CodecError, decode, encode
from dflsim.identity import Identity, KeyDirectory, KeyPair, digest, generate_identity, sign, verify
from dflsim.messages import (
    Batch,
    ConsensusRequest,
    EndRequest,
    MsgKind,
    PbftMessage,
    Phase,
    PledgePayload,
    ReplyMsg,
    RequestTuple,
    WorkPayload,
)

ID = Identity.from_seed(11)
OTHER = Identity.from_seed(12)

digests = st.binary(min_size=32, max_size=32)
phases = st.sampled_from(list(Phase))
small_ints = st.integers(min_value=-(2**70), max_value=2**70)


@st.composite
def request_tuples(draw):
    return RequestTuple(draw(st.integers(0, 10**6)), draw(phases), draw(st.integers(0, 10**9)),
                        draw(digests), draw(st.binary(max_size=64)))


@st.composite
def protocol_messages(draw):
    kind = draw(st.integers(0, 4))
    if kind == 0:
        return draw(request_tuples())
    if kind == 1:
        return EndRequest(draw(digests), draw(phases), draw(st.integers(0, 10**6)), draw(digests),
                          draw(st.binary(max_size=64)))
    if kind == 2:
        scores = tuple(draw(st.lists(st.tuples(digests, st.integers(0, 1000)), max_size=4)))
        return WorkPayload(draw(request_tuples()), scores, draw(digests), draw(st.integers(0, 1000)))
    if kind == 3:
        req = ConsensusRequest.make(PledgePayload(draw(request_tuples())), ID)
        batch = Batch(draw(digests), draw(st.integers(0, 9)), draw(st.integers(1, 99)), (req,))
        return PbftMessage(draw(st.sampled_from(list(MsgKind))), draw(st.integers(0, 9)), draw(st.integers(0, 99)),
                           draw(phases), draw(st.integers(0, 9)), draw(st.integers(1, 99)), draw(digests),
                           draw(digests), draw(st.binary(max_size=64)), draw(st.none() | st.just(batch)))
    return ReplyMsg(draw(digests), draw(phases), draw(st.integers(0, 99)), draw(digests), draw(st.binary(max_size=64)),
                    draw(st.binary(max_size=80)))


plain_values = st.recursive(
    st.none() | st.booleans() | small_ints | st.binary(max_size=40) | st.text(max_size=20)
    | st.floats(allow_nan=False),
    lambda inner: st.lists(inner, max_size=4).map(tuple),
    max_leaves=20,
)


# -- identities ---------------------------------------------------------------------


def test_generate_identity_is_deterministic():
    assert generate_identity(7) == generate_identity(7)


def test_distinct_seeds_give_distinct_ids():
    ids = {generate_identity(s)[0] for s in range(200)}
    assert len(ids) == 200


def test_node_id_is_digest_of_public_key():
    node, kp = generate_identity(3)
    assert len(node) == 32 and node == hashlib.sha256(kp.public).digest()


def test_sign_verify_roundtrip():
    node, kp = generate_identity(5)
    assert verify(kp.public, b"x", sign(kp, b"x"))


def test_verify_rejects_other_key_and_flipped_byte():
    data = b"payload bytes"
    sig = ID.sign(data)
    assert not verify(OTHER.keys.public, data, sig)
    flipped = bytes([data[0] ^ 1]) + data[1:]
    assert not verify(ID.keys.public, flipped, sig)


def test_malformed_signature_is_false_not_error():
    assert verify(ID.keys.public, b"m", b"short") is False
    assert verify(b"\x00" * 5, b"m", b"\x00" * 64) is False


def test_rfc8032_vector():
    # RFC 8032 section 7.1, test 1 (empty message).
    secret = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
    public = bytes.fromhex("d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a")
    expected = bytes.fromhex(
        "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b"
    )
    assert sign(KeyPair(public, secret), b"") == expected


@settings(max_examples=60, deadline=None)
@given(st.binary(min_size=64, max_size=64), st.binary(max_size=32))
def test_random_blobs_never_verify(blob, data):
    keys = KeyDirectory()
    for s in range(4):
        ident = Identity.from_seed(s)
        keys.add(ident.node_id, ident.keys.public)
        assert not keys.verify(ident.node_id, data, blob)


def test_key_directory_rejects_mismatched_id():
    keys = KeyDirectory()
    with pytest.raises(ValueError):
        keys.add(ID.node_id, OTHER.keys.public)


# -- digest -------------------------------------------------------------------------


def test_digest_empty_golden_vector():
    assert digest(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_digest_abc_golden_vector():
    assert digest(b"abc").hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_one_bit_change_changes_digest():
    rng = np.random.default_rng(0)
    for _ in range(50):
        data = bytearray(rng.bytes(33))
        before = digest(bytes(data))
        data[int(rng.integers(33))] ^= 1 << int(rng.integers(8))
        assert digest(bytes(data)) != before


def test_digest_stable_across_processes():
    code = "from dflsim.identity import digest; from dflsim.codec import encode; print(digest(encode((1, b'a', 'z'))).hex())"
    env = dict(os.environ, PYTHONHASHSEED="12345")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == digest(encode((1, b"a", "z"))).hex()


# -- codec --------------------------------------------------------------------------


@settings(max_examples=150, deadline=None)
@given(protocol_messages())
def test_message_roundtrip(msg):
    raw = encode(msg)
    back = decode(raw)
    assert back == msg
    assert encode(back) == raw


@settings(max_examples=150, deadline=None)
@given(plain_values)
def test_plain_value_roundtrip(value):
    assert encode(decode(encode(value))) == encode(value)


@settings(max_examples=150, deadline=None)
@given(plain_values, plain_values)
def test_encoding_is_injective(a, b):
    if encode(a) == encode(b):
        assert decode(encode(a)) == decode(encode(b))


@settings(max_examples=100, deadline=None)
@given(request_tuples(), st.integers(0, 10**6))
def test_one_field_change_changes_bytes(t, it):
    other = RequestTuple(it, t.status, t.money, t.address, t.sig)
    assert (encode(other) == encode(t)) == (it == t.it)


def test_known_encoding_layout():
    # type code, 4-byte length, big-endian two's complement
    assert encode(1) == b"\x03\x00\x00\x00\x01\x01"
    assert encode(-1) == b"\x03\x00\x00\x00\x01\xff"
    assert encode(b"ab") == b"\x04\x00\x00\x00\x02ab"
    assert encode((None, True)) == b"\x07\x00\x00\x00\x02\x00\x02"


def test_dict_encoding_independent_of_insertion_order():
    assert encode({"b": 1, "a": 2}) == encode({"a": 2, "b": 1})


def test_vector_roundtrip_is_exact():
    v = np.array([0.1, -2.5, 1e-300, 3.0])
    assert np.array_equal(decode(encode(v)), v)


def test_decode_rejects_garbage():
    with pytest.raises(CodecError):
        decode(b"\x03\x00\x00\x00\x02\x00\x01")  # non-minimal integer
    with pytest.raises(CodecError):
        decode(encode(5) + b"\x00")
    with pytest.raises(CodecError):
        decode(b"\x04\x00\x00\x00\x09ab")
    with pytest.raises(CodecError):
        decode(b"\xee")


def test_unregistered_type_is_rejected():
    class Foo:
        pass

    with pytest.raises(CodecError):
        encode(Foo())


def test_memoised_record_bytes_match_fresh_encoding():
    req = ConsensusRequest.make(PledgePayload(RequestTuple.make(1, Phase.PLEDGE, 5, ID)), ID)
    first = encode(req)
    assert encode(req) == first
    assert encode(decode(first)) == first
