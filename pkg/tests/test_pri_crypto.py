import pytest
from hypothesis import given
from hypothesis import strategies as st

from pri_crypto import (
    AuthFailure,
    CryptoError,
    Envelope,
    InvalidLabel,
    InvalidPublicKey,
    KeyPair,
    KeyUsage,
    KeyUsageError,
    LabelTooLong,
    MalformedSignature,
    SymKey,
    aead_open,
    aead_seal,
    counter_nonce,
    derive_key,
    key_agree,
    mac,
    mac_verify,
    sign,
    verify,
)


@given(plaintext=st.binary(max_size=512), aad=st.binary(max_size=64), counter=st.integers(0, 2**64 - 1))
def test_seal_then_open_returns_plaintext(plaintext, aad, counter):
    key = SymKey(bytes(range(32)))
    envelope = aead_seal(key, counter_nonce(counter), aad, plaintext)
    assert len(envelope.ciphertext) == len(plaintext) + 16
    assert aead_open(key, counter_nonce(counter), aad, envelope) == plaintext


@given(position=st.integers(0, 31), bit=st.integers(0, 7))
def test_any_flipped_ciphertext_bit_fails(position, bit):
    key = SymKey.generate()
    envelope = aead_seal(key, counter_nonce(0), b"aad", b"sixteen byte msg")
    flipped = bytearray(envelope.ciphertext)
    flipped[position] ^= 1 << bit
    with pytest.raises(AuthFailure):
        aead_open(key, counter_nonce(0), b"aad", Envelope(envelope.nonce, bytes(flipped)))


def test_open_rejects_wrong_key_nonce_or_aad():
    key = SymKey.generate()
    envelope = aead_seal(key, counter_nonce(7), b"header", b"payload")
    with pytest.raises(AuthFailure):
        aead_open(SymKey.generate(), counter_nonce(7), b"header", envelope)
    with pytest.raises(AuthFailure):
        aead_open(key, counter_nonce(8), b"header", envelope)
    with pytest.raises(AuthFailure):
        aead_open(key, counter_nonce(7), b"other", envelope)


def test_envelope_layout_and_truncation():
    envelope = aead_seal(SymKey.generate(), counter_nonce(1), b"", b"abc")
    data = envelope.to_bytes()
    assert data[0] == 0x01
    assert Envelope.from_bytes(data) == envelope
    with pytest.raises(AuthFailure):
        Envelope.from_bytes(data[:20])
    with pytest.raises(AuthFailure):
        Envelope.from_bytes(b"\x09" + data[1:])


def test_counter_nonce_is_big_endian_behind_four_zero_bytes():
    assert counter_nonce(1) == bytes(11) + b"\x01"
    assert counter_nonce(2**64 - 1) == bytes(4) + b"\xff" * 8
    with pytest.raises(CryptoError):
        counter_nonce(2**64)
    with pytest.raises(CryptoError):
        counter_nonce(-1)


def test_symkey_is_redacted_and_sized():
    key = SymKey.generate()
    assert key.bytes.hex() not in repr(key)
    with pytest.raises(CryptoError):
        SymKey(b"short")


def test_derive_key_separates_labels_and_contexts():
    secret = bytes(32)
    a = derive_key(secret, "viewer", b"alice")
    assert a == derive_key(SymKey(secret), "viewer", b"alice")
    assert a != derive_key(secret, "viewer", b"bob")
    assert a != derive_key(secret, "seal", b"alice")


def test_derive_key_label_errors():
    with pytest.raises(InvalidLabel):
        derive_key(bytes(32), "")
    with pytest.raises(InvalidLabel):
        derive_key(bytes(32), "schlüssel")
    with pytest.raises(LabelTooLong):
        derive_key(bytes(32), "x" * 33)
    derive_key(bytes(32), "x" * 32)


def test_key_agreement_is_symmetric():
    alice = KeyPair.generate(KeyUsage.key_agreement)
    bob = KeyPair.generate(KeyUsage.key_agreement)
    assert key_agree(alice, bob.public) == key_agree(bob, alice.public)


def test_key_agreement_rejects_degenerate_peers_and_signing_keys():
    own = KeyPair.generate(KeyUsage.key_agreement)
    with pytest.raises(InvalidPublicKey):
        key_agree(own, bytes(32))
    with pytest.raises(InvalidPublicKey):
        key_agree(own, b"\x01" + bytes(31))
    with pytest.raises(KeyUsageError):
        key_agree(KeyPair.generate(KeyUsage.signing), own.public)


def test_sign_and_verify():
    pair = KeyPair.generate(KeyUsage.signing)
    signature = sign(pair, b"quote")
    assert len(signature) == 64
    assert verify(pair.public, b"quote", signature)
    assert not verify(pair.public, b"quote!", signature)
    assert not verify(KeyPair.generate(KeyUsage.signing).public, b"quote", signature)
    with pytest.raises(MalformedSignature):
        verify(pair.public, b"quote", signature[:63])
    with pytest.raises(KeyUsageError):
        sign(KeyPair.generate(KeyUsage.key_agreement), b"quote")


def test_mac_verify():
    key = SymKey.generate()
    tag = mac(key, b"challenge")
    assert len(tag) == 32
    assert mac_verify(key, b"challenge", tag)
    assert not mac_verify(key, b"challengf", tag)
    assert not mac_verify(SymKey.generate(), b"challenge", tag)
