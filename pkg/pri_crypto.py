"""Provides the cryptographic building blocks shared by every PRI component.

Provides authenticated encryption (`aead_seal` / `aead_open`), key derivation
(`derive_key`), key agreement (`key_agree`), signatures (`sign` / `verify`) and
message authentication (`mac` / `mac_verify`), plus the value types `SymKey`,
`Envelope` and `KeyPair`. Each primitive is a single fixed scheme recorded by a
one-byte scheme id; all of them come from the `cryptography` package.

Every function here is pure and safe to call from any thread.
"""

import hmac as _hmac
import secrets
from enum import IntEnum, StrEnum, auto
from typing import Final

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives import hmac as crypto_hmac
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

KEY_SIZE: Final[int] = 32
NONCE_SIZE: Final[int] = 12
TAG_SIZE: Final[int] = 16
SIGNATURE_SIZE: Final[int] = 64
MAX_LABEL_SIZE: Final[int] = 32


class Scheme(IntEnum):
    """One-byte identifiers of the fixed schemes."""

    AES256_GCM = 0x01
    HKDF_SHA256 = 0x02
    X25519 = 0x03
    ED25519 = 0x04
    HMAC_SHA256 = 0x05


class KeyUsage(StrEnum):
    signing = auto()
    key_agreement = auto()


class CryptoError(Exception):
    """Base class for errors raised by the crypto envelope."""


class AuthFailure(CryptoError):
    """Exception raised when authenticated data fails to verify or decrypt."""


class InvalidLabel(CryptoError):
    """Exception raised when a derivation label is empty or not ASCII."""


class LabelTooLong(InvalidLabel):
    """Exception raised when a derivation label exceeds 32 bytes."""


class InvalidPublicKey(CryptoError):
    """Exception raised when a key-agreement peer key is degenerate."""


class MalformedSignature(CryptoError):
    """Exception raised when a signature has the wrong length."""


class KeyUsageError(CryptoError):
    """Exception raised when a key pair is used for the wrong purpose."""


class SymKey:
    """A 32-byte symmetric secret.

    Equality is constant-time and `repr` never shows the key bytes.
    """

    __slots__ = ("_bytes",)

    def __init__(self, key_bytes: bytes) -> None:
        if not isinstance(key_bytes, (bytes, bytearray)) or len(key_bytes) != KEY_SIZE:
            raise CryptoError(f"A SymKey must be exactly {KEY_SIZE} bytes.")
        self._bytes: bytes = bytes(key_bytes)

    @classmethod
    def generate(cls) -> "SymKey":
        """Returns a fresh key from the operating system's CSPRNG."""
        return cls(secrets.token_bytes(KEY_SIZE))

    @property
    def bytes(self) -> bytes:
        return self._bytes

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SymKey):
            return NotImplemented
        return _hmac.compare_digest(self._bytes, other._bytes)

    def __hash__(self) -> int:
        return hash(self._bytes)

    def __repr__(self) -> str:
        return "SymKey(<redacted>)"


class Envelope:
    """Output of `aead_seal`: scheme id, nonce and ciphertext with tag."""

    __slots__ = ("scheme_id", "nonce", "ciphertext")

    def __init__(self, nonce: bytes, ciphertext: bytes, scheme_id: int = Scheme.AES256_GCM) -> None:
        if len(nonce) != NONCE_SIZE:
            raise CryptoError(f"A nonce must be exactly {NONCE_SIZE} bytes.")
        if len(ciphertext) < TAG_SIZE:
            raise AuthFailure("Ciphertext is shorter than the authentication tag.")
        self.scheme_id: int = int(scheme_id)
        self.nonce: bytes = bytes(nonce)
        self.ciphertext: bytes = bytes(ciphertext)

    def to_bytes(self) -> bytes:
        """Returns `scheme_id(1) ‖ nonce(12) ‖ ciphertext`."""
        return bytes([self.scheme_id]) + self.nonce + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        """Parses the layout written by `to_bytes`.

        Raises:
            AuthFailure: Raised when the data is too short or names an unknown scheme.
        """
        if len(data) < 1 + NONCE_SIZE + TAG_SIZE:
            raise AuthFailure("Envelope is truncated.")
        if data[0] != Scheme.AES256_GCM:
            raise AuthFailure(f"Unknown AEAD scheme id {data[0]}.")
        return cls(data[1 : 1 + NONCE_SIZE], data[1 + NONCE_SIZE :], data[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Envelope):
            return NotImplemented
        return (self.scheme_id, self.nonce, self.ciphertext) == (
            other.scheme_id,
            other.nonce,
            other.ciphertext,
        )

    def __repr__(self) -> str:
        return f"Envelope(scheme={self.scheme_id}, nonce={self.nonce.hex()}, ct_len={len(self.ciphertext)})"


class KeyPair:
    """An X25519 or Ed25519 key pair; the usage is fixed at creation."""

    __slots__ = ("public", "secret", "usage")

    def __init__(self, secret: bytes, usage: KeyUsage) -> None:
        if len(secret) != KEY_SIZE:
            raise CryptoError(f"A secret key must be exactly {KEY_SIZE} bytes.")
        self.secret: bytes = bytes(secret)
        self.usage: KeyUsage = KeyUsage(usage)
        self.public: bytes = public_from_secret(self.secret, self.usage)

    @classmethod
    def generate(cls, usage: KeyUsage) -> "KeyPair":
        """Returns a fresh key pair for `usage`."""
        return cls(secrets.token_bytes(KEY_SIZE), usage)

    def __repr__(self) -> str:
        return f"KeyPair(usage={self.usage}, public={self.public.hex()})"


def public_from_secret(secret: bytes, usage: KeyUsage) -> bytes:
    """Derives the raw 32-byte public key for a secret key.

    Args:
        secret (bytes): 32-byte raw secret key.
        usage (KeyUsage): Which scheme the secret belongs to.

    Returns:
        bytes: The raw public key.
    """
    if usage == KeyUsage.signing:
        private = Ed25519PrivateKey.from_private_bytes(secret)
    else:
        private = X25519PrivateKey.from_private_bytes(secret)
    return private.public_key().public_bytes(
        encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw
    )


def counter_nonce(counter: int) -> bytes:
    """Returns the deterministic nonce `4 zero bytes ‖ counter(8BE)`.

    Every protocol that seals under a long-lived key takes its nonce from here.
    """
    if not 0 <= counter < 1 << 64:
        raise CryptoError("Nonce counter out of range.")
    return bytes(4) + counter.to_bytes(8, "big")


def aead_seal(key: SymKey, nonce: bytes, aad: bytes, plaintext: bytes) -> Envelope:
    """Encrypts and authenticates `plaintext` with AES-256-GCM.

    Args:
        key (SymKey): The encryption key.
        nonce (bytes): 12-byte nonce, unique per key.
        aad (bytes): Associated data bound to the ciphertext.
        plaintext (bytes): Data to encrypt.

    Returns:
        Envelope: Ciphertext of length `len(plaintext) + 16`.
    """
    ciphertext: bytes = AESGCM(key.bytes).encrypt(nonce, bytes(plaintext), bytes(aad))
    return Envelope(nonce, ciphertext)


def aead_open(key: SymKey, nonce: bytes, aad: bytes, env: Envelope) -> bytes:
    """Verifies and decrypts an Envelope.

    Args:
        key (SymKey): The encryption key.
        nonce (bytes): Nonce the caller expects; must equal `env.nonce`.
        aad (bytes): Associated data the caller expects.
        env (Envelope): The sealed data.

    Raises:
        AuthFailure: Raised on a wrong key, nonce or associated data, or tampered ciphertext.

    Returns:
        bytes: The original plaintext.
    """
    if env.scheme_id != Scheme.AES256_GCM or not _hmac.compare_digest(nonce, env.nonce):
        raise AuthFailure("Envelope does not belong to this nonce or scheme.")
    try:
        return AESGCM(key.bytes).decrypt(nonce, env.ciphertext, bytes(aad))
    except InvalidTag as e:
        raise AuthFailure("Authentication tag did not verify.") from e


def hkdf_sha256(ikm: bytes, info: bytes, salt: bytes | None = None, length: int = KEY_SIZE) -> bytes:
    """Plain HKDF-SHA256 extract-and-expand.

    Args:
        ikm (bytes): Input keying material.
        info (bytes): Context information.
        salt (bytes | None): Optional salt. Defaults to None (hash-length zeros).
        length (int): Output length in bytes.

    Returns:
        bytes: `length` bytes of output keying material.
    """
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(ikm)


def derive_key(secret: bytes | SymKey, label: str, context: bytes = b"") -> SymKey:
    """Derives a 32-byte key bound to a label and a context.

    The HKDF info is `len(label)(1) ‖ label ‖ context`, so distinct labels can
    never produce the same info string.

    Args:
        secret (bytes | SymKey): 32-byte input secret.
        label (str): Short ASCII purpose label, 1 to 32 bytes.
        context (bytes): Additional binding data.

    Raises:
        InvalidLabel: Raised when the label is empty or not ASCII.
        LabelTooLong: Raised when the label exceeds 32 bytes.

    Returns:
        SymKey: The derived key.
    """
    if isinstance(secret, SymKey):
        secret = secret.bytes
    if not label:
        raise InvalidLabel("Derivation label must not be empty.")
    try:
        label_bytes: bytes = label.encode("ascii")
    except UnicodeEncodeError as e:
        raise InvalidLabel("Derivation label must be ASCII.") from e
    if len(label_bytes) > MAX_LABEL_SIZE:
        raise LabelTooLong(f"Derivation label is {len(label_bytes)} bytes; at most {MAX_LABEL_SIZE} allowed.")

    info: bytes = bytes([len(label_bytes)]) + label_bytes + bytes(context)
    return SymKey(hkdf_sha256(bytes(secret), info))


def key_agree(own_secret: bytes | KeyPair, peer_public: bytes) -> bytes:
    """Computes an X25519 shared secret.

    Args:
        own_secret (bytes | KeyPair): Own raw secret, or a key-agreement KeyPair.
        peer_public (bytes): Peer's raw 32-byte public key.

    Raises:
        KeyUsageError: Raised when a signing KeyPair is passed.
        InvalidPublicKey: Raised for an all-zero or low-order peer key.

    Returns:
        bytes: The 32-byte shared secret.
    """
    if isinstance(own_secret, KeyPair):
        if own_secret.usage != KeyUsage.key_agreement:
            raise KeyUsageError("A signing key cannot be used for key agreement.")
        own_secret = own_secret.secret
    if len(peer_public) != KEY_SIZE or not any(peer_public):
        raise InvalidPublicKey("Peer public key is degenerate.")

    private = X25519PrivateKey.from_private_bytes(bytes(own_secret))
    try:
        shared: bytes = private.exchange(X25519PublicKey.from_public_bytes(bytes(peer_public)))
    except ValueError as e:
        # cryptography refuses low-order points with an all-zero result
        raise InvalidPublicKey("Peer public key is a low-order point.") from e
    if not any(shared):
        raise InvalidPublicKey("Peer public key is a low-order point.")
    return shared


def sign(signing_secret: bytes | KeyPair, message: bytes) -> bytes:
    """Signs `message` with Ed25519.

    Args:
        signing_secret (bytes | KeyPair): Raw secret or a signing KeyPair.
        message (bytes): Data to sign.

    Raises:
        KeyUsageError: Raised when a key-agreement KeyPair is passed.

    Returns:
        bytes: A 64-byte signature.
    """
    if isinstance(signing_secret, KeyPair):
        if signing_secret.usage != KeyUsage.signing:
            raise KeyUsageError("A key-agreement key cannot sign.")
        signing_secret = signing_secret.secret
    return Ed25519PrivateKey.from_private_bytes(bytes(signing_secret)).sign(bytes(message))


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """Checks an Ed25519 signature.

    Raises:
        MalformedSignature: Raised when the signature is not 64 bytes.

    Returns:
        bool: True iff the signature is valid for `public` and `message`.
    """
    if len(signature) != SIGNATURE_SIZE:
        raise MalformedSignature(f"Signature must be {SIGNATURE_SIZE} bytes, got {len(signature)}.")
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public)).verify(bytes(signature), bytes(message))
    except (InvalidSignature, ValueError):
        return False
    return True


def hmac_sha256(key: bytes, message: bytes) -> bytes:
    """Plain HMAC-SHA256 over raw key bytes."""
    h = crypto_hmac.HMAC(bytes(key), hashes.SHA256())
    h.update(bytes(message))
    return h.finalize()


def mac(key: SymKey, message: bytes) -> bytes:
    """Returns the 32-byte HMAC-SHA256 tag of `message`."""
    return hmac_sha256(key.bytes, message)


def mac_verify(key: SymKey, message: bytes, tag: bytes) -> bool:
    """Checks a tag from `mac` in constant time."""
    h = crypto_hmac.HMAC(key.bytes, hashes.SHA256())
    h.update(bytes(message))
    try:
        h.verify(bytes(tag))
    except InvalidSignature:
        return False
    return True


if __name__ == "__main__":
    from rich import print

    k = SymKey.generate()
    env = aead_seal(k, counter_nonce(1), b"aad", b"hello")
    print(env, aead_open(k, counter_nonce(1), b"aad", env))
