"""Provides sealed match persistence and the user-facing retrieval path.

Provides `MatchStore`, which appends every match to its owner's log as a
sealed blob (`<user_id hex>.log` in the enclave store), and `ViewerService`,
which lets a user prove knowledge of their user key and then fetch their own
matched traffic parts, without rule identifiers, sealed under a key only that
user can derive.
"""

import logging
import secrets
import threading
import time
from typing import Callable, Mapping

from match_record import MatchRecord, ViewerMatch, encode_viewer_matches
from pri_crypto import Envelope, SymKey, aead_seal, counter_nonce, derive_key, mac_verify
from pri_enclave import BlobKind, EnclaveRuntime, HostInterfaceViolation, SealedBlob, parse_sealed_blobs
from pri_inspector import UnknownUser
from pri_wire import ID_SIZE, WireFormatError

logger = logging.getLogger(__name__)

LOG_SUFFIX: str = ".log"


class StoreError(Exception):
    """Base class for match store and viewer errors."""


class StorageFailure(StoreError):
    """Exception raised when a sealed match cannot be persisted or read back."""


class AuthFailed(StoreError):
    """Exception raised when a viewer's challenge response does not verify."""


class TokenExpired(StoreError):
    """Exception raised when a viewer token is used after its expiry."""


class TokenUnknown(StoreError):
    """Exception raised for a token that was never issued or was already used."""


def match_log_name(user_id: bytes) -> str:
    return bytes(user_id).hex() + LOG_SUFFIX


class MatchStore:
    """Append-only sealed match logs, one per user.

    Appends are serialized per user; different users' logs are independent.
    """

    def __init__(self, runtime: EnclaveRuntime) -> None:
        self.runtime: EnclaveRuntime = runtime
        self._locks: dict[bytes, threading.Lock] = {}
        self._guard: threading.Lock = threading.Lock()

    def _lock(self, user_id: bytes) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(bytes(user_id), threading.Lock())

    def store_match(self, record: MatchRecord) -> None:
        """Seals a match and appends it to its owner's log.

        Raises:
            StorageFailure: Raised when the log cannot be written.
        """
        blob: SealedBlob = self.runtime.seal(BlobKind.MATCH, record.to_bytes())
        with self._lock(record.owner):
            try:
                self.runtime.host.append_storage(match_log_name(record.owner), blob.to_bytes())
            except (OSError, HostInterfaceViolation) as e:
                raise StorageFailure(f"Could not append to the match log of {record.owner.hex()}.") from e

    def load_matches(self, user_id: bytes) -> list[MatchRecord]:
        """Returns a user's stored matches in append order.

        Raises:
            StorageFailure: Raised when the log is corrupt.
        """
        with self._lock(user_id):
            data: bytes | None = self.runtime.host.read_storage(match_log_name(user_id))
        if not data:
            return []
        try:
            records: list[MatchRecord] = [
                MatchRecord.from_bytes(self.runtime.unseal(blob)) for blob in parse_sealed_blobs(data)
            ]
        except WireFormatError as e:
            raise StorageFailure(f"Match log of {bytes(user_id).hex()} is corrupt.") from e
        return [record for record in records if record.owner == bytes(user_id)]

    def restore(self) -> int:
        """Checks that every match log in the store parses; returns the number of stored matches.

        Raises:
            StorageFailure: Raised when a log is corrupt.
        """
        count: int = 0
        for name in self.runtime.host.storage_names():
            if not name.endswith(LOG_SUFFIX):
                continue
            try:
                count += len(parse_sealed_blobs(self.runtime.host.read_storage(name) or b""))
            except WireFormatError as e:
                raise StorageFailure(f"Match log {name} is corrupt.") from e
        return count


class ViewerToken:
    """Authorizes one fetch of a user's matches until `expiry` (ms since epoch)."""

    def __init__(self, user_id: bytes, expiry: int, token_id: bytes) -> None:
        self.user_id: bytes = bytes(user_id)
        self.expiry: int = int(expiry)
        self.token_id: bytes = bytes(token_id)

    def __repr__(self) -> str:
        return f"ViewerToken(user={self.user_id.hex()}, expiry={self.expiry})"


def viewer_auth_key(user_key: SymKey, user_id: bytes) -> SymKey:
    return derive_key(user_key, "viewer", user_id)


def viewer_response_key(user_key: SymKey, token_id: bytes) -> SymKey:
    return derive_key(user_key, "viewer-resp", token_id)


class ViewerService:
    """Challenge, authentication and fetch for the match viewer."""

    def __init__(
        self,
        user_keys: Mapping[bytes, SymKey],
        store: MatchStore,
        token_ttl_s: int = 300,
        clock: Callable[[], int] = lambda: int(time.time() * 1000),
        random_bytes: Callable[[int], bytes] = secrets.token_bytes,
    ) -> None:
        self.user_keys: Mapping[bytes, SymKey] = user_keys
        self.store: MatchStore = store
        self.token_ttl_ms: int = token_ttl_s * 1000
        self.clock: Callable[[], int] = clock
        self.random_bytes: Callable[[int], bytes] = random_bytes
        self._challenges: dict[bytes, bytes] = {}
        self._tokens: dict[bytes, ViewerToken] = {}
        self._lock: threading.Lock = threading.Lock()

    def issue_challenge(self, user_id: bytes) -> bytes:
        """Returns a fresh 32-byte nonce; it replaces any earlier one for the user."""
        nonce: bytes = self.random_bytes(32)
        with self._lock:
            self._challenges[bytes(user_id)] = nonce
        return nonce

    def viewer_authenticate(self, user_id: bytes, response: bytes) -> ViewerToken:
        """Checks a challenge response and issues a token.

        Args:
            user_id (bytes): The user claiming to view.
            response (bytes): `mac(derive_key(k_U, "viewer", user_id), challenge)`.

        Raises:
            UnknownUser: Raised when the user never registered.
            AuthFailed: Raised for a wrong tag or when no challenge is outstanding.

        Returns:
            ViewerToken: A single-use token.
        """
        user_key: SymKey | None = self.user_keys.get(bytes(user_id))
        if user_key is None:
            raise UnknownUser(f"User {bytes(user_id).hex()} is not registered.")
        with self._lock:
            challenge: bytes | None = self._challenges.pop(bytes(user_id), None)
        if challenge is None:
            raise AuthFailed("No outstanding challenge for this user.")
        if not mac_verify(viewer_auth_key(user_key, user_id), challenge, response):
            raise AuthFailed("Challenge response did not verify.")
        token: ViewerToken = ViewerToken(user_id, self.clock() + self.token_ttl_ms, self.random_bytes(ID_SIZE))
        with self._lock:
            self._tokens[token.token_id] = token
        logger.info("viewer token issued for user %s", token.user_id.hex())
        return token

    def fetch_matches(self, token_id: bytes) -> tuple[int, Envelope]:
        """Returns the token owner's matches, sealed for that owner.

        Raises:
            TokenUnknown: Raised for a token never issued or already used.
            TokenExpired: Raised after the token's expiry.

        Returns:
            tuple[int, Envelope]: Number of matches and the sealed list, keyed
            with `derive_key(k_U, "viewer-resp", token_id)`.
        """
        with self._lock:
            token: ViewerToken | None = self._tokens.pop(bytes(token_id), None)
        if token is None:
            raise TokenUnknown("Viewer token is unknown or was already used.")
        if self.clock() > token.expiry:
            raise TokenExpired("Viewer token has expired.")
        matches: list[ViewerMatch] = [record.to_viewer_match() for record in self.store.load_matches(token.user_id)]
        key: SymKey = viewer_response_key(self.user_keys[token.user_id], token.token_id)
        envelope: Envelope = aead_seal(key, counter_nonce(0), token.token_id, encode_viewer_matches(matches))
        logger.info("viewer fetch for user %s returned %d matches", token.user_id.hex(), len(matches))
        return len(matches), envelope
