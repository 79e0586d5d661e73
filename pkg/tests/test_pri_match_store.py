import hashlib
import os

import pytest

from match_record import Match, MatchRecord, decode_viewer_matches
from pri_agent import UserKey
from pri_crypto import AuthFailure, aead_open, mac
from pri_enclave import EnclaveRuntime, ManifestEntry
from pri_inspector import UnknownUser
from pri_match_store import (
    AuthFailed,
    MatchStore,
    StorageFailure,
    TokenExpired,
    TokenUnknown,
    ViewerService,
    match_log_name,
    viewer_auth_key,
    viewer_response_key,
)
from pri_viewer import hex_dump, open_viewer_response
from pri_wire import decode_frame, encode_viewer_resp

MANIFEST = [ManifestEntry("pri_match_store", "1.0.0", hashlib.sha256(b"store").digest())]
ALICE: UserKey = UserKey.from_seed(b"a" * 16, 1)
BOB: UserKey = UserKey.from_seed(b"b" * 16, 2)


def record(owner: UserKey, start: int, data: bytes) -> MatchRecord:
    return MatchRecord(owner.user_id, Match(b"r" * 16, b"s" * 16, start, start + len(data), data), 500 + start)


@pytest.fixture
def store(platform, host) -> MatchStore:
    return MatchStore(EnclaveRuntime(platform, MANIFEST, host))


@pytest.fixture
def now() -> list[int]:
    return [10_000]


@pytest.fixture
def service(store, now) -> ViewerService:
    keys = {ALICE.user_id: ALICE.key, BOB.user_id: BOB.key}
    return ViewerService(keys, store, token_ttl_s=5, clock=lambda: now[0])


def authenticate(service: ViewerService, user: UserKey):
    challenge = service.issue_challenge(user.user_id)
    return service.viewer_authenticate(user.user_id, mac(viewer_auth_key(user.key, user.user_id), challenge))


def test_matches_are_kept_per_user_in_append_order(store):
    store.store_match(record(ALICE, 0, b"first"))
    store.store_match(record(BOB, 3, b"bobs"))
    store.store_match(record(ALICE, 9, b"second"))
    assert [r.match.matched_bytes for r in store.load_matches(ALICE.user_id)] == [b"first", b"second"]
    assert [r.match.matched_bytes for r in store.load_matches(BOB.user_id)] == [b"bobs"]
    assert store.load_matches(b"c" * 16) == []
    assert store.restore() == 3


def test_match_logs_hold_only_sealed_bytes(store, tmp_path):
    store.store_match(record(ALICE, 0, b"confidential bytes"))
    with open(tmp_path / "store" / match_log_name(ALICE.user_id), "rb") as file:
        assert b"confidential bytes" not in file.read()


def test_corrupt_log_is_reported(store, tmp_path):
    store.store_match(record(ALICE, 0, b"first"))
    with open(os.path.join(tmp_path, "store", match_log_name(ALICE.user_id)), "ab") as file:
        file.write(b"\x02\x00\x01")
    with pytest.raises(StorageFailure):
        store.load_matches(ALICE.user_id)
    with pytest.raises(StorageFailure):
        store.restore()


def test_viewer_fetch_returns_only_the_owners_matches(store, service):
    store.store_match(record(ALICE, 0, b"alice data"))
    store.store_match(record(BOB, 0, b"bob data"))
    token = authenticate(service, ALICE)
    count, envelope = service.fetch_matches(token.token_id)
    payload = aead_open(viewer_response_key(ALICE.key, token.token_id), envelope.nonce, token.token_id, envelope)
    matches = decode_viewer_matches(payload)
    assert count == 1
    assert [match.matched_bytes for match in matches] == [b"alice data"]
    assert b"r" * 16 not in payload


def test_viewer_response_opens_only_for_its_user(store, service):
    store.store_match(record(ALICE, 0, b"alice data"))
    token = authenticate(service, ALICE)
    count, envelope = service.fetch_matches(token.token_id)
    body = decode_frame(encode_viewer_resp(count, envelope.nonce, envelope.ciphertext))[1]
    assert [match.start_offset for match in open_viewer_response(ALICE, token.token_id, body)] == [0]
    with pytest.raises(AuthFailure):
        open_viewer_response(BOB, token.token_id, body)


def test_wrong_key_is_refused(service):
    challenge = service.issue_challenge(ALICE.user_id)
    with pytest.raises(AuthFailed):
        service.viewer_authenticate(ALICE.user_id, mac(viewer_auth_key(BOB.key, ALICE.user_id), challenge))
    with pytest.raises(AuthFailed):
        service.viewer_authenticate(ALICE.user_id, mac(viewer_auth_key(ALICE.key, ALICE.user_id), challenge))


def test_unknown_user_is_refused(service):
    stranger = UserKey.generate()
    service.issue_challenge(stranger.user_id)
    with pytest.raises(UnknownUser):
        service.viewer_authenticate(stranger.user_id, b"\x00" * 32)


def test_tokens_are_single_use(service):
    token = authenticate(service, ALICE)
    service.fetch_matches(token.token_id)
    with pytest.raises(TokenUnknown):
        service.fetch_matches(token.token_id)
    with pytest.raises(TokenUnknown):
        service.fetch_matches(b"t" * 16)


def test_tokens_expire(service, now):
    token = authenticate(service, ALICE)
    assert token.expiry == 15_000
    now[0] = 15_001
    with pytest.raises(TokenExpired):
        service.fetch_matches(token.token_id)


def test_hex_dump():
    assert hex_dump(b"AB\x00") == "0000  41 42 00" + " " * 40 + " AB."
    assert len(hex_dump(bytes(40)).splitlines()) == 3
    assert hex_dump(b"") == ""
