import hashlib
import os
import random

import pytest

from pri_crypto import AuthFailure, counter_nonce
from pri_enclave import (
    ENCLAVE_MODULES,
    MAX_PENDING_HANDSHAKES,
    AttestationQuote,
    BlobKind,
    EmptyManifest,
    EnclaveRuntime,
    HandshakeFailure,
    HostInterfaceViolation,
    ManifestEntry,
    Measurement,
    MeasurementMismatch,
    Platform,
    QuoteRejectReason,
    SealedBlob,
    enclave_manifest,
    establish_channel,
    measure,
    parse_sealed_blobs,
    verify_quote,
)
from pri_wire import MsgType, decode_frame, encode_frame

MANIFEST = [
    ManifestEntry("pri_inspector", "1.0.0", hashlib.sha256(b"inspector").digest()),
    ManifestEntry("pri_matcher", "1.0.0", hashlib.sha256(b"matcher").digest()),
]


def mutated(manifest: list[ManifestEntry], rng: random.Random) -> list[ManifestEntry]:
    entries = list(manifest)
    index = rng.randrange(len(entries))
    entry = entries[index]
    match rng.randrange(4):
        case 0:
            entries[index] = ManifestEntry(entry.name + "x", entry.version, entry.content_hash)
        case 1:
            entries[index] = ManifestEntry(entry.name, entry.version + ".1", entry.content_hash)
        case 2:
            flipped = bytearray(entry.content_hash)
            flipped[rng.randrange(32)] ^= 1 << rng.randrange(8)
            entries[index] = ManifestEntry(entry.name, entry.version, bytes(flipped))
        case _:
            entries.reverse()
    return entries


def test_measurement_is_deterministic():
    assert measure(MANIFEST) == measure(list(MANIFEST))
    assert measure(MANIFEST, b"a") != measure(MANIFEST, b"b")
    with pytest.raises(EmptyManifest):
        measure([])


def test_enclave_manifest_covers_modules_on_disk():
    manifest = enclave_manifest()
    assert [entry.name for entry in manifest] == list(ENCLAVE_MODULES)
    assert measure(manifest) == measure(enclave_manifest())


def test_quote_verifies(platform):
    quote = platform.quote(measure(MANIFEST), b"n" * 32, b"k" * 32)
    assert verify_quote(platform.root_public, measure(MANIFEST), b"n" * 32, quote).accepted


def test_quote_rejection_reasons(platform):
    measurement = measure(MANIFEST)
    quote = platform.quote(measurement, b"n" * 32, b"k" * 32)
    assert verify_quote(platform.root_public, measure(MANIFEST[:1]), b"n" * 32, quote).reason == (
        QuoteRejectReason.MeasurementMismatch
    )
    assert verify_quote(platform.root_public, measurement, b"m" * 32, quote).reason == QuoteRejectReason.NonceMismatch
    assert verify_quote(Platform.generate().root_public, measurement, b"n" * 32, quote).reason == (
        QuoteRejectReason.BadSignature
    )
    forged = AttestationQuote.from_body(quote.to_body())
    forged.enclave_ka_public = b"j" * 32
    assert verify_quote(platform.root_public, measurement, b"n" * 32, forged).reason == QuoteRejectReason.BadSignature
    truncated = AttestationQuote.from_body(quote.to_body())
    truncated.signature = truncated.signature[:10]
    assert not verify_quote(platform.root_public, measurement, b"n" * 32, truncated)


def test_attested_channel_round_trip(platform, host):
    runtime = EnclaveRuntime(platform, MANIFEST, host)
    quote = runtime.attest(b"c" * 32)
    verdict = verify_quote(platform.root_public, runtime.measurement, b"c" * 32, quote)
    client, client_public = establish_channel(quote, verdict)
    server = runtime.accept_channel(client_public, quote.enclave_ka_public)
    assert client.channel_id == server.channel_id

    frame = client.seal(b"register me")
    assert server.open(decode_frame(frame)[1]) == b"register me"
    with pytest.raises(AuthFailure):
        server.open(decode_frame(frame)[1])
    reply = server.seal(b"ok")
    assert client.open(decode_frame(reply)[1]) == b"ok"


def test_channel_needs_an_accepted_quote_and_a_fresh_key(platform, host):
    runtime = EnclaveRuntime(platform, MANIFEST, host)
    quote = runtime.attest(b"c" * 32)
    rejected = verify_quote(platform.root_public, measure(MANIFEST[:1]), b"c" * 32, quote)
    with pytest.raises(HandshakeFailure):
        establish_channel(quote, rejected)
    with pytest.raises(HandshakeFailure):
        runtime.accept_channel(b"x" * 32, b"not-issued-by-this-enclave-----!")


def test_abandoned_attestations_stay_bounded(platform, host):
    runtime = EnclaveRuntime(platform, MANIFEST, host)
    first = runtime.attest(b"0" * 32)
    for n in range(MAX_PENDING_HANDSHAKES * 3):
        runtime.attest(n.to_bytes(32, "big"))
    assert runtime.pending_handshakes == MAX_PENDING_HANDSHAKES
    verdict = verify_quote(platform.root_public, runtime.measurement, b"0" * 32, first)
    client, client_public = establish_channel(first, verdict)
    with pytest.raises(HandshakeFailure):
        runtime.accept_channel(client_public, first.enclave_ka_public)


def test_seal_unseal(platform, host):
    runtime = EnclaveRuntime(platform, MANIFEST, host)
    blob = runtime.seal(BlobKind.POLICY, b"rules")
    parsed, _ = SealedBlob.from_bytes(blob.to_bytes())
    assert runtime.unseal(parsed) == b"rules"
    assert runtime.seal(BlobKind.POLICY, b"rules").nonce != blob.nonce


def test_seal_nonces_count_up_across_restarts(platform, host):
    runtime = EnclaveRuntime(platform, MANIFEST, host)
    blobs = [runtime.seal(BlobKind.MATCH, bytes([n])) for n in range(5)]
    assert [blob.counter for blob in blobs] == [1, 2, 3, 4, 5]
    assert [blob.nonce for blob in blobs] == sorted(blob.nonce for blob in blobs)
    assert blobs[0].nonce == counter_nonce(1)
    host.append_storage("log", b"".join(blob.to_bytes() for blob in blobs[:3]))
    host.write_storage("state", blobs[4].to_bytes())

    restarted = EnclaveRuntime(platform, MANIFEST, host)
    assert restarted.seal_counter == 5
    assert restarted.seal(BlobKind.MATCH, b"later").counter == 6
    assert restarted.unseal(parse_sealed_blobs(host.read_storage("log"))[2]) == bytes([2])


def test_seal_counter_ignores_other_measurements(platform, host):
    other = EnclaveRuntime(platform, MANIFEST[:1], host)
    for _ in range(3):
        host.append_storage("log", other.seal(BlobKind.MATCH, b"x").to_bytes())
    with open(os.path.join(host.store_dir, "log"), "ab") as file:
        file.write(b"\x02\x00")
    assert EnclaveRuntime(platform, MANIFEST, host).seal_counter == 0
    assert EnclaveRuntime(platform, MANIFEST[:1], host).seal_counter == 3


def test_sealed_blob_is_bound_to_its_kind(platform, host):
    runtime = EnclaveRuntime(platform, MANIFEST, host)
    blob = runtime.seal(BlobKind.POLICY, b"rules")
    with pytest.raises(AuthFailure):
        runtime.unseal(SealedBlob(BlobKind.STATS, blob.measurement_binding, blob.envelope))


def test_sealing_does_not_survive_any_measurement_change(platform, host):
    runtime = EnclaveRuntime(platform, MANIFEST, host)
    blob = runtime.seal(BlobKind.MATCH, b"matched bytes")
    rng = random.Random(7)
    for _ in range(100):
        other = EnclaveRuntime(platform, mutated(MANIFEST, rng), host)
        assert other.measurement != runtime.measurement
        with pytest.raises(MeasurementMismatch):
            other.unseal(blob)
        forged = SealedBlob(blob.kind, other.measurement.digest, blob.envelope)
        with pytest.raises(AuthFailure):
            other.unseal(forged)


def test_sealing_is_bound_to_the_platform(host):
    blob = EnclaveRuntime(Platform.generate(), MANIFEST, host).seal(BlobKind.MATCH, b"x")
    with pytest.raises(AuthFailure):
        EnclaveRuntime(Platform.generate(), MANIFEST, host).unseal(blob)


def test_host_interface_only_lets_allowed_frames_out(host, outbox):
    host.send("sim", encode_frame(MsgType.ALERT, b"body"))
    assert outbox.to("sim") == [encode_frame(MsgType.ALERT, b"body")]
    with pytest.raises(HostInterfaceViolation):
        host.send("agent:x", encode_frame(MsgType.REGISTER_USER, b"k" * 48))
    with pytest.raises(HostInterfaceViolation):
        host.send("sim", b"plain text")
    with pytest.raises(HostInterfaceViolation):
        host.send("sim", encode_frame(MsgType.ALERT, b"body") + b"tail")


def test_host_storage_accepts_only_sealed_blobs(platform, host):
    runtime = EnclaveRuntime(platform, MANIFEST, host)
    data = runtime.seal(BlobKind.MATCH, b"a").to_bytes()
    host.append_storage("log", data)
    host.append_storage("log", data)
    assert len(parse_sealed_blobs(host.read_storage("log"))) == 2
    with pytest.raises(HostInterfaceViolation):
        host.write_storage("log", b"not sealed")
    with pytest.raises(HostInterfaceViolation):
        host.write_storage("../escape", data)
    assert host.read_storage("missing") is None
    assert host.storage_names() == ["log"]


def test_platform_fixture_round_trip(platform):
    restored = Platform.from_dict(platform.to_dict())
    assert restored.root_public == platform.root_public
    assert Measurement(b"\x01" * 32).hex() == "01" * 32
