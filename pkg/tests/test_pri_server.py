import hashlib
import os
import random

import pytest

from alert_record import AlertType
from conftest import RULE_DIR, exact, regex, rule_id
from pri_agent import Agent, AttestationRejected, ChannelFailure, CounterReuse, EnclaveClient, SessionKey, UserKey
from pri_enclave import HostInterface, Measurement
from pri_harness import Endpoint, SimNetwork, generate_traffic, plant_marker, segment
from pri_inspector import InspectionMode, SessionStatus, SessionSummary, seal_record
from pri_issuer import PolicyIssuer
from pri_policy import AuditReport
from pri_server import EnclaveServer, expected_measurement
from pri_viewer import Viewer
from pri_wire import (
    Direction,
    KeyDeliveryMessage,
    MsgType,
    decode_error,
    decode_frame,
    encode_ack,
    encode_audit_request,
    encode_register_user,
    encode_session_close,
)
from rule_record import RuleAction
from sim_sink_database import SimSink

ISSUER: bytes = b"\x11" * 16
ALICE: UserKey = UserKey.from_seed(b"a" * 16, 1)
BOB: UserKey = UserKey.from_seed(b"b" * 16, 2)


class Deployment:
    """An enclave server with its network, started on a given store."""

    def __init__(self, platform, settings, mode: InspectionMode = InspectionMode.detect) -> None:
        self.platform = platform
        self.network: SimNetwork = SimNetwork()
        self.host: HostInterface = HostInterface(
            lambda address, frame: self.network.send("enclave", address, frame), settings.store_dir
        )
        self.server: EnclaveServer = EnclaveServer(platform, settings, self.host, mode=mode, clock=lambda: 1000)
        self.sink: SimSink = SimSink()
        self.network.attach(self.server, self.sink)

    def client(self, address: str, measurement: Measurement | None = None) -> EnclaveClient:
        return EnclaveClient(self.network, address, self.platform.root_public, measurement or self.server.measurement)

    def agent(self, user: UserKey) -> Agent:
        agent = Agent(user, self.client(f"agent:{user.user_id.hex()}"))
        agent.register()
        return agent

    def error_from(self, address: str) -> str:
        msg_type, body, _ = decode_frame(self.network.receive(address))
        assert msg_type == MsgType.ERROR
        return decode_error(body)[1]


@pytest.fixture
def deployment(platform, settings) -> Deployment:
    return Deployment(platform, settings)


def stream(deployment: Deployment, session: SessionKey, chunks: list[bytes]) -> SessionSummary:
    for seq, chunk in enumerate(chunks):
        deployment.network.send("tap", "enclave", seal_record(session.key, session.session_id, seq, chunk).to_frame())
    deployment.network.send("admin", "enclave", encode_session_close(session.session_id))
    return SessionSummary.from_body(decode_frame(deployment.network.receive("admin"))[1])


def test_measurement_matches_the_published_value(deployment, settings):
    assert deployment.server.measurement == expected_measurement(settings)
    assert expected_measurement(settings) != expected_measurement(settings.with_overrides(max_span_cap=64))


def test_registration_happens_over_an_attested_channel(deployment):
    deployment.agent(ALICE)
    assert deployment.server.state.user_keys[ALICE.user_id].bytes == ALICE.key.bytes
    for _, direction, frame in deployment.network.wire_log:
        assert ALICE.key.bytes not in frame
        if direction == Direction.AGENT_TO_ENCLAVE:
            assert decode_frame(frame)[0] in (MsgType.ATTEST_CHALLENGE, MsgType.CHANNEL_OPEN, MsgType.CHANNEL_MSG)


def test_setup_messages_outside_a_channel_are_refused(deployment):
    deployment.network.send("agent:x", "enclave", encode_register_user(ALICE.user_id, ALICE.key.bytes))
    assert deployment.error_from("agent:x") == "ChannelRequired"
    assert ALICE.user_id not in deployment.server.state.user_keys


def test_unexpected_messages_get_an_error_frame(deployment):
    deployment.network.send("agent:x", "enclave", encode_ack(0))
    assert deployment.error_from("agent:x") == "UnexpectedMessage"
    deployment.network.send("agent:x", "enclave", b"PRI1\x10\x00")
    assert deployment.error_from("agent:x") == "WireFormatError"


def test_wrong_measurement_stops_the_agent_before_any_secret(deployment):
    wrong = Measurement(hashlib.sha256(b"other build").digest())
    agent = Agent(ALICE, deployment.client("agent:alice", wrong))
    with pytest.raises(AttestationRejected) as info:
        agent.register()
    assert info.value.reason == "MeasurementMismatch"
    sent = [frame for _, direction, frame in deployment.network.wire_log if direction == Direction.AGENT_TO_ENCLAVE]
    assert [decode_frame(frame)[0] for frame in sent] == [MsgType.ATTEST_CHALLENGE]
    assert ALICE.user_id not in deployment.server.state.user_keys


def test_key_delivery_is_a_single_small_frame(deployment):
    agent = deployment.agent(ALICE)
    message = agent.send_session_key(SessionKey.generate(ALICE.user_id))
    frames = deployment.network.wire_log.frames(MsgType.KEY_DELIVERY)
    assert frames == [message.to_frame()]
    assert len(frames[0]) == KeyDeliveryMessage.FRAME_SIZE
    with pytest.raises(CounterReuse):
        agent.export_session_key(SessionKey.generate(ALICE.user_id), 0)
    assert agent.export_session_key(SessionKey.generate(ALICE.user_id)).counter == 1


def test_replayed_delivery_is_answered_with_an_error(deployment):
    agent = deployment.agent(ALICE)
    message = agent.send_session_key(SessionKey.generate(ALICE.user_id))
    deployment.network.send(agent.client.address, "enclave", message.to_frame())
    assert deployment.error_from(agent.client.address) == "ReplayedDelivery"


def test_issuers_submit_and_withdraw_rules(deployment):
    issuer = PolicyIssuer(ISSUER, deployment.client("issuer:corp"))
    version = issuer.submit([exact(1, b"SECRET"), regex(2, b"card=[0-9]{4}", 16)])
    assert version == deployment.server.state.policy.version
    assert len(deployment.server.state.policy) == 2
    issuer.withdraw()
    assert len(deployment.server.state.policy) == 0
    for _, _, frame in deployment.network.wire_log:
        assert b"SECRET" not in frame and b"card=" not in frame


def test_colliding_bundle_is_rejected(deployment):
    PolicyIssuer(ISSUER, deployment.client("issuer:corp")).submit([exact(1, b"one")])
    with pytest.raises(ChannelFailure, match="DuplicateRuleId"):
        PolicyIssuer(b"\x22" * 16, deployment.client("issuer:cert")).submit([exact(1, b"uno")])
    assert [rule.issuer_id for rule in deployment.server.state.policy.rules] == [ISSUER]


def test_detection_end_to_end(deployment):
    PolicyIssuer(ISSUER, deployment.client("issuer:corp")).submit([exact(1, b"SECRET")])
    alice, bob = deployment.agent(ALICE), deployment.agent(BOB)
    session = SessionKey.generate(ALICE.user_id)
    alice.send_session_key(session)
    summary = stream(deployment, session, [b"xx SEC", b"RET yy"])

    assert summary.status == SessionStatus.closed and summary.match_count == 1
    assert [alert.key() for alert in deployment.sink.alerts] == [(AlertType.match, rule_id(1), session.session_id)]

    matches = Viewer(ALICE, deployment.network, "viewer:alice").fetch()
    assert [(match.start_offset, match.end_offset, match.matched_bytes) for match in matches] == [(3, 9, b"SECRET")]
    assert Viewer(BOB, deployment.network, "viewer:bob").fetch() == []
    assert bob.user.user_id in deployment.server.state.user_keys


def test_viewer_with_the_wrong_key_is_refused(deployment):
    deployment.agent(ALICE)
    impostor = UserKey(ALICE.user_id, BOB.key)
    with pytest.raises(ChannelFailure, match="AuthFailed"):
        Viewer(impostor, deployment.network, "viewer:mallory").fetch()


def test_prevent_mode_forwards_to_the_endpoint(platform, settings):
    deployment = Deployment(platform, settings, InspectionMode.prevent)
    PolicyIssuer(ISSUER, deployment.client("issuer:corp")).submit([exact(3, b"DROPME", RuleAction.drop)])
    agent = deployment.agent(ALICE)
    session = SessionKey.generate(ALICE.user_id)
    agent.send_session_key(session)
    endpoint = Endpoint(session)
    deployment.network.add_endpoint(endpoint)
    summary = stream(deployment, session, [b"fine", b"xDROPME", b"later"])
    assert [record.seq for record in endpoint.records] == [0]
    assert endpoint.plaintext() == b"fine"
    assert summary.status == SessionStatus.dropped


def test_audit_request_after_traffic(deployment):
    PolicyIssuer(ISSUER, deployment.client("issuer:corp")).submit([exact(1, b"e")])
    agent = deployment.agent(ALICE)
    session = SessionKey.generate(ALICE.user_id)
    agent.send_session_key(session)
    stream(deployment, session, [b"eeee" * 100])
    deployment.network.send("admin", "enclave", encode_audit_request())
    report = AuditReport.from_body(decode_frame(deployment.network.receive("admin"))[1])
    assert report.flagged() == [rule_id(1)]
    assert report[rule_id(1)].static_rate is None


def test_restarted_enclave_recovers_its_sealed_state(platform, settings):
    first = Deployment(platform, settings)
    PolicyIssuer(ISSUER, first.client("issuer:corp")).submit([exact(1, b"SECRET")])
    agent = first.agent(ALICE)
    session = SessionKey.generate(ALICE.user_id)
    agent.send_session_key(session)
    stream(first, session, [b"SECRET"])

    second = Deployment(platform, settings)
    second.server.restore()
    assert second.server.state.policy.version == first.server.state.policy.version
    assert second.server.state.user_keys[ALICE.user_id].bytes == ALICE.key.bytes
    assert second.server.state.stats.bytes_inspected == 6
    assert len(Viewer(ALICE, second.network, "viewer:alice").fetch()) == 1


def test_issuer_loads_its_rule_file(deployment):
    issuer = PolicyIssuer(ISSUER, deployment.client("issuer:corp"))
    rules = issuer.load(os.path.join(RULE_DIR, "drop.rules"))
    assert {rule.issuer_id for rule in rules} == {ISSUER}
    issuer.submit()
    assert sorted(rule.rule_id for rule in deployment.server.state.policy.rules) == sorted(rule.rule_id for rule in rules)
    with pytest.raises(ValueError):
        PolicyIssuer(b"short", deployment.client("issuer:x"))


def test_new_user_key_restarts_delivery_counters(deployment):
    agent = deployment.agent(ALICE)
    agent.send_session_key(SessionKey.generate(ALICE.user_id))
    agent.send_session_key(SessionKey.generate(ALICE.user_id))

    same_key = deployment.agent(ALICE)
    stale = SessionKey.generate(ALICE.user_id)
    same_key.send_session_key(stale)
    assert deployment.error_from(same_key.client.address) == "ReplayedDelivery"

    rotated = deployment.agent(UserKey.from_seed(ALICE.user_id, 99))
    assert rotated.user.user_id == ALICE.user_id
    fresh = SessionKey.generate(ALICE.user_id)
    rotated.send_session_key(fresh)
    assert deployment.server.inspector.sessions[fresh.session_id].key is not None
    assert stale.session_id not in deployment.server.inspector.sessions


@pytest.mark.slow
def test_ten_mebibytes_against_a_thousand_rules(deployment):
    rng = random.Random(12)
    rules = [exact(n, rng.randbytes(12)) for n in range(1, 1001)]
    rules += [regex(2000 + n, f"ZQ{n:02d}=[0-9]{{4}}".encode(), 16) for n in range(50)]
    rules.append(exact(5000, b"PLANTED-MARKER"))
    PolicyIssuer(ISSUER, deployment.client("issuer:corp")).submit(rules)
    agent = deployment.agent(ALICE)
    session = SessionKey.generate(ALICE.user_id)
    agent.send_session_key(session)

    plaintext = generate_traffic(10 << 20, 3, "ascii")
    plaintext = plant_marker(plaintext, b"PLANTED-MARKER", 4 << 20)
    plaintext = plant_marker(plaintext, b"ZQ07=1234", 8 << 20)
    summary = stream(deployment, session, segment(plaintext, [16384]))

    assert summary.bytes_inspected == len(plaintext)
    keys = {record.match.key() for record in deployment.server.match_store.load_matches(ALICE.user_id)}
    assert (rule_id(5000), 4 << 20, (4 << 20) + 14) in keys
    assert (rule_id(2007), 8 << 20, (8 << 20) + 9) in keys
