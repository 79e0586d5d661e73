"""Provides the simulated network and the scenario runner.

Provides `SimNetwork`, the in-process network connecting endpoints, agents,
issuers, viewers, the enclave server and the SIM sink (optionally pushing
every frame through a loopback socket pair), the traffic helpers
`generate_traffic`, `plant_marker`, `segment` and `tap_duplicate`, the
confidentiality scanner `scan_wire_log`, and `run_scenario`, which plays a
JSON scenario end to end and checks the run against a brute-force oracle.

A scenario file is a JSON object:

    {
      "name": "basic",
      "seed": 1,
      "mode": "detect" | "prevent",
      "transport": "inproc" | "loopback",
      "thresholds": {"theta_static": 0.0001, "theta_dynamic": 0.001},
      "audit": true,
      "scan": true,
      "users": [{"name": "alice", "key_seed": 11}],
      "issuers": [{"name": "corp", "rule_file": "rules/basic.rules"},
                  {"name": "cert", "rules": ["<authoring line>", ...]}],
      "sessions": [{"name": "s1", "owner": "alice",
                    "plaintext": {"literal": "..."} | {"file": "..."} |
                                 {"generated": {"seed": 3, "length": 4096, "alphabet": "english"}},
                    "markers": [{"offset": 100}, {"offset": 900, "text": "..."}],
                    "record_sizes": [1500, 7],
                    "key_first": true}],
      "faults": {"tamper_record": [{"session": "s1", "seq": 0}],
                 "withhold_key": ["s2"], "replay_key_delivery": ["s3"],
                 "wrong_measurement": false}
    }

Relative file paths are resolved against the scenario file's directory.
"""

import bisect
import hashlib
import json
import logging
import os
import random
import shutil
import socket
import tempfile
import time
from collections import Counter, defaultdict, deque
from itertools import cycle
from typing import Any, Iterable

from alert_record import Alert, AlertType
from pri_agent import Agent, AttestationRejected, ChannelFailure, EnclaveClient, SessionKey, UserKey
from pri_crypto import SymKey
from pri_enclave import HostInterface, Measurement, Platform
from pri_inspector import InspectionMode, SessionSummary, open_record, seal_record
from pri_issuer import PolicyIssuer
from pri_logging import LogCapture
from pri_matcher import oracle_matches
from pri_policy import AuditReport
from pri_server import EnclaveServer
from pri_settings import BASE_DIR, Settings, load_settings
from pri_viewer import Viewer
from pri_wire import (
    ID_SIZE,
    Direction,
    KeyDeliveryMessage,
    MsgType,
    TrafficRecord,
    WireFormatError,
    WireLog,
    decode_error,
    decode_forward,
    decode_frame,
    encode_audit_request,
    encode_session_close,
)
from rule_record import Rule, RuleAction, RuleError, RuleKind, parse_rule_lines, read_rule_file
from sim_sink_database import SimSink, SimSinkDatabase

logger = logging.getLogger(__name__)

ALPHABETS: tuple[str, ...] = ("bytes", "ascii", "english")
MARKER_SIZE: int = 16
MIN_SECRET_LENGTH: int = 4
MAX_KEY_DELIVERY_FRAME: int = 128
_ASCII: bytes = bytes(range(32, 127)) + b"\n"
_LOOPBACK_CHUNK: int = 32 * 1024

_LINKS: dict[tuple[str, str], Direction] = {
    ("agent", "enclave"): Direction.AGENT_TO_ENCLAVE,
    ("enclave", "agent"): Direction.ENCLAVE_TO_AGENT,
    ("issuer", "enclave"): Direction.ISSUER_TO_ENCLAVE,
    ("enclave", "issuer"): Direction.ENCLAVE_TO_ISSUER,
    ("viewer", "enclave"): Direction.VIEWER_TO_ENCLAVE,
    ("enclave", "viewer"): Direction.ENCLAVE_TO_VIEWER,
    ("admin", "enclave"): Direction.ADMIN_TO_ENCLAVE,
    ("enclave", "admin"): Direction.ENCLAVE_TO_ADMIN,
    ("tap", "enclave"): Direction.TAP_TO_INSPECTOR,
    ("enclave", "tap"): Direction.INSPECTOR_TO_TAP,
    ("endpoint", "network"): Direction.ENDPOINT_TO_NETWORK,
    ("network", "endpoint"): Direction.NETWORK_TO_ENDPOINT,
    ("enclave", "endpoint"): Direction.ENCLAVE_TO_ENDPOINT,
    ("enclave", "sim"): Direction.ENCLAVE_TO_SIM,
}


class HarnessError(Exception):
    """Base class for simulation harness errors."""


class ScenarioParseError(HarnessError):
    """Exception raised when a scenario file is malformed or inconsistent."""


class LengthExceeded(HarnessError):
    """Exception raised when generated traffic would exceed the length limit."""


class ComponentCrash(HarnessError):
    """Exception raised when a simulated component fails unexpectedly."""

    def __init__(self, name: str, reason: str) -> None:
        self.name: str = name
        super().__init__(f"{name} crashed: {reason}")


def name_id(kind: str, name: str) -> bytes:
    """Stable 16-byte identifier for a named scenario entity."""
    return hashlib.sha256(f"PRI1-{kind}:{name}".encode("utf-8")).digest()[:ID_SIZE]


# Traffic


def generate_traffic(
    length: int,
    seed: int | str,
    alphabet: str = "bytes",
    corpus: bytes | None = None,
    max_length: int = 64 << 20,
) -> bytes:
    """Generates a reproducible plaintext stream.

    Args:
        length (int): Number of bytes.
        seed (int | str): Seed of the generator.
        alphabet (str): `bytes` (uniform), `ascii` (printable) or `english`
            (chunks sampled from `corpus`).
        corpus (bytes | None): Reference text for the `english` alphabet.
        max_length (int): Upper bound on `length`.

    Raises:
        LengthExceeded: Raised when `length` is above `max_length`.
        HarnessError: Raised for an unknown alphabet or a missing corpus.

    Returns:
        bytes: The stream; equal seeds give equal bytes.
    """
    if length > max_length:
        raise LengthExceeded(f"Requested {length} bytes, the limit is {max_length}.")
    rng: random.Random = random.Random(seed)
    match alphabet:
        case "bytes":
            return rng.randbytes(length)
        case "ascii":
            return bytes(rng.choices(_ASCII, k=length))
        case "english":
            if not corpus:
                raise HarnessError("The english alphabet needs a non-empty corpus.")
            parts: list[bytes] = []
            total: int = 0
            while total < length:
                start: int = rng.randrange(len(corpus))
                piece: bytes = corpus[start : start + rng.randint(64, 1024)]
                parts.append(piece)
                total += len(piece)
            return b"".join(parts)[:length]
        case _:
            raise HarnessError(f"Unknown alphabet '{alphabet}'.")


def plant_marker(plaintext: bytes, marker: bytes, offset: int) -> bytes:
    """Inserts `marker` so that it starts at `offset`."""
    if not 0 <= offset <= len(plaintext):
        raise ValueError(f"Marker offset {offset} is outside a {len(plaintext)}-byte stream.")
    return plaintext[:offset] + marker + plaintext[offset:]


def segment(plaintext: bytes, record_sizes: list[int]) -> list[bytes]:
    """Cuts a stream into record payloads, cycling through `record_sizes`."""
    chunks: list[bytes] = []
    offset: int = 0
    for size in cycle(record_sizes):
        if offset >= len(plaintext):
            break
        chunks.append(plaintext[offset : offset + size])
        offset += size
    return chunks


def tap_duplicate(frames: Iterable[bytes]) -> tuple[list[bytes], list[bytes]]:
    """Splits a record stream into the destination's copy and the inspector's copy."""
    to_destination: list[bytes] = []
    to_inspector: list[bytes] = []
    for frame in frames:
        to_destination.append(bytes(frame))
        to_inspector.append(bytes(frame))
    return to_destination, to_inspector


# Confidentiality scan


class Secrets:
    """Byte strings that must never be visible to the host."""

    def __init__(self) -> None:
        self.items: list[tuple[str, str, bytes]] = []

    def add_key(self, label: str, key: bytes) -> None:
        self.items.append(("key", label, bytes(key)))
        self.items.append(("key", label + " (hex)", bytes(key).hex().encode("ascii")))

    def add_pattern(self, label: str, pattern: bytes) -> None:
        self.items.append(("pattern", label, bytes(pattern)))

    def add_marker(self, label: str, marker: bytes) -> None:
        self.items.append(("marker", label, bytes(marker)))

    def __len__(self) -> int:
        return len(self.items)


class Violation:
    """One secret found in host-visible data."""

    def __init__(self, source: str, kind: str, label: str, offset: int) -> None:
        self.source: str = source
        self.kind: str = kind
        self.label: str = label
        self.offset: int = offset

    def __iter__(self):
        yield "source", self.source
        yield "kind", self.kind
        yield "label", self.label
        yield "offset", self.offset

    def to_dict(self) -> dict:
        return dict(self)

    def __repr__(self) -> str:
        return f"Violation({self.kind} '{self.label}' in {self.source} at {self.offset})"


def _scan_parts(
    parts: list[tuple[str, bytes]], secrets: Secrets, min_length: int
) -> list[Violation]:
    # Hits straddling two parts are discarded below
    starts: list[int] = []
    position: int = 0
    for _, data in parts:
        starts.append(position)
        position += len(data) + 1
    blob: bytes = b"\x00".join(data for _, data in parts)

    violations: list[Violation] = []
    for kind, label, value in secrets.items:
        if len(value) < min_length:
            continue
        hit: int = blob.find(value)
        while hit != -1:
            index: int = bisect.bisect_right(starts, hit) - 1
            source, data = parts[index]
            offset: int = hit - starts[index]
            if offset + len(value) <= len(data):
                violations.append(Violation(source, kind, label, offset))
            hit = blob.find(value, hit + 1)
    return violations


def scan_bytes(source: str, data: bytes, secrets: Secrets, min_length: int = MIN_SECRET_LENGTH) -> list[Violation]:
    """Returns every occurrence of a secret in one byte string."""
    return _scan_parts([(source, bytes(data))], secrets, min_length)


def scan_wire_log(log: WireLog, secrets: Secrets, min_length: int = MIN_SECRET_LENGTH) -> list[Violation]:
    """Returns every occurrence of a secret of at least `min_length` bytes in the logged frames.

    An empty list means no host-visible frame carried any secret.
    """
    parts: list[tuple[str, bytes]] = [(f"frame {seq} {direction.name}", frame) for seq, direction, frame in log]
    return _scan_parts(parts, secrets, min_length)


# Network


class Endpoint:
    """The destination of one session; decrypts whatever reaches it."""

    def __init__(self, session: SessionKey) -> None:
        self.session: SessionKey = session
        self.records: list[TrafficRecord] = []

    def receive(self, record: TrafficRecord) -> None:
        self.records.append(record)

    def plaintext(self) -> bytes:
        return b"".join(open_record(self.session.key, record) for record in self.records)


class SimNetwork:
    """In-process network with ordered per-address inboxes.

    Addresses are `enclave`, `sim`, `network`, `endpoint` (the enclave's
    forwarding port), `admin`, `tap` and `<role>:<name>` for agents,
    issuers, viewers and endpoints. Every frame is logged before delivery.
    """

    def __init__(self, loopback: bool = False) -> None:
        self.wire_log: WireLog = WireLog()
        self.inboxes: defaultdict[str, deque[bytes]] = defaultdict(deque)
        self.endpoints: dict[bytes, Endpoint] = {}
        self.server: EnclaveServer | None = None
        self.sink: SimSink | None = None
        self._sockets: tuple[socket.socket, socket.socket] | None = socket.socketpair() if loopback else None

    def __enter__(self) -> "SimNetwork":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def close(self) -> None:
        if self._sockets is not None:
            for sock in self._sockets:
                sock.close()
            self._sockets = None
        if self.sink is not None and self.sink.database is not None:
            self.sink.database.close()

    def attach(self, server: EnclaveServer, sink: SimSink) -> None:
        self.server = server
        self.sink = sink

    def add_endpoint(self, endpoint: Endpoint) -> None:
        self.endpoints[endpoint.session.session_id] = endpoint

    @staticmethod
    def _direction(source: str, destination: str) -> Direction:
        link: tuple[str, str] = (source.split(":")[0], destination.split(":")[0])
        if link not in _LINKS:
            raise HarnessError(f"No link from {source} to {destination}.")
        return _LINKS[link]

    def _carry(self, frame: bytes) -> bytes:
        if self._sockets is None:
            return bytes(frame)
        writer, reader = self._sockets
        received: bytearray = bytearray()
        for start in range(0, len(frame), _LOOPBACK_CHUNK):
            chunk: bytes = frame[start : start + _LOOPBACK_CHUNK]
            writer.sendall(chunk)
            while len(received) < start + len(chunk):
                received += reader.recv(start + len(chunk) - len(received))
        return bytes(received)

    def send(self, source: str, destination: str, frame: bytes) -> None:
        """Logs a frame and delivers it.

        Raises:
            ComponentCrash: Raised when the receiving component fails unexpectedly.
        """
        direction: Direction = self._direction(source, destination)
        frame = self._carry(frame)
        self.wire_log.record(direction, frame)

        if destination == "enclave":
            try:
                self.server.handle(frame, source)
            except HarnessError:
                raise
            except Exception as e:
                raise ComponentCrash("enclave", type(e).__name__) from e
        elif destination == "sim":
            try:
                self.sink.receive(frame)
            except WireFormatError as e:
                raise ComponentCrash("sim", str(e)) from e
        elif destination == "network":
            pass
        elif destination == "endpoint":
            _, body, _ = decode_frame(frame)
            record: TrafficRecord = decode_forward(body)
            self.endpoints[record.session_id].receive(record)
        elif destination.startswith("endpoint:"):
            record = TrafficRecord.from_frame(frame)
            self.endpoints[record.session_id].receive(record)
        else:
            self.inboxes[destination].append(frame)

    def receive(self, address: str) -> bytes:
        inbox: deque[bytes] = self.inboxes[address]
        if not inbox:
            raise ChannelFailure(f"No frame waiting for {address}.")
        return inbox.popleft()

    def drain(self, address: str) -> list[bytes]:
        inbox: deque[bytes] = self.inboxes[address]
        frames: list[bytes] = list(inbox)
        inbox.clear()
        return frames


# Scenarios


class UserPlan:
    def __init__(self, name: str, key_seed: int | None = None) -> None:
        self.name: str = name
        self.user_id: bytes = name_id("user", name)
        self.key_seed: int | None = key_seed

    def user_key(self) -> UserKey:
        if self.key_seed is None:
            return UserKey.generate(self.user_id)
        return UserKey.from_seed(self.user_id, self.key_seed)


class IssuerPlan:
    def __init__(self, name: str, rules: list[Rule]) -> None:
        self.name: str = name
        self.issuer_id: bytes = name_id("issuer", name)
        self.rules: list[Rule] = rules


class SessionPlan:
    def __init__(
        self,
        name: str,
        owner: str,
        plaintext: dict[str, Any],
        markers: list[dict[str, Any]],
        record_sizes: list[int],
        key_first: bool = True,
    ) -> None:
        self.name: str = name
        self.session_id: bytes = name_id("session", name)
        self.owner: str = owner
        self.plaintext: dict[str, Any] = plaintext
        self.markers: list[dict[str, Any]] = markers
        self.record_sizes: list[int] = record_sizes
        self.key_first: bool = key_first


class Faults:
    def __init__(
        self,
        tamper_record: dict[str, int] | None = None,
        withhold_key: set[str] | None = None,
        replay_key_delivery: set[str] | None = None,
        wrong_measurement: bool = False,
    ) -> None:
        self.tamper_record: dict[str, int] = tamper_record or {}
        self.withhold_key: set[str] = withhold_key or set()
        self.replay_key_delivery: set[str] = replay_key_delivery or set()
        self.wrong_measurement: bool = wrong_measurement


class Scenario:
    """A parsed scenario file."""

    def __init__(
        self,
        name: str,
        seed: int,
        mode: InspectionMode,
        transport: str,
        users: list[UserPlan],
        issuers: list[IssuerPlan],
        sessions: list[SessionPlan],
        faults: Faults,
        thresholds: dict[str, float],
        audit: bool = True,
        scan: bool = True,
        base_dir: str = BASE_DIR,
    ) -> None:
        self.name: str = name
        self.seed: int = seed
        self.mode: InspectionMode = mode
        self.transport: str = transport
        self.users: list[UserPlan] = users
        self.issuers: list[IssuerPlan] = issuers
        self.sessions: list[SessionPlan] = sessions
        self.faults: Faults = faults
        self.thresholds: dict[str, float] = thresholds
        self.audit: bool = audit
        self.scan: bool = scan
        self.base_dir: str = base_dir

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: str = BASE_DIR, max_record_payload: int = 16384) -> "Scenario":
        """Builds a scenario from its JSON object.

        Raises:
            ScenarioParseError: Raised for missing fields, bad values or dangling references.
        """
        if not isinstance(data, dict):
            raise ScenarioParseError("A scenario must be a JSON object.")
        try:
            mode: InspectionMode = InspectionMode(data.get("mode", "detect"))
        except ValueError as e:
            raise ScenarioParseError(f"Unknown mode '{data.get('mode')}'.") from e
        transport: str = data.get("transport", "inproc")
        if transport not in ("inproc", "loopback"):
            raise ScenarioParseError(f"Unknown transport '{transport}'.")

        try:
            users: list[UserPlan] = [UserPlan(user["name"], user.get("key_seed")) for user in data.get("users", [])]
            issuers: list[IssuerPlan] = [
                IssuerPlan(issuer["name"], _issuer_rules(issuer, base_dir)) for issuer in data.get("issuers", [])
            ]
            sessions: list[SessionPlan] = [
                SessionPlan(
                    session["name"],
                    session["owner"],
                    session.get("plaintext", {"literal": ""}),
                    list(session.get("markers", [])),
                    [int(size) for size in session.get("record_sizes", [1500])],
                    bool(session.get("key_first", True)),
                )
                for session in data.get("sessions", [])
            ]
            raw_faults: dict[str, Any] = data.get("faults", {})
            faults: Faults = Faults(
                {entry["session"]: int(entry["seq"]) for entry in raw_faults.get("tamper_record", [])},
                set(raw_faults.get("withhold_key", [])),
                set(raw_faults.get("replay_key_delivery", [])),
                bool(raw_faults.get("wrong_measurement", False)),
            )
        except KeyError as e:
            raise ScenarioParseError(f"Missing field {e}.") from e
        except (TypeError, ValueError) as e:
            raise ScenarioParseError(f"Malformed scenario: {e}.") from e

        user_names: set[str] = {user.name for user in users}
        session_names: set[str] = {session.name for session in sessions}
        if len(user_names) != len(users) or len(session_names) != len(sessions):
            raise ScenarioParseError("User and session names must be unique.")
        for session in sessions:
            if session.owner not in user_names:
                raise ScenarioParseError(f"Session '{session.name}' names unknown user '{session.owner}'.")
            if not session.record_sizes or any(not 1 <= size <= max_record_payload for size in session.record_sizes):
                raise ScenarioParseError(f"Session '{session.name}' has record sizes outside 1..{max_record_payload}.")
            if not any(key in session.plaintext for key in ("literal", "file", "generated")):
                raise ScenarioParseError(f"Session '{session.name}' has no plaintext source.")
        for name in set(faults.tamper_record) | faults.withhold_key | faults.replay_key_delivery:
            if name not in session_names:
                raise ScenarioParseError(f"Fault names unknown session '{name}'.")

        thresholds: dict[str, float] = {
            key: float(value) for key, value in data.get("thresholds", {}).items()
        }
        if set(thresholds) - {"theta_static", "theta_dynamic"}:
            raise ScenarioParseError("Thresholds are theta_static and theta_dynamic.")
        return cls(
            data.get("name", "scenario"),
            int(data.get("seed", 0)),
            mode,
            transport,
            users,
            issuers,
            sessions,
            faults,
            thresholds,
            bool(data.get("audit", True)),
            bool(data.get("scan", True)),
            base_dir,
        )


def _issuer_rules(issuer: dict[str, Any], base_dir: str) -> list[Rule]:
    issuer_id: bytes = name_id("issuer", issuer["name"])
    try:
        if "rule_file" in issuer:
            path: str = issuer["rule_file"]
            return read_rule_file(path if os.path.isabs(path) else os.path.join(base_dir, path), issuer_id)
        return parse_rule_lines(list(issuer.get("rules", [])), issuer_id)
    except (RuleError, OSError) as e:
        raise ScenarioParseError(f"Rules of issuer '{issuer['name']}': {e}") from e


def load_scenario(file_path: str, max_record_payload: int = 16384) -> Scenario:
    """Reads a scenario file.

    Raises:
        ScenarioParseError: Raised when the file is unreadable or invalid.
    """
    try:
        with open(file_path, "r", encoding="utf-8") as file:
            data = json.load(file)
    except (OSError, json.JSONDecodeError) as e:
        raise ScenarioParseError(f"Cannot read scenario '{file_path}': {e}") from e
    return Scenario.from_dict(data, os.path.dirname(os.path.abspath(file_path)), max_record_payload)


# Reports


class SessionResult:
    """What happened to one session, as seen by the harness."""

    def __init__(self, plan: SessionPlan, chunks: list[bytes], frames: list[bytes]) -> None:
        self.plan: SessionPlan = plan
        self.chunks: list[bytes] = chunks
        self.frames: list[bytes] = frames
        self.summary: SessionSummary | None = None
        self.matches: set[tuple[bytes, int, int]] = set()
        self.forwarded: int = 0
        self.received: list[bytes] = []
        self.delivery_errors: list[str] = []

    def __iter__(self):
        yield "session_id", self.plan.session_id.hex()
        yield "owner", self.plan.owner
        yield "status", str(self.summary.status) if self.summary else "unseen"
        yield "records", len(self.frames)
        yield "forwarded", self.forwarded
        yield "match_count", len(self.matches)
        yield "matches", [[rule_id.hex(), start, end] for rule_id, start, end in sorted(self.matches)]
        yield "delivery_errors", list(self.delivery_errors)

    def to_dict(self) -> dict:
        return dict(self)


class RunReport:
    """Outcome of one scenario run. Free of keys, patterns and plaintext."""

    def __init__(self, scenario: Scenario, mode: InspectionMode) -> None:
        self.scenario: Scenario = scenario
        self.mode: InspectionMode = mode
        self.sessions: dict[str, SessionResult] = {}
        self.alerts: list[Alert] = []
        self.audit: AuditReport | None = None
        self.violations: list[Violation] = []
        self.invariant_failures: list[str] = []
        self.attestation_rejected: list[str] = []
        self.policy_rejections: list[str] = []
        self.viewer_counts: dict[str, int] = {}
        self.timings: dict[str, float] = {}
        self.wire_log: WireLog = WireLog()

    @property
    def exit_code(self) -> int:
        return 2 if self.invariant_failures or self.violations else 0

    def fail(self, message: str) -> None:
        logger.warning("invariant violated: %s", message)
        self.invariant_failures.append(message)

    def __iter__(self):
        yield "scenario", self.scenario.name
        yield "mode", str(self.mode)
        yield "transport", self.scenario.transport
        yield "exit_code", self.exit_code
        yield "sessions", {name: result.to_dict() for name, result in self.sessions.items()}
        yield "alerts", [alert.to_dict() for alert in self.alerts]
        yield "audit", None if self.audit is None else [entry.to_dict() for entry in self.audit]
        yield "attestation_rejected", list(self.attestation_rejected)
        yield "policy_rejections", list(self.policy_rejections)
        yield "viewer_counts", dict(self.viewer_counts)
        yield "violations", [violation.to_dict() for violation in self.violations]
        yield "invariant_failures", list(self.invariant_failures)
        yield "timings", dict(self.timings)

    def to_dict(self) -> dict:
        return dict(self)

    def write(self, file_path: str) -> None:
        with open(file_path, "w", encoding="utf-8") as file:
            json.dump(self.to_dict(), file, indent=4)

    def __repr__(self) -> str:
        return f"RunReport({self.scenario.name}, exit_code={self.exit_code})"


# Running


def _build_plaintext(scenario: Scenario, plan: SessionPlan, settings: Settings, corpus: bytes | None) -> tuple[bytes, list[bytes]]:
    source: dict[str, Any] = plan.plaintext
    if "literal" in source:
        plaintext: bytes = str(source["literal"]).encode("utf-8")
    elif "file" in source:
        try:
            with open(scenario.resolve(source["file"]), "rb") as file:
                plaintext = file.read()
        except OSError as e:
            raise ScenarioParseError(f"Session '{plan.name}': {e}") from e
    else:
        generated: dict[str, Any] = source["generated"]
        if generated.get("alphabet", "bytes") not in ALPHABETS:
            raise ScenarioParseError(f"Session '{plan.name}' uses an unknown alphabet.")
        plaintext = generate_traffic(
            int(generated.get("length", 0)),
            generated.get("seed", f"{scenario.seed}:{plan.name}"),
            generated.get("alphabet", "bytes"),
            corpus,
            settings.max_generated_length,
        )

    markers: list[bytes] = []
    last_end: int = 0
    for index, entry in enumerate(sorted(plan.markers, key=lambda marker: int(marker["offset"]))):
        offset: int = int(entry["offset"])
        if "text" in entry:
            marker: bytes = str(entry["text"]).encode("utf-8")
        elif "hex" in entry:
            marker = bytes.fromhex(entry["hex"])
        else:
            marker = random.Random(f"{scenario.seed}:{plan.name}:marker:{index}").randbytes(MARKER_SIZE)
        if offset < last_end or offset > len(plaintext):
            raise ScenarioParseError(f"Session '{plan.name}': marker offset {offset} overlaps or is out of range.")
        plaintext = plant_marker(plaintext, marker, offset)
        last_end = offset + len(marker)
        markers.append(marker)
    return plaintext, markers


def _read_corpus(settings: Settings) -> bytes | None:
    path: str = settings.resolve_path(settings.corpus_path)
    if not os.path.exists(path):
        return None
    with open(path, "rb") as file:
        return file.read()


def _final_position(rule: Rule, start: int, end: int) -> int:
    """Stream length at which a match is reported by the streaming matcher."""
    return end if rule.kind == RuleKind.exact else start + rule.max_span


def _record_bounds(chunks: list[bytes]) -> list[tuple[int, int]]:
    bounds: list[tuple[int, int]] = []
    offset: int = 0
    for chunk in chunks:
        bounds.append((offset, offset + len(chunk)))
        offset += len(chunk)
    return bounds


def run_scenario(
    path: str | Scenario,
    mode: InspectionMode | str | None = None,
    workdir: str | None = None,
    settings: Settings | None = None,
) -> RunReport:
    """Plays a scenario end to end and checks it against the oracle.

    Args:
        path (str | Scenario): Scenario file, or an already parsed scenario.
        mode (InspectionMode | str | None): Overrides the scenario's mode.
        workdir (str | None): Directory for the sealed store and the SIM
            database. A temporary directory is used when None.
        settings (Settings | None): Base settings. Defaults to `pri_settings.json`.

    Raises:
        ScenarioParseError: Raised when the scenario is invalid.
        ComponentCrash: Raised when a component fails unexpectedly.

    Returns:
        RunReport: The report; `exit_code` is 0 iff no check failed.
    """
    settings = settings or load_settings()
    scenario: Scenario = (
        path if isinstance(path, Scenario) else load_scenario(path, settings.max_record_payload)
    )
    if workdir is None:
        with tempfile.TemporaryDirectory(prefix="pri-") as temporary:
            return _run(scenario, mode, temporary, settings)
    return _run(scenario, mode, workdir, settings)


def _run(scenario: Scenario, mode: InspectionMode | str | None, workdir: str, settings: Settings) -> RunReport:
    mode = InspectionMode(mode or scenario.mode)
    settings = settings.with_overrides(
        store_dir=os.path.join(workdir, "store"),
        sim_database_path=os.path.join(workdir, "sim_alerts.sqlite"),
        **scenario.thresholds,
    )
    corpus: bytes | None = _read_corpus(settings)
    report: RunReport = RunReport(scenario, mode)
    secrets: Secrets = Secrets()
    started: float = time.perf_counter()

    # Sealed state of an earlier run is bound to another platform
    shutil.rmtree(settings.store_dir, ignore_errors=True)

    with LogCapture() as capture, SimNetwork(loopback=scenario.transport == "loopback") as network:
        platform: Platform = Platform.generate()
        host: HostInterface = HostInterface(
            lambda address, frame: network.send("enclave", address, frame), settings.store_dir
        )
        server: EnclaveServer = EnclaveServer(platform, settings, host, corpus=corpus, mode=mode)
        database: SimSinkDatabase = SimSinkDatabase(settings.sim_database_path)
        database.drop_table()
        sink: SimSink = SimSink(database)
        network.attach(server, sink)
        logger.info("scenario %s: %s mode over %s", scenario.name, mode, scenario.transport)

        # Issuers
        for plan in scenario.issuers:
            for rule in plan.rules:
                secrets.add_pattern(f"rule {rule.rule_id.hex()}", rule.pattern)
            client: EnclaveClient = EnclaveClient(
                network, f"issuer:{plan.name}", platform.root_public, server.measurement
            )
            try:
                PolicyIssuer(plan.issuer_id, client).submit(plan.rules)
            except ChannelFailure as e:
                report.policy_rejections.append(f"{plan.name}: {e}")

        # Users
        expected_measurement: Measurement = server.measurement
        if scenario.faults.wrong_measurement:
            expected_measurement = Measurement(hashlib.sha256(b"wrong" + server.measurement.digest).digest())
        agents: dict[str, Agent] = {}
        for plan in scenario.users:
            user: UserKey = plan.user_key()
            secrets.add_key(f"k_U {plan.name}", user.key.bytes)
            agent: Agent = Agent(
                user, EnclaveClient(network, f"agent:{plan.name}", platform.root_public, expected_measurement)
            )
            try:
                agent.register()
                agents[plan.name] = agent
            except AttestationRejected:
                report.attestation_rejected.append(plan.name)
        report.timings["setup_s"] = time.perf_counter() - started

        # Sessions
        users: dict[str, UserPlan] = {plan.name: plan for plan in scenario.users}
        plaintexts: dict[str, bytes] = {}
        session_keys: dict[str, SessionKey] = {}
        for plan in scenario.sessions:
            plaintext, markers = _build_plaintext(scenario, plan, settings, corpus)
            for index, marker in enumerate(markers):
                secrets.add_marker(f"marker {plan.name}/{index}", marker)
            session: SessionKey = SessionKey.generate(users[plan.owner].user_id, plan.session_id)
            secrets.add_key(f"k_S {plan.name}", session.key.bytes)
            chunks: list[bytes] = segment(plaintext, plan.record_sizes)
            frames: list[bytes] = [
                seal_record(session.key, plan.session_id, seq, chunk).to_frame() for seq, chunk in enumerate(chunks)
            ]
            tamper_seq: int | None = scenario.faults.tamper_record.get(plan.name)
            if tamper_seq is not None and not 0 <= tamper_seq < len(frames):
                raise ScenarioParseError(f"Session '{plan.name}' has no record {tamper_seq} to tamper with.")
            plaintexts[plan.name] = plaintext
            session_keys[plan.name] = session
            report.sessions[plan.name] = SessionResult(plan, chunks, frames)
            network.add_endpoint(Endpoint(session))

        def deliver_key(plan: SessionPlan) -> None:
            agent: Agent | None = agents.get(plan.owner)
            if agent is None or plan.name in scenario.faults.withhold_key:
                return
            message: KeyDeliveryMessage = agent.send_session_key(session_keys[plan.name])
            if plan.name in scenario.faults.replay_key_delivery:
                network.send(agent.client.address, "enclave", message.to_frame())
            for frame in network.drain(agent.client.address):
                msg_type, body, _ = decode_frame(frame)
                reason: str = decode_error(body)[1] if msg_type == MsgType.ERROR else msg_type.name
                report.sessions[plan.name].delivery_errors.append(reason)

        for plan in scenario.sessions:
            if plan.key_first:
                deliver_key(plan)

        queues: list[tuple[SessionPlan, deque[tuple[str, bytes, bytes | None, bytes]]]] = []
        for plan in scenario.sessions:
            frames = report.sessions[plan.name].frames
            address: str = f"endpoint:{plan.session_id.hex()}"
            steps: deque[tuple[str, bytes, bytes | None, bytes]] = deque()
            if mode == InspectionMode.detect:
                to_destination, to_inspector = tap_duplicate(frames)
            else:
                to_destination, to_inspector = [], list(frames)
            for seq, frame in enumerate(frames):
                inspected: bytes = to_inspector[seq]
                if scenario.faults.tamper_record.get(plan.name) == seq:
                    inspected = inspected[:-1] + bytes([inspected[-1] ^ 0x01])
                steps.append((address, frame, to_destination[seq] if to_destination else None, inspected))
            queues.append((plan, steps))

        # Round-robin across sessions, one record at a time
        while any(steps for _, steps in queues):
            for plan, steps in queues:
                if not steps:
                    continue
                address, original, destination_copy, inspector_copy = steps.popleft()
                network.send(address, "network", original)
                if destination_copy is not None:
                    network.send("network", address, destination_copy)
                network.send("tap", "enclave", inspector_copy)
                for frame in network.drain("tap"):
                    msg_type, body, _ = decode_frame(frame)
                    if msg_type == MsgType.ERROR:
                        report.fail(f"session {plan.name}: enclave rejected a record with {decode_error(body)[1]}")

        for plan in scenario.sessions:
            if not plan.key_first:
                deliver_key(plan)

        for plan in scenario.sessions:
            network.send("admin", "enclave", encode_session_close(plan.session_id))
            msg_type, body, _ = decode_frame(network.receive("admin"))
            if msg_type == MsgType.SESSION_SUMMARY:
                report.sessions[plan.name].summary = SessionSummary.from_body(body)
        report.timings["traffic_s"] = time.perf_counter() - started - report.timings["setup_s"]

        if scenario.audit:
            network.send("admin", "enclave", encode_audit_request())
            msg_type, body, _ = decode_frame(network.receive("admin"))
            if msg_type == MsgType.AUDIT_REPORT:
                report.audit = AuditReport.from_body(body)
            else:
                logger.warning("audit refused: %s", decode_error(body)[1])

        for name, agent in agents.items():
            viewer: Viewer = Viewer(agent.user, network, f"viewer:{name}")
            try:
                report.viewer_counts[name] = len(viewer.fetch())
            except ChannelFailure as e:
                report.fail(f"viewer of {name} failed: {e}")

        # Results as the enclave holds them
        for result in report.sessions.values():
            owner_id: bytes = users[result.plan.owner].user_id
            result.matches = {
                record.match.key()
                for record in server.match_store.load_matches(owner_id)
                if record.match.session_id == result.plan.session_id
            }
            endpoint: Endpoint = network.endpoints[result.plan.session_id]
            result.received = [record.to_frame() for record in endpoint.records]
            result.forwarded = len(endpoint.records)
            if mode == InspectionMode.detect and endpoint.plaintext() != plaintexts[result.plan.name]:
                report.fail(f"session {result.plan.name}: destination did not recover the plaintext")
        report.alerts = list(sink.alerts)
        inspector_alerts: list[Alert] = [
            Alert.from_body(decode_frame(frame)[1])
            for address, frame in host.sent
            if address == "sim" and decode_frame(frame)[0] == MsgType.ALERT
        ]

        _check_run(report, scenario, server, agents, plaintexts, inspector_alerts, settings)

        database.close()
        report.wire_log = network.wire_log
        if scenario.scan:
            report.violations = scan_wire_log(network.wire_log, secrets)
            report.violations += scan_bytes("log output", capture.as_bytes(), secrets)
            for name in sorted(os.listdir(settings.store_dir)):
                with open(os.path.join(settings.store_dir, name), "rb") as file:
                    report.violations += scan_bytes(f"storage {name}", file.read(), secrets)
            with open(settings.sim_database_path, "rb") as file:
                report.violations += scan_bytes("sim database", file.read(), secrets)
        report.timings["total_s"] = time.perf_counter() - started

    logger.info("scenario %s finished with exit code %d", scenario.name, report.exit_code)
    return report


def _check_run(
    report: RunReport,
    scenario: Scenario,
    server: EnclaveServer,
    agents: dict[str, Agent],
    plaintexts: dict[str, bytes],
    inspector_alerts: list[Alert],
    settings: Settings,
) -> None:
    """Compares the run with what a brute-force decrypt-then-scan predicts."""
    rules: list[Rule] = list(server.state.policy.rules)
    by_id: dict[bytes, Rule] = {rule.rule_id: rule for rule in rules}
    prevent: bool = report.mode == InspectionMode.prevent
    expected_alerts: Counter = Counter()

    delivery_counts: Counter = Counter(
        KeyDeliveryMessage.from_body(decode_frame(frame)[1]).session_id
        for frame in report.wire_log.frames(MsgType.KEY_DELIVERY)
    )
    for frame in report.wire_log.frames(MsgType.KEY_DELIVERY):
        if len(frame) > MAX_KEY_DELIVERY_FRAME:
            report.fail(f"key delivery of {len(frame)} bytes exceeds {MAX_KEY_DELIVERY_FRAME}")

    for name, result in report.sessions.items():
        plan: SessionPlan = result.plan
        sid: bytes = plan.session_id
        records: int = len(result.frames)
        keyed: bool = plan.owner in agents and name not in scenario.faults.withhold_key
        deliveries: int = 0 if not keyed else (2 if name in scenario.faults.replay_key_delivery else 1)
        if delivery_counts[sid] != deliveries:
            report.fail(f"session {name}: {delivery_counts[sid]} key deliveries, expected {deliveries}")
        if name in scenario.faults.replay_key_delivery and keyed and result.delivery_errors != ["ReplayedDelivery"]:
            report.fail(f"session {name}: replayed delivery answered with {result.delivery_errors}")

        ciphertext_total: int = 0
        overflow: bool = False
        for chunk in result.chunks:
            ciphertext_total += len(chunk) + 16
            overflow = overflow or ciphertext_total > settings.key_buffer_limit
        buffered_out: bool = not plan.key_first and overflow

        oracle: set[tuple[bytes, int, int]] = oracle_matches(rules, plaintexts[name])
        tamper_seq: int | None = scenario.faults.tamper_record.get(name)

        if not keyed or buffered_out:
            predicted: set[tuple[bytes, int, int]] = set()
            if records:
                expected_alerts[(AlertType.missing_key, bytes(ID_SIZE), sid)] += 1
            if result.forwarded and prevent:
                report.fail(f"session {name}: records forwarded without a key")
        elif tamper_seq is not None:
            boundary: int = _record_bounds(result.chunks)[tamper_seq][0]
            predicted = {
                (rule_id, start, end)
                for rule_id, start, end in oracle
                if _final_position(by_id[rule_id], start, end) <= boundary
            }
            expected_alerts[(AlertType.decrypt_fail, bytes(ID_SIZE), sid)] += 1
            if prevent and result.forwarded > tamper_seq:
                report.fail(f"session {name}: the tampered record or a later one was forwarded")
        else:
            predicted = oracle
        if prevent and result.received != result.frames[: len(result.received)]:
            report.fail(f"session {name}: forwarded records are not a bit-exact prefix")

        if prevent and keyed and not buffered_out and tamper_seq is None:
            _check_prevention(report, result, by_id, predicted)
        elif predicted != result.matches and not prevent:
            report.fail(f"session {name}: {len(result.matches)} matches, oracle predicts {len(predicted)}")
        elif prevent and not result.matches <= predicted:
            report.fail(f"session {name}: matches outside the oracle prediction")

        for rule_id, _, _ in result.matches if prevent else predicted:
            expected_alerts[(AlertType.match, rule_id, sid)] += 1

    sim_alerts: Counter = Counter(alert.key() for alert in report.alerts)
    reported: Counter = Counter(alert.key() for alert in inspector_alerts)
    if sim_alerts != reported:
        report.fail("SIM sink alerts differ from the alerts the inspector sent")
    if reported != expected_alerts:
        report.fail(f"{sum(reported.values())} alerts sent, {sum(expected_alerts.values())} predicted")

    for name, agent in agents.items():
        stored: int = len(server.match_store.load_matches(agent.user.user_id))
        if report.viewer_counts.get(name, stored) != stored:
            report.fail(f"viewer of {name} returned {report.viewer_counts[name]} of {stored} matches")

    if scenario.faults.wrong_measurement:
        if len(report.attestation_rejected) != len(scenario.users):
            report.fail("an agent accepted a quote with the wrong measurement")
        for _, direction, frame in report.wire_log:
            if direction == Direction.AGENT_TO_ENCLAVE and decode_frame(frame)[0] != MsgType.ATTEST_CHALLENGE:
                report.fail("an agent sent more than a challenge after its attestation was rejected")
                break


def _check_prevention(
    report: RunReport,
    result: SessionResult,
    by_id: dict[bytes, Rule],
    oracle: set[tuple[bytes, int, int]],
) -> None:
    """Checks the forwarded prefix and the alert bounds of a prevent-mode session."""
    name: str = result.plan.name
    bounds: list[tuple[int, int]] = _record_bounds(result.chunks)
    drop_ends: list[int] = [end for rule_id, _, end in oracle if by_id[rule_id].action == RuleAction.drop]
    if drop_ends:
        first_end: int = min(drop_ends)
        cut: int = next(index for index, (_, end) in enumerate(bounds) if end >= first_end)
    else:
        cut = len(bounds)
    if result.forwarded != cut:
        report.fail(f"session {name}: {result.forwarded} records forwarded, expected {cut}")
    if result.summary is not None and result.summary.forwarded != result.forwarded:
        report.fail(f"session {name}: summary and destination disagree on forwarded records")

    if cut < len(bounds):
        cut_offset: int = bounds[cut][0]
        required: set[tuple[bytes, int, int]] = {
            (rule_id, start, end)
            for rule_id, start, end in oracle
            if _final_position(by_id[rule_id], start, end) <= cut_offset
        }
    else:
        required = oracle
    if not required <= result.matches or not result.matches <= oracle:
        report.fail(f"session {name}: prevent-mode matches outside the oracle bounds")


class Workspace:
    """A directory holding a platform fixture, a sealed store and user key files.

    Lets separate CLI invocations talk to the same in-process enclave, which
    recovers its state from the sealed store on every start.
    """

    def __init__(self, directory: str, settings: Settings | None = None) -> None:
        self.directory: str = directory
        self.settings: Settings = (settings or load_settings()).with_overrides(
            store_dir=os.path.join(directory, "store"),
            sim_database_path=os.path.join(directory, "sim_alerts.sqlite"),
        )
        os.makedirs(os.path.join(directory, "users"), exist_ok=True)

    def platform(self) -> Platform:
        """Loads the platform fixture, creating it on first use."""
        path: str = os.path.join(self.directory, "platform.json")
        if os.path.exists(path):
            with open(path, "r") as file:
                return Platform.from_dict(json.load(file))
        platform: Platform = Platform.generate()
        with open(path, "w") as file:
            json.dump(platform.to_dict(), file, indent=4)
        return platform

    def start(self) -> tuple[EnclaveServer, SimNetwork]:
        """Starts the enclave on the workspace store and restores its sealed state."""
        network: SimNetwork = SimNetwork()
        host: HostInterface = HostInterface(
            lambda address, frame: network.send("enclave", address, frame), self.settings.store_dir
        )
        server: EnclaveServer = EnclaveServer(self.platform(), self.settings, host, corpus=_read_corpus(self.settings))
        server.restore()
        network.attach(server, SimSink(SimSinkDatabase(self.settings.sim_database_path)))
        return server, network

    def _user_path(self, name: str) -> str:
        return os.path.join(self.directory, "users", f"{name}.json")

    def save_user(self, name: str, user: UserKey) -> None:
        with open(self._user_path(name), "w") as file:
            json.dump({"user_id": user.user_id.hex(), "key": user.key.bytes.hex()}, file, indent=4)

    def load_user(self, name: str) -> UserKey:
        """Reads a user key file.

        Raises:
            HarnessError: Raised when the user was never registered from this workspace.
        """
        try:
            with open(self._user_path(name), "r") as file:
                data: dict[str, str] = json.load(file)
        except OSError as e:
            raise HarnessError(f"No key file for user '{name}'.") from e
        return UserKey(bytes.fromhex(data["user_id"]), SymKey(bytes.fromhex(data["key"])))
