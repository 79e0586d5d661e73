"""Provides the match viewer client.

The viewer proves knowledge of the user key to the enclave, fetches the
user's matched traffic parts and shows them as offsets plus hex and ASCII
dumps. Which rule matched is never part of the response.
"""

import logging

from rich.console import Console
from rich.table import Table

from match_record import ViewerMatch, decode_viewer_matches
from pri_agent import ChannelFailure, Transport, UserKey
from pri_crypto import AuthFailure, Envelope, aead_open, mac
from pri_match_store import viewer_auth_key, viewer_response_key
from pri_wire import (
    MsgType,
    WireFormatError,
    decode_error,
    decode_frame,
    decode_viewer_challenge,
    decode_viewer_resp,
    decode_viewer_token,
    encode_viewer_auth,
    encode_viewer_fetch,
    encode_viewer_hello,
)

logger = logging.getLogger(__name__)


def open_viewer_response(user: UserKey, token_id: bytes, body: bytes) -> list[ViewerMatch]:
    """Decrypts a ViewerResp body.

    Raises:
        AuthFailure: Raised when the response was not sealed for this user and token.
    """
    count, nonce, ciphertext = decode_viewer_resp(body)
    payload: bytes = aead_open(
        viewer_response_key(user.key, token_id), nonce, token_id, Envelope(nonce, ciphertext)
    )
    matches: list[ViewerMatch] = decode_viewer_matches(payload)
    if len(matches) != count:
        raise AuthFailure("Viewer response count does not match its contents.")
    return matches


def hex_dump(data: bytes, width: int = 16) -> str:
    lines: list[str] = []
    for offset in range(0, len(data), width):
        row: bytes = data[offset : offset + width]
        text: str = "".join(chr(byte) if 32 <= byte < 127 else "." for byte in row)
        lines.append(f"{offset:04x}  {row.hex(' '):<{width * 3}} {text}")
    return "\n".join(lines)


class Viewer:
    """One user's view of their own matched traffic."""

    def __init__(self, user: UserKey, transport: Transport, address: str, enclave_address: str = "enclave") -> None:
        self.user: UserKey = user
        self.transport: Transport = transport
        self.address: str = address
        self.enclave_address: str = enclave_address

    def _exchange(self, frame: bytes, expected: MsgType) -> bytes:
        self.transport.send(self.address, self.enclave_address, frame)
        try:
            msg_type, body, _ = decode_frame(self.transport.receive(self.address))
        except WireFormatError as e:
            raise ChannelFailure("Unreadable reply from the enclave.") from e
        if msg_type == MsgType.ERROR:
            raise ChannelFailure(f"Enclave reported {decode_error(body)[1]}.")
        if msg_type != expected:
            raise ChannelFailure(f"Expected {expected.name}, got {msg_type.name}.")
        return body

    def fetch(self) -> list[ViewerMatch]:
        """Runs challenge, authentication and fetch.

        Raises:
            ChannelFailure: Raised when the enclave refuses, e.g. with AuthFailed.

        Returns:
            list[ViewerMatch]: The user's matches in storage order.
        """
        uid: bytes = self.user.user_id
        challenge: bytes = decode_viewer_challenge(self._exchange(encode_viewer_hello(uid), MsgType.VIEWER_CHALLENGE))
        tag: bytes = mac(viewer_auth_key(self.user.key, uid), challenge)
        token_id, _ = decode_viewer_token(self._exchange(encode_viewer_auth(uid, tag), MsgType.VIEWER_TOKEN))
        body: bytes = self._exchange(encode_viewer_fetch(token_id), MsgType.VIEWER_RESP)
        matches: list[ViewerMatch] = open_viewer_response(self.user, token_id, body)
        logger.info("fetched %d matches for user %s", len(matches), uid.hex())
        return matches


def render_matches(matches: list[ViewerMatch], console: Console | None = None) -> None:
    """Prints matches as a table of offsets and dumps."""
    console = console or Console()
    table: Table = Table(title=f"Matched traffic ({len(matches)})")
    table.add_column("Session", style="cyan", no_wrap=True)
    table.add_column("Offsets", justify="right")
    table.add_column("Stored (ms)", justify="right")
    table.add_column("Bytes", style="green")
    for match in matches:
        table.add_row(
            match.session_id.hex(),
            f"[{match.start_offset}, {match.end_offset})",
            str(match.timestamp),
            hex_dump(match.matched_bytes),
        )
    console.print(table)
