"""Provides the policy issuer client.

A policy issuer authors confidential rules, attests the enclave and submits
them over an attested channel; the enclave merges them with the other issuers'
rules. Neither the host nor the users ever see the patterns.
"""

import logging

from pri_agent import EnclaveClient
from rule_record import RULE_ID_SIZE, Rule, encode_bundle, read_rule_file
from pri_wire import encode_policy_submit

logger = logging.getLogger(__name__)


def submit_policy(client: EnclaveClient, issuer_id: bytes, rules: list[Rule]) -> bytes:
    """Submits an issuer's complete rule set over an attested channel.

    Args:
        client (EnclaveClient): Client of the issuer; connects if needed.
        issuer_id (bytes): The issuer.
        rules (list[Rule]): Rules that replace the issuer's previous set.

    Raises:
        AttestationRejected: Raised when the enclave does not attest; nothing is sent.
        ChannelFailure: Raised when the enclave rejects the bundle.

    Returns:
        bytes: The version of the enclave's new policy.
    """
    version: bytes = client.request(encode_policy_submit(issuer_id, encode_bundle(rules)))
    logger.info("issuer %s submitted %d rules, policy %s", issuer_id.hex(), len(rules), version.hex()[:16])
    return version


class PolicyIssuer:
    """An issuer of confidential inspection rules."""

    def __init__(self, issuer_id: bytes, client: EnclaveClient) -> None:
        if len(issuer_id) != RULE_ID_SIZE:
            raise ValueError("An issuer id is exactly 16 bytes.")
        self.issuer_id: bytes = bytes(issuer_id)
        self.client: EnclaveClient = client
        self.rules: list[Rule] = []

    def load(self, file_path: str) -> list[Rule]:
        """Reads the issuer's rules from an authoring-format file."""
        self.rules = read_rule_file(file_path, self.issuer_id)
        return self.rules

    def submit(self, rules: list[Rule] | None = None) -> bytes:
        if rules is not None:
            self.rules = list(rules)
        return submit_policy(self.client, self.issuer_id, self.rules)

    def withdraw(self) -> bytes:
        """Removes all of this issuer's rules from the enclave policy."""
        self.rules = []
        return submit_policy(self.client, self.issuer_id, [])
