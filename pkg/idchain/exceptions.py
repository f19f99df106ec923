"""idchain exception classes."""

from typing import Optional


class IdChainError(Exception):
    """Base exception class for idchain errors."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self):
        return f"{self.message}"


# Hierarchical deterministic keys


class InvalidSeedError(IdChainError, ValueError):
    """Seed length is outside the accepted range."""


class DerivationError(IdChainError):
    """Child key derivation failed."""


class HardenedDerivationError(DerivationError):
    """A hardened child was requested from an extended public key."""

    def __init__(self, index: int):
        super().__init__(
            f"Cannot derive hardened child {index} from an extended public key"
        )
        self.index = index


class DepthOverflowError(DerivationError):
    """Derivation would exceed the maximum tree depth of 255."""


class KeyFormatError(IdChainError, ValueError):
    """Serialized key material could not be decoded."""


# Identity-based conditional proxy re-encryption


class IbcpreError(IdChainError):
    """Base class for IBCPRE errors."""


class UnsupportedParameterError(IbcpreError, ValueError):
    """Security parameter is not supported."""


class InvalidIdentityError(IbcpreError, ValueError):
    """Identity string is empty."""


class UnknownIdentityError(IbcpreError, LookupError):
    """No public key has been published for the identity."""


class PlaintextTooLargeError(IbcpreError, ValueError):
    """Plaintext exceeds the maximum envelope size."""


class EmptyConditionError(IbcpreError, ValueError):
    """Condition tag is empty or too long."""


class SelfDelegationError(IbcpreError, ValueError):
    """Delegator and delegatee identities are the same."""


class ReEncryptionError(IbcpreError):
    """Proxy re-encryption was refused."""


class LevelMismatchError(ReEncryptionError):
    """Envelope has already been re-encrypted."""


class IdentityMismatchError(ReEncryptionError):
    """Envelope is not addressed to the re-encryption key's delegator."""


class ConditionMismatchError(ReEncryptionError):
    """Envelope condition does not match the re-encryption key's condition."""


class DecryptionFailedError(IbcpreError):
    """Decryption failed. Carries no detail about the cause."""

    def __init__(self, message: str = "decryption failed"):
        super().__init__(message)


# Local credentials


class PasswordPolicyError(IdChainError, ValueError):
    """Password violates the length policy."""


# Trust engine


class TrustError(IdChainError, ValueError):
    """Invalid trust computation input."""


class MissingPolicyError(TrustError):
    """A mandatory attribute has no threshold in the service policy."""


# Ledger


class LedgerError(IdChainError):
    """Base class for ledger errors."""


class CounterReuseError(LedgerError):
    """Transaction counter already used under the same owner key."""


class EndorsementError(LedgerError):
    """Block endorsements are insufficient or come from non-members."""


class LedgerParseError(LedgerError):
    """Persisted ledger is corrupt or truncated."""

    def __init__(self, message: str, height: Optional[int] = None):
        if height is not None:
            message = f"{message} (block height {height})"
        super().__init__(message)
        self.height = height


# Protocol actors


class ProtocolError(IdChainError):
    """Base class for protocol flow errors."""


class DuplicateRegistrationError(ProtocolError):
    """Owner key is already registered with the data owner."""


class UsernameTakenError(ProtocolError):
    """Username already exists at the identity provider."""


class UnknownUserError(ProtocolError, LookupError):
    """Username is not known at the identity provider."""


class UnknownPseudonymError(ProtocolError, LookupError):
    """No identity document is registered under the presented owner key."""


class UnverifiedEnvelopeError(ProtocolError):
    """Attempt to store an envelope the data owner has not verified."""


# Network simulator


class NetsimError(IdChainError):
    """Base class for network simulator errors."""


class DuplicateActorError(NetsimError):
    """Actor id is already registered on the bus."""


class RoutingError(NetsimError):
    """Message violates the bus link policy."""


class UnknownActorError(RoutingError, LookupError):
    """Actor id is not registered on the bus."""


class LivelockError(NetsimError):
    """Bus exceeded the maximum number of delivery steps."""


# Scenarios


class ScenarioError(IdChainError):
    """Base class for scenario errors."""


class ScenarioParseError(ScenarioError):
    """Scenario file could not be parsed or validated."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ExpectationError(ScenarioError):
    """A scenario step did not meet its expectation."""

    def __init__(self, message: str, step_index: int):
        super().__init__(f"step {step_index}: {message}")
        self.step_index = step_index
