"""Exception hierarchy shared by every layer of the toolkit."""


class HhefError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(HhefError, ValueError):
    """Invalid or mismatched cryptographic parameters."""


class CapacityError(HhefError, ValueError):
    """Too many values for the available slots."""


class MissingKeyError(HhefError, KeyError):
    """A rotation or relinearization key that was never generated."""


class NoiseBudgetExhausted(HhefError):
    """A ciphertext ran out of noise budget; decryption would be wrong."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer


class DecryptionIntegrityError(HhefError):
    """Decryption detected that the noise exceeded the correctness bound."""


class ChunkSizeError(HhefError, ValueError):
    """A symmetric chunk does not have exactly t elements."""


class ProtocolError(HhefError):
    """A violation of the federated protocol (bad counters, empty rounds...)."""


class RoundAborted(ProtocolError):
    """No client survived the training phase of a round."""


class ConfigurationError(HhefError, ValueError):
    """A configuration that cannot run safely (e.g. aggregation wraps mod p)."""


class FormatError(HhefError, ValueError):
    """Malformed serialized data (wrong magic, truncated payload...)."""


class TrainingDiverged(HhefError):
    """Local training produced a non-finite loss."""


class PeerUnavailable(ProtocolError):
    """A peer closed its connection or missed its deadline (treated as dropout)."""


class PeerTimeout(PeerUnavailable):
    """The peer is connected but missed a deadline."""
