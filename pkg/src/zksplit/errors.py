"""Exception types shared across the package."""


class ZkSplitError(Exception):
    """Base class for package errors."""


class EncodingOverflow(ZkSplitError):
    """Fixed-point value exceeds the circuit magnitude cap."""


class ShapeError(ZkSplitError):
    """Vector or matrix dimensions do not match."""


class ProofRejected(ZkSplitError):
    """A verifier rejected a proof; ``tag`` names the failing assertion class."""

    def __init__(self, tag, detail=""):
        self.tag = tag
        super().__init__(f"proof rejected [{tag}] {detail}".rstrip())


class ProtocolStateError(ZkSplitError):
    """Message or session state received out of order."""


class ConfigError(ZkSplitError):
    """Invalid experiment configuration."""


class TrainingDiverged(ZkSplitError):
    """Loss became NaN or exploded during local training."""
