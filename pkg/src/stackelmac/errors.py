"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates a documented invariant."""


class ProtocolError(RuntimeError):
    """Action/state mismatch in the slot protocol (e.g. wrong UE count)."""


class ContractError(ValueError):
    """A call violated an operation precondition (lengths, masks, ...)."""


class SerializationError(ValueError):
    """Observation field outside the tokenizable range."""


class DecodeError(ValueError):
    """Token sequence cannot be decoded into a protocol action."""


class SizeError(ValueError):
    """Enumeration request exceeds the exhaustive-search budget."""


class ArchitectureRigidityError(RuntimeError):
    """Fixed-architecture network fed an observation of the wrong width.

    Raised deliberately by the MAPPO baseline when evaluated at a UE count
    it was not built for; the error itself is part of the tested behavior.
    """


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupted, or config-hash mismatch."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; training aborted with diagnostics."""
