"""Exception hierarchy. User-facing errors derive from MoeforgeError so the
CLI can map them to exit code 1; anything else is an internal error (exit 2)."""


class MoeforgeError(Exception):
    """Base class for all errors raised on invalid input or state."""


class FormatError(MoeforgeError):
    """Malformed or inconsistent checkpoint container."""


class ArchitectureError(MoeforgeError):
    """Checkpoint does not describe a well-formed model."""


class CompatibilityError(MoeforgeError):
    """Expert checkpoints do not match the base architecture."""


class RecipeError(MoeforgeError):
    """Invalid composition recipe."""


class TrainingError(MoeforgeError):
    """Invalid training configuration or corpus."""
