"""Exception hierarchy. Every error carries a CLI category used for exit codes."""


class PortPatchError(Exception):
    """Base class for all portpatch errors.

    category is one of "usage", "data", "numerical" and maps to the CLI
    exit codes 1, 2, 3.
    """

    category = "data"


class ShapeError(PortPatchError):
    """Operands have incompatible shapes or dtypes."""


class ParseError(PortPatchError):
    """A container file violates the on-disk format."""


class AdapterFormatError(ParseError):
    """A container does not follow the adapter naming convention."""


class MergeError(PortPatchError):
    """A patch module does not resolve against the target checkpoint."""


class UnknownModuleError(PortPatchError):
    """A requested module path is not present in the patch."""


class PatchCompatibilityError(PortPatchError):
    """Two patches do not share module sets or per-module shapes."""


class ConfigError(PortPatchError):
    """A configuration violates its invariants or cannot be parsed."""


class InputError(PortPatchError):
    """Runtime input (e.g. a token id) is out of range."""


class ParameterError(PortPatchError):
    """A numeric parameter is out of its valid range."""

    category = "usage"


class UsageError(PortPatchError):
    """Bad command line invocation."""

    category = "usage"


class NumericalError(PortPatchError):
    """A numeric routine failed to converge or produced non-finite values."""

    category = "numerical"


class FitError(NumericalError):
    """Adapter fitting diverged."""
