"""
Exception types shared by every capesynth module.

Each class carries a ``category`` that the command line prints in its
``error: <category>: <detail>`` line and maps to an exit code.
"""


class CapeSynthError(Exception):
    """Base class for all errors raised by capesynth"""

    category = "internal"
    user_facing = False


class DataFormatError(CapeSynthError, ValueError):
    """Malformed IDX, CSV or binary synthetic input"""

    category = "format"
    user_facing = True


class ConfigurationError(CapeSynthError, ValueError):
    """Invalid parameters or parameter combinations"""

    category = "config"
    user_facing = True


class ContractError(CapeSynthError):
    """A module received inputs that break its preconditions"""

    category = "contract"
    user_facing = True


class AccountingOverflowError(CapeSynthError, OverflowError):
    """An exponential in the accountant left the representable range at one alpha"""

    category = "accounting"


class AccountingError(CapeSynthError):
    """The accountant could not produce a guarantee"""

    category = "accounting"


class CalibrationError(CapeSynthError):
    """No noise scale in the search bracket reaches the target epsilon"""

    category = "calibration"
    user_facing = True

    def __init__(self, message: str, bracket: tuple = None):
        super().__init__(message)
        self.bracket = bracket


class AggregationError(CapeSynthError):
    """The server is missing a client record for some slot"""

    category = "aggregation"

    def __init__(self, message: str, slot: int = None, client: int = None):
        super().__init__(message)
        self.slot = slot
        self.client = client


class PipelineError(CapeSynthError):
    """Wraps a failure inside run_pipeline with mode, client and slot context"""

    category = "pipeline"

    def __init__(self, message: str, mode: str = None, client=None, slot=None, cause: Exception = None):
        context = [f"mode={mode}"]
        if client is not None:
            context.append(f"client={client}")
        if slot is not None:
            context.append(f"slot={slot}")
        super().__init__(f"{message} [{', '.join(context)}]")
        self.mode = mode
        self.client = client
        self.slot = slot
        self.cause = cause
        # keep the CLI exit code of the underlying failure
        if cause is not None and isinstance(cause, CapeSynthError):
            self.category = cause.category
            self.user_facing = cause.user_facing
