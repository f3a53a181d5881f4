"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class ToolkitError(Exception):
    """Base class for numerical failures (exit code 1)"""

    exit_code = 1

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self):
        """Machine-readable form written to error.json"""
        payload = {"error": type(self).__name__, "message": self.message}
        for key, value in self.details.items():
            if isinstance(value, complex):
                value = [value.real, value.imag]
            elif hasattr(value, "item"):
                value = value.item()
            payload[key] = value
        return payload


class ConfigError(ToolkitError):
    """Invalid or unknown configuration entry (exit code 2)"""

    exit_code = 2

    def __init__(self, message, key=None, **details):
        super().__init__(message, key=key, **details)
        self.key = key


class NonHyperbolic(ConfigError):
    pass


class RhoNotDiffeo(ConfigError):
    pass


class ZeroLattice(ConfigError):
    pass


class NoConvergence(ToolkitError):
    pass


class CutoffTooSmall(ToolkitError):
    pass


class SolverStall(ToolkitError):
    pass


class OutsideCertificate(ToolkitError):
    pass


class ContractionViolated(ToolkitError):
    pass


class StepCollapse(ToolkitError):
    pass


class NoCrossing(ToolkitError):
    pass


class ContourTooClose(ToolkitError):
    pass


class MarginalUndecidable(ToolkitError):
    pass


class NegativeMass(ToolkitError):
    pass
