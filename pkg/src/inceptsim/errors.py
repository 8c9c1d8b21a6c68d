"""Exception hierarchy shared across the simulator, attack engine, relay and runner."""


class InceptSimError(Exception):
    """Base class for all errors raised by this package."""


# --- device model ---------------------------------------------------------

class AdbDisabled(InceptSimError):
    pass


class DuplicatePackage(InceptSimError):
    pass


class SizeLimitExceeded(InceptSimError):
    pass


class NoForegroundApp(InceptSimError):
    pass


class NotInstalled(InceptSimError):
    pass


class CallBlockedByPolicy(InceptSimError):
    pass


class CertificateRejected(InceptSimError):
    pass


class UnknownApp(InceptSimError):
    pass


# --- attack engine --------------------------------------------------------

class NotOnNetwork(InceptSimError):
    pass


class AccessRevoked(InceptSimError):
    pass


class UnknownPackageInStrategyMap(InceptSimError):
    pass


class StrategyMismatch(InceptSimError):
    pass


class EmptyCandidates(InceptSimError):
    pass


# --- relay ----------------------------------------------------------------

class ConnectFailed(InceptSimError):
    pass


class DuplicateSession(InceptSimError):
    pass


class SessionClosed(InceptSimError):
    pass


class TransformSetUnknown(InceptSimError):
    pass


class UnknownSession(InceptSimError):
    pass


class InvalidForKind(InceptSimError):
    pass


class NoDeliveries(InceptSimError):
    pass


class BindFailed(InceptSimError):
    pass


# --- scenario / runner ----------------------------------------------------

class ScenarioParseError(InceptSimError):
    pass


class ScenarioValidationError(InceptSimError):
    pass


class ScenarioInvalid(InceptSimError):
    pass


class MissingArtifacts(InceptSimError):
    pass
