"""Exception types raised across the simulator."""


class TierflError(Exception):
    """Base class for all simulator errors."""


# --- topology ---

class EmptyLayer(TierflError):
    pass


class TrustInconsistent(TierflError):
    pass


class OrphanNode(TierflError):
    pass


class InvalidLayer(TierflError):
    pass


class UnknownDevice(TierflError):
    pass


# --- data ---

class InvalidHeterogeneity(TierflError):
    pass


class ZeroSamples(TierflError):
    pass


class MalformedRow(TierflError):
    pass


class TooFewRows(TierflError):
    pass


class InvalidQ(TierflError):
    pass


# --- losses ---

class DimensionMismatch(TierflError):
    pass


class EmptyBatch(TierflError):
    pass


class DegenerateTrace(TierflError):
    pass


# --- privacy ---

class AccountantPremiseViolated(TierflError):
    pass


class IncompleteLedger(TierflError):
    pass


# --- engine ---

class ProtectionViolated(TierflError):
    pass


class OverlappingAggregationSets(TierflError):
    pass


class ZeroInterval(TierflError):
    pass


class ScheduleViolation(TierflError):
    pass


class RateOutOfRange(TierflError):
    pass


# --- bounds ---

class InadmissibleStepSize(TierflError):
    pass


class PreconditionViolated(TierflError):
    pass


# --- control ---

class InfeasibleConstraints(TierflError):
    pass


class SearchSpaceTooLarge(TierflError):
    pass


# --- cli / config ---

class ConfigInvalid(TierflError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class AxisMismatch(TierflError):
    pass


class IoError(TierflError):
    pass
