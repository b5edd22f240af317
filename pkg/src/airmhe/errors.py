"""Exception hierarchy shared by all modules."""


class AirMheError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(AirMheError):
    pass


class DegenerateSpeed(AirMheError):
    """A speed used as a divisor fell below the configured guard."""


class ComplexAirspeed(AirMheError):
    """Wind projection exceeds ground speed, so true airspeed is not real."""


class AltitudeOutOfRange(AirMheError):
    pass


class FaultSpecError(ConfigError):
    pass


class DimensionMismatch(AirMheError):
    pass


class NoHealthySensors(AirMheError):
    pass


class AllSensorsFaulty(AirMheError):
    """Every redundant channel of one sensor type has been isolated."""


class MaxIterationsExceeded(AirMheError):
    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class QpSubproblemInfeasible(AirMheError):
    pass


class LicqViolation(AirMheError):
    pass


class SingularKkt(AirMheError):
    pass


class ActiveSetChanged(AirMheError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class EmptyBank(AirMheError):
    pass
