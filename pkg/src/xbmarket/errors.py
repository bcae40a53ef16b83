"""Exception hierarchy. Each class carries the CLI exit code it maps to."""
from __future__ import annotations


class XBError(Exception):
    exit_code = 1


class ParamsInvalid(XBError):
    exit_code = 2

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))

    def kinds(self) -> set[str]:
        return {e.split(":", 1)[0] for e in self.errors}


class ConfigInvalid(XBError):
    exit_code = 2


class IoError(XBError):
    exit_code = 3


class UnsupportedDependence(XBError):
    pass


class InvariantViolation(XBError):
    pass


class CovarianceNotPSD(XBError):
    pass


class DegenerateCovariance(XBError):
    pass


class DomainError(XBError):
    pass


class SeriesNotConverged(XBError):
    pass


class HittingNotAlmostSure(XBError):
    pass


class GridTooCoarse(XBError):
    pass


class CFLViolation(XBError):
    pass
