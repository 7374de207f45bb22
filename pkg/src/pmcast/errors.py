"""Exception hierarchy shared across the pipeline."""


class PmcastError(Exception):
    """Base class for all pmcast errors."""


class ConfigError(PmcastError):
    """Invalid or unresolvable run configuration."""


class DataError(PmcastError):
    """Base class for data-shaped failures (bad inputs, gaps, ranges)."""


# --- ingest ---

class MissingColumn(DataError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"required column {column!r} not found in header")


class BadTimestamp(DataError):
    def __init__(self, row, value):
        self.row = row
        self.value = value
        super().__init__(f"row {row}: cannot parse timestamp {value!r}")


class EmptyFile(DataError):
    pass


class EmptyRange(DataError):
    pass


class NoStations(DataError):
    pass


class AllStationsExcluded(DataError):
    pass


# --- similarity ---

class EmptySequence(DataError):
    pass


class MissingValue(DataError):
    pass


class GapInWindow(DataError):
    def __init__(self, station, first_gap_index):
        self.station = station
        self.first_gap_index = first_gap_index
        super().__init__(
            f"station {station!r} has a gap inside the requested window "
            f"(first gap at hour {first_gap_index})"
        )


class KTooLarge(DataError):
    pass


class UnknownTarget(DataError):
    pass


# --- features ---

class AllMissing(DataError):
    pass


class BadFractions(ConfigError):
    pass


# --- autodiff ---

class ShapeMismatch(PmcastError):
    def __init__(self, op, *shapes, stage=None):
        self.op = op
        self.shapes = shapes
        self.stage = stage
        super().__init__(self._fmt())

    def _fmt(self):
        msg = f"{self.op}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}"
        if self.stage:
            msg = f"[{self.stage}] {msg}"
        return msg

    def tag_stage(self, stage):
        self.stage = stage
        self.args = (self._fmt(),)
        return self


class NonScalarLoss(PmcastError):
    pass


# --- model ---

class OriginOutOfRange(DataError):
    pass


# --- training ---

class NegativeTarget(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptySplit(DataError):
    pass


class DivergedLoss(PmcastError):
    def __init__(self, message, state_dump=None):
        self.state_dump = state_dump or {}
        super().__init__(message)


# --- evaluation ---

class TooFewForR2(DataError):
    pass


class InsufficientData(DataError):
    def __init__(self, lead, message=""):
        self.lead = lead
        super().__init__(message or f"insufficient data for lead {lead}")


class MissingOrigin(DataError):
    pass
