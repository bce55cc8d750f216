"""Exception hierarchy shared across the tracker modules."""


class TrackingError(Exception):
    """Base class for all errors raised by arttrack."""


class NonPositiveDepth(TrackingError):
    def __init__(self, part_id: int, depth: float):
        super().__init__(f"keypoint {part_id} has non-positive depth {depth:.6g} mm")
        self.part_id = part_id
        self.depth = depth


class JointLimitViolation(TrackingError):
    def __init__(self, joint: str, value: float):
        super().__init__(f"joint '{joint}' = {value:.6g} rad is outside its limits")
        self.joint = joint
        self.value = value


class ToolOutOfView(TrackingError):
    pass


class DegenerateTemplate(TrackingError):
    def __init__(self, part_id: int, n_features: int):
        super().__init__(f"part {part_id}: only {n_features} contour features")
        self.part_id = part_id
        self.n_features = n_features


class DegenerateSample(TrackingError):
    pass


class NoValidObservations(TrackingError):
    pass


class InsufficientPoints(TrackingError):
    pass


class DegenerateConfiguration(TrackingError):
    pass


class InitializationFailed(TrackingError):
    pass


# dataset / CLI surface


class ParseError(TrackingError):
    def __init__(self, where: str, reason: str):
        super().__init__(f"{where}: {reason}")
        self.where = where
        self.reason = reason


class ValidationError(TrackingError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class VersionError(TrackingError):
    pass


class DecodeError(TrackingError):
    pass


class DimensionMismatch(TrackingError):
    pass


class MissingColumn(TrackingError):
    pass


class IoError(TrackingError):
    pass
