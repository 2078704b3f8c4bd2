"""Exception types shared across the toolkit."""


class ArborError(Exception):
    """Base class for all toolkit errors."""


# -- camera ------------------------------------------------------------------

class NonPositiveDepth(ArborError):
    """Point has z <= 0 in the camera frame and cannot be projected."""


class RayParallelToPlane(ArborError):
    """Ray does not intersect the requested plane."""


class CoincidentCenters(ArborError):
    """Two cameras share an optical center; epipolar geometry is undefined."""


class DegenerateConfiguration(ArborError):
    """Pose recovery failed in the linear stage (too few / coplanar / collinear points)."""


class NoConvergence(ArborError):
    """Iterative refinement failed to reach a usable solution."""


# -- videosync ---------------------------------------------------------------

class DimensionMismatch(ArborError):
    """Inputs do not share the required dimensions."""


class TooFewFrames(ArborError):
    """Need at least two frames to measure motion."""


class EmptySeries(ArborError):
    """Motion series is empty."""


# -- annotation --------------------------------------------------------------

class InvalidAnnotation(ArborError):
    """Annotation violates structural invariants; see .violations."""

    def __init__(self, violations):
        super().__init__(f"annotation has {len(violations)} violation(s)")
        self.violations = list(violations)


class ImageTooSmall(ArborError):
    """Image smaller than the requested crop size."""


class EmptyImage(ArborError):
    """Zero-pixel image."""


class InsufficientPoints(ArborError):
    """Fewer distinct points than requested clusters."""


# -- flowfield ---------------------------------------------------------------

class InvalidParams(ArborError):
    """Kernel parameters out of range."""


class EmptyMask(ArborError):
    """Mask has no pixels."""


# -- medialaxis --------------------------------------------------------------

class NoFlowAtPoint(ArborError):
    """Flow field is empty at the queried point."""


class ConeMismatch(ArborError):
    """Flow exists at the point but no direction lies within the cone tolerance."""


class ZeroFlow(ArborError):
    """Advection reached a point with no flow; signals trace termination."""


class NoFlowAtStart(ArborError):
    """Trace seed point has no flow."""


# -- multiview ---------------------------------------------------------------

class DegenerateRays(ArborError):
    """Ray bundle is (near-)parallel; triangulation is ill-posed."""


class NoObservations(ArborError):
    """Keypoint carries no usable observations."""


class CycleDetected(ArborError):
    """Graph expected to be a tree contains a cycle."""


# -- treegeom ----------------------------------------------------------------

class CyclicInput(ArborError):
    """Branch graph expected to be acyclic is not."""


class EmptyCloud(ArborError):
    """Point cloud is empty."""


class InconsistentPose(ArborError):
    """Pose is missing transforms or does not form a consistent tree."""


# -- pipeline ----------------------------------------------------------------

class ConfigError(ArborError):
    """Pipeline configuration is invalid; carries a machine-readable code."""

    def __init__(self, code, detail):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


class MissingStageInput(ArborError):
    """Stage needs an artifact that no earlier stage has produced yet."""


class OutputLocked(ArborError):
    """Another pipeline run holds the output directory lock."""
