"""Exception hierarchy. Every error carries a stable ``code`` used on the wire."""

from __future__ import annotations


class ReferencingError(Exception):
    code = "ERROR"


class EmptyCloud(ReferencingError):
    code = "EmptyCloud"


class TooFewPoints(ReferencingError):
    code = "TooFewPoints"


class ParseError(ReferencingError):
    code = "ParseError"

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class DegenerateMesh(ReferencingError):
    code = "DegenerateMesh"


class RadiusTooSmall(ReferencingError):
    code = "RadiusTooSmall"


class NoCorrespondences(ReferencingError):
    code = "NoCorrespondences"


class AllStartsFailed(ReferencingError):
    code = "AllStartsFailed"


class NoCongruentBase(ReferencingError):
    code = "NoCongruentBase"


class SegmentationFailed(ReferencingError):
    code = "SegmentationFailed"


class NoCandidateBox(ReferencingError):
    code = "NoCandidateBox"


class BadFrame(ReferencingError):
    code = "BAD_FRAME"
