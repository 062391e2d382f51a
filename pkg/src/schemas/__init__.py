"""Schemas for the command-line tool."""

from src.schemas.model_file import FilterFile, ModelFile
from src.schemas.report import ExitCode, ReportStatus, RunReport


__all__ = [
    "ExitCode",
    "FilterFile",
    "ModelFile",
    "ReportStatus",
    "RunReport",
]
