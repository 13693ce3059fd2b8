"""MobileNetV2 zoo-weight exporter for the leaf-disease inference engine."""

from .export import ExportError, ExportResult, dump_golden, export_backbone, make_fixture_inputs

__all__ = ["ExportError", "ExportResult", "dump_golden", "export_backbone", "make_fixture_inputs"]
__version__ = "0.1.0"
