"""VGG-16 checkpoint to TADTW1 converter with parity fixtures."""

from .export import ExportManifest, export

__all__ = ["ExportManifest", "export"]
