"""DeiT feature exporter: intermediate token embeddings and head-averaged
attention written as SNFX files for the graph-inference engine."""

from .export import ExportConfig, VARIANTS, build_model, export
from .snfx import Header, Record, SnfxError, read, write
from .verify import VerifyReport, verify_export

__version__ = "0.1.0"
