"""Curation toolkit for function-calling training data."""

__version__ = "0.1.0"

from .fcall import (  # noqa: E402
    CallList,
    Diagnostic,
    FCallSyntaxError,
    FunctionCall,
    Grammar,
    ast_equal,
    parse_lenient,
    parse_strict,
    serialize,
)
from .tool_schema import ToolCatalog, load_catalog, validate_call, validate_calls  # noqa: E402
from .loss import AlphaState, LossBreakdown, SpanMask, SSBLoss, decompose, nll_from_logits, segment  # noqa: E402
from .dataset_io import Sample, read_samples, report, write_samples  # noqa: E402
from .endpoints import ChatClient, EndpointConfig, MockEndpoint, MockScript, make_port  # noqa: E402
from .quality_gate import GateVerdict, Partition, QualityGate, partition  # noqa: E402
from .hdr_loop import HDRLoop, LoopConfig, run_loop  # noqa: E402

__all__ = [
    "CallList", "Diagnostic", "FCallSyntaxError", "FunctionCall", "Grammar", "ast_equal",
    "parse_lenient", "parse_strict", "serialize",
    "ToolCatalog", "load_catalog", "validate_call", "validate_calls",
    "AlphaState", "LossBreakdown", "SpanMask", "SSBLoss", "decompose", "nll_from_logits", "segment",
    "Sample", "read_samples", "report", "write_samples",
    "ChatClient", "EndpointConfig", "MockEndpoint", "MockScript", "make_port",
    "GateVerdict", "Partition", "QualityGate", "partition",
    "HDRLoop", "LoopConfig", "run_loop",
]
