"""Versioned chunked-array container with virtual views, parallel writes,
and an in-situ scan/aggregation engine."""

from .catalog import ArraySchema, Catalog, assign_chunks, chunk_linearize
from .container import (
    Container,
    ElementType,
    Hyperslab,
    Mapping,
    create_file,
    open_file,
)
from .errors import AbridgeError
from .query import AggregateSpec, PhaseTimings, aggregate, aggregate_region
from .rlechunk import RleChunk, decode_rle, encode_rle, masquerade_dense
from .sources import ContainerSource, MemorySource, SyntheticSource

__all__ = [
    "AbridgeError",
    "AggregateSpec",
    "ArraySchema",
    "Catalog",
    "Container",
    "ContainerSource",
    "ElementType",
    "Hyperslab",
    "Mapping",
    "MemorySource",
    "PhaseTimings",
    "RleChunk",
    "SyntheticSource",
    "aggregate",
    "aggregate_region",
    "assign_chunks",
    "chunk_linearize",
    "create_file",
    "decode_rle",
    "encode_rle",
    "masquerade_dense",
    "open_file",
]

__version__ = "0.1.0"
