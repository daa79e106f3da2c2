"""Compressed local-update distributed training with permissionless validation, at desk scale."""

from .codec import CompressedChunk, CompressedDelta, FormatError, deserialize, serialize
from .core import ChunkGeometry, InvalidArgument, InvalidData, ParamVector, Rng
from .optimizer import ErrorFeedback, InnerOptState, LrSchedule, OuterConfig, inner_lr_at

__all__ = [
    "ChunkGeometry",
    "CompressedChunk",
    "CompressedDelta",
    "ErrorFeedback",
    "FormatError",
    "InnerOptState",
    "InvalidArgument",
    "InvalidData",
    "LrSchedule",
    "OuterConfig",
    "ParamVector",
    "Rng",
    "deserialize",
    "inner_lr_at",
    "serialize",
]
