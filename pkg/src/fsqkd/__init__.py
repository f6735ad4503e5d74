"""Entanglement-based QKD post-processing: simulation, synchronization,
sifting, reconciliation, privacy amplification, authentication and key
delivery."""

from .core import Basis, BitBlock, DetectorChannel, Party, TagStream, read_stream, write_stream
from .session import SessionConfig, SessionResult, run_loopback, run_session
from .simulator import SourceParams, generate_session, jena_night

__all__ = [
    "Basis", "BitBlock", "DetectorChannel", "Party", "TagStream", "read_stream", "write_stream",
    "SessionConfig", "SessionResult", "run_loopback", "run_session",
    "SourceParams", "generate_session", "jena_night",
]
__version__ = "0.1.0"
