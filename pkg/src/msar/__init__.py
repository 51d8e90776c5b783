"""Desk-scale multi-speaker speech recognition toolkit.

Single-channel and multi-channel recognition of overlapped speech built from
small, testable parts: a taped autodiff tensor core, an STFT/mel/WPE signal
layer, banded-attention Transformer blocks, a mask-driven MVDR beamformer
frontend, a PIT-CTC/attention backend, and a deterministic training loop.
"""

import os

# MSAR_THREADS caps BLAS worker threads; it must land before numpy loads.
_threads = os.environ.get("MSAR_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from . import attention, backend, data, dsp, frontend, numerics, training
from .numerics import DiffGraph, Tensor, backward

__all__ = [
    "attention",
    "backend",
    "data",
    "dsp",
    "frontend",
    "numerics",
    "training",
    "DiffGraph",
    "Tensor",
    "backward",
]

__version__ = "0.1.0"
