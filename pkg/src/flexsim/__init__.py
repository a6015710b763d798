"""Deterministic simulator of flexible TrustZone isolation for on-device LLM serving."""
from .pipeline import Mode, plan_prefill, run_decode, run_prefill
from .system import System
from .timing import TimingModel

__version__ = "0.1.0"

__all__ = ["Mode", "System", "TimingModel", "plan_prefill", "run_decode", "run_prefill", "__version__"]
