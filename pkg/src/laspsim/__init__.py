"""Sequence-parallel linear attention on a simulated multi-rank runtime.

Every parallel execution path in this package is checked against serial
per-token reference implementations, and every byte that crosses a rank
boundary is counted.
"""

__version__ = "0.1.0"
