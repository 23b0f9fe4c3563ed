"""Closed-form communication cost model, cross-checked against simulated runs.

Steps per iteration: the ring method pays 2(W-1) point-to-point steps, the
state-gather method pays 2 collective launches, independent of W. Every step
moves one d x d state per (batch, head) slot, so per-step traffic is
B*H*d^2*element_bytes regardless of sequence length. The test suite asserts
that simulated CommStats reproduce these integers exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

METHODS = ("lasp1", "lasp2")


@dataclass(frozen=True)
class CostParams:
    """Shape and schedule parameters the cost formulas range over."""

    world_size: int
    sp_size: int
    batch: int
    heads: int
    dim: int
    iterations: int
    element_bytes: int

    def __post_init__(self) -> None:
        for name in ("world_size", "sp_size", "batch", "heads", "dim",
                     "iterations", "element_bytes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.world_size % self.sp_size != 0:
            raise ValueError(
                f"sp_size {self.sp_size} must divide world_size {self.world_size}")


def comm_steps_per_iteration(method: str, world_size: int) -> int:
    """Communication steps one forward+backward iteration performs."""
    if world_size < 1:
        raise ValueError(f"world_size must be positive, got {world_size}")
    if method == "lasp1":
        return 2 * (world_size - 1)
    if method == "lasp2":
        return 2
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def state_param_count(batch: int, heads: int, dim: int) -> int:
    """Elements in one memory state across all (batch, head) slots: B*H*d^2."""
    if batch < 1 or heads < 1 or dim < 1:
        raise ValueError("batch, heads, and dim must be positive")
    return batch * heads * dim * dim


def traffic_per_step(p: CostParams) -> int:
    """Bytes one communication step moves per rank: B*H*d^2*element_bytes."""
    return state_param_count(p.batch, p.heads, p.dim) * p.element_bytes


def total_traffic(method: str, p: CostParams) -> int:
    """Bytes over the whole schedule: steps/iteration * iterations * bytes/step."""
    return comm_steps_per_iteration(method, p.world_size) * p.iterations * traffic_per_step(p)
