"""Match counting and split/prune rebalancing of output nodes.

Each of the K output nodes of a layer accumulates how often training samples
matched it. Nodes matched far above the uniform rate get split (cloned, the
frequency shared between the two copies); nodes matched far below it get
pruned. Capacity stays constant: the clone of the over-matched node is
written into the pruned node's slot, optimizer moments included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import slot_clone


@dataclass
class SplitPruneEvent:
    """One atomic split+prune: node `split_src` was cloned over node `pruned`."""

    split_src: int
    pruned: int
    step: int = 0

    def to_json(self):
        return {"split_src": self.split_src, "pruned": self.pruned, "step": self.step}


class SplitPruneState:
    """Per-node match counters c(k), their running total n, and thresholds."""

    def __init__(self, k, warmup_min_total=None):
        if k < 2:
            raise ValueError(f"need at least 2 nodes, got {k}")
        self.counters = np.zeros(k, np.float64)
        self.total = 0.0
        self.p_split = 2.0 / k
        self.p_prune = 0.5 / k
        # No decisions before every node could plausibly have been matched once.
        self.warmup_min_total = float(k) if warmup_min_total is None else float(warmup_min_total)

    @property
    def k(self):
        return len(self.counters)

    def to_json(self):
        return {
            "counters": self.counters.tolist(),
            "total": self.total,
            "p_split": self.p_split,
            "p_prune": self.p_prune,
            "warmup_min_total": self.warmup_min_total,
        }

    @classmethod
    def from_json(cls, d):
        state = cls(len(d["counters"]), warmup_min_total=d["warmup_min_total"])
        state.counters[:] = d["counters"]
        state.total = d["total"]
        state.p_split = d["p_split"]
        state.p_prune = d["p_prune"]
        return state


def record_match(state, k_star):
    """Count one training sample matched to node k_star."""
    if not 0 <= k_star < state.k:
        raise IndexError(f"node index {k_star} out of range [0, {state.k})")
    state.counters[k_star] += 1.0
    state.total += 1.0


def record_matches(state, indices):
    """Bulk record_match for a batch of matched node indices."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return
    if indices.min() < 0 or indices.max() >= state.k:
        raise IndexError(f"node index out of range [0, {state.k})")
    np.add.at(state.counters, indices, 1.0)
    state.total += float(indices.size)


def reset(state):
    """Zero counters and total; thresholds and K are kept."""
    state.counters[:] = 0.0
    state.total = 0.0


def check_and_apply(state, slots, step=0):
    """Apply one split+prune pair if either trigger condition holds.

    slots: iterable of (Parameter, AdamState) pairs carrying the per-node
    parameters; the over-matched node's slice is cloned into the pruned
    node's slot in every pair, moments included.

    Returns the SplitPruneEvent, or None when nothing triggered.
    """
    if state.total < state.warmup_min_total:
        return None
    k_max = int(np.argmax(state.counters))
    k_min = int(np.argmin(state.counters))
    c_max = state.counters[k_max]
    c_min = state.counters[k_min]
    if not (c_max / state.total > state.p_split or c_min / state.total < state.p_prune):
        return None
    assert k_max != k_min, "trigger with all counters equal cannot happen for K >= 2"

    state.total -= c_min
    half = c_max / 2.0
    state.counters[k_min] = half
    state.counters[k_max] = half
    for param, opt in slots:
        slot_clone(param, opt, src=k_max, dst=k_min)
    return SplitPruneEvent(split_src=k_max, pruned=k_min, step=step)
