"""Joint view selection over the 8 x N cost matrix of propagated hypotheses.

A view is "good" when several hypotheses match well in it and few match
badly; good views are weighted by the mean confidence of their costs, the
top ``k`` are kept, and the previous iteration's most important view gets
extra weight (or a small fallback weight if it dropped out).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit


class EmptySelection(ValueError):
    """No view carries positive weight; the caller falls back to COST_MAX."""


@dataclass(frozen=True)
class ViewSelParams:
    tau_mc_init: float = 0.8
    alpha: float = 90.0
    beta: float = 0.3
    n1: int = 2
    n2: int = 3
    tau_up: float = 1.2
    k: int = 4
    # take the else-branch fallback weight for every unselected view
    fallback_all_unselected: bool = False

    def __post_init__(self):
        if min(self.tau_mc_init, self.alpha, self.beta, self.tau_up) <= 0 or self.n1 <= 0 or self.n2 <= 0:
            raise ValueError("view selection parameters must be positive")
        if not (self.n1 < 8 and self.n2 <= 8 and self.k >= 1):
            raise ValueError("need n1 < 8, n2 <= 8, k >= 1")


@dataclass
class ViewSelectionState:
    selected: np.ndarray
    weights: np.ndarray
    most_important: Optional[int] = None
    prev_selected: Optional[np.ndarray] = None
    prev_most_important: Optional[int] = None

    @classmethod
    def empty(cls, n_views: int) -> "ViewSelectionState":
        return cls(np.zeros(n_views, bool), np.zeros(n_views))

    def advance(self) -> "ViewSelectionState":
        """State for the next iteration: current selection becomes history."""
        n = len(self.selected)
        return ViewSelectionState(
            np.zeros(n, bool),
            np.zeros(n),
            None,
            self.selected.copy(),
            self.most_important,
        )


# ---------------------------------------------------------------- kernels


@njit(cache=True, inline="always")
def tau_mc_value(t, tau_mc_init, alpha):
    return tau_mc_init * math.exp(-(t * t) / alpha)


@njit(cache=True, inline="always")
def confidence_value(m, beta):
    return math.exp(-(m * m) / (2.0 * beta * beta))


@njit(cache=True)
def classify_kernel(M, tau, n1, n2, tau_up, sel):
    rows, n = M.shape
    count = 0
    for j in range(n):
        low = 0
        high = 0
        for i in range(rows):
            m = M[i, j]
            if m < tau:
                low += 1
            if m > tau_up:
                high += 1
        sel[j] = low > n1 and high < n2
        if sel[j]:
            count += 1
    return count


@njit(cache=True)
def importance_kernel(M, sel, beta, k, psi):
    """Mean confidence per selected view, truncated to the ``k`` largest.

    Returns the index of the most important view, or -1.
    """
    rows, n = M.shape
    for j in range(n):
        if sel[j]:
            acc = 0.0
            for i in range(rows):
                acc += confidence_value(M[i, j], beta)
            psi[j] = acc / rows
        else:
            psi[j] = 0.0
    best = -1
    for j in range(n):
        if not sel[j]:
            continue
        rank = 0
        for jj in range(n):
            if sel[jj] and (psi[jj] > psi[j] or (psi[jj] == psi[j] and jj < j)):
                rank += 1
        if rank >= k:
            psi[j] = 0.0
        elif rank == 0:
            best = j
    return best


@njit(cache=True)
def modified_kernel(psi, sel, prev_v, prev_v_in_prev_sel, fallback_all, out):
    n = psi.shape[0]
    total = 0.0
    for j in range(n):
        if sel[j]:
            eps = 2.0 if j == prev_v else 1.0
            out[j] = eps * psi[j]
        elif prev_v >= 0 and prev_v_in_prev_sel and (fallback_all or j == prev_v):
            out[j] = 0.2
        else:
            out[j] = 0.0
        total += out[j]
    return total


@njit(cache=True, inline="always")
def aggregate_row(costs, weights, total):
    acc = 0.0
    for j in range(costs.shape[0]):
        w = weights[j]
        if w > 0.0:
            acc += w * costs[j]
    return acc / total


@njit(cache=True)
def select_best_kernel(finals):
    """argmin; among ties the last entry (current hypothesis) wins, else the lowest index."""
    last = finals.shape[0] - 1
    best = 0
    for i in range(1, finals.shape[0]):
        if finals[i] < finals[best]:
            best = i
    if finals[last] == finals[best]:
        return last
    return best


# ---------------------------------------------------------------- public API


def tau_mc(t: float, p: ViewSelParams = ViewSelParams()) -> float:
    """Matching-cost threshold for iteration ``t``; decays as a Gaussian in t."""
    if t < 0:
        raise ValueError("iteration index must be non-negative")
    return tau_mc_value(float(t), p.tau_mc_init, p.alpha)


def confidence(m, beta: float = 0.3):
    m = np.asarray(m, dtype=np.float64)
    return np.exp(-(m**2) / (2.0 * beta**2))


def classify_views(M: np.ndarray, t: float, p: ViewSelParams = ViewSelParams()) -> np.ndarray:
    M = np.ascontiguousarray(M, dtype=np.float64)
    sel = np.zeros(M.shape[1], dtype=np.bool_)
    classify_kernel(M, tau_mc(t, p), p.n1, p.n2, p.tau_up, sel)
    return sel


def view_importance(M: np.ndarray, selected: np.ndarray, p: ViewSelParams = ViewSelParams()) -> np.ndarray:
    M = np.ascontiguousarray(M, dtype=np.float64)
    psi = np.zeros(M.shape[1])
    importance_kernel(M, np.asarray(selected, dtype=np.bool_), p.beta, p.k, psi)
    return psi


def most_important_view(psi: np.ndarray, selected: np.ndarray) -> Optional[int]:
    idx = np.flatnonzero(selected)
    if idx.size == 0:
        return None
    return int(idx[np.argmax(psi[idx])])


def modified_importance(psi: np.ndarray, state: ViewSelectionState, p: ViewSelParams = ViewSelParams()) -> np.ndarray:
    """Weights after boosting the previous most important view.

    ``state.selected`` is the current selection; ``state.prev_*`` the history
    (``None`` at the first iteration).
    """
    prev_v = -1 if state.prev_most_important is None else int(state.prev_most_important)
    in_prev = prev_v >= 0 and state.prev_selected is not None and bool(state.prev_selected[prev_v])
    out = np.zeros(len(psi))
    modified_kernel(
        np.asarray(psi, dtype=np.float64),
        np.asarray(state.selected, dtype=np.bool_),
        prev_v,
        in_prev,
        p.fallback_all_unselected,
        out,
    )
    return out


def aggregate_final(M: np.ndarray, psi_mod: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    w = np.asarray(psi_mod, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise EmptySelection("all view weights are zero")
    return (M * w[None, :]).sum(axis=1) / total


def select_best(final_costs) -> int:
    return int(select_best_kernel(np.asarray(final_costs, dtype=np.float64)))
