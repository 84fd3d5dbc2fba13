"""Qualitative (graph-based) precomputation of probability-0 and probability-1 state sets."""
from typing import Sequence

import numpy as np
from scipy import sparse


def backward_reachable(adjacency: sparse.csr_matrix, seeds: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """States in `seeds`, plus `allowed` states with a path into the seeds through `allowed` states."""
    reached = seeds.copy()
    frontier = seeds.copy()
    while frontier.any():
        hits = (adjacency @ frontier.astype(float)) > 0
        frontier = hits & allowed & ~reached
        reached |= frontier
    return reached


def union_graph(matrices: Sequence[sparse.csr_matrix]) -> sparse.csr_matrix:
    total = matrices[0].copy()
    for matrix in matrices[1:]:
        total = total + matrix
    return total.tocsr()


def dtmc_prob0(matrix: sparse.csr_matrix, target: np.ndarray, avoid: np.ndarray) -> np.ndarray:
    return ~backward_reachable(matrix, target, ~target & ~avoid)


def dtmc_prob1(matrix: sparse.csr_matrix, target: np.ndarray, prob0: np.ndarray) -> np.ndarray:
    return ~backward_reachable(matrix, prob0, ~target)


def _mass_outside(matrices, inside: np.ndarray) -> np.ndarray:
    outside = (~inside).astype(float)
    return np.column_stack([matrix @ outside for matrix in matrices])


def mdp_prob0e(matrices, target: np.ndarray, avoid: np.ndarray) -> np.ndarray:
    """Maximal reachability probability is 0."""
    return ~backward_reachable(union_graph(matrices), target, ~target & ~avoid)


def mdp_prob1e(matrices, enabled: np.ndarray, target: np.ndarray, avoid: np.ndarray) -> np.ndarray:
    """Maximal reachability probability is 1 (nested greatest/least fixed point)."""
    keep = np.ones(len(target), dtype=bool)
    while True:
        stays = enabled & (_mass_outside(matrices, keep) == 0)
        reached = target.copy()
        while True:
            hits = np.column_stack([(matrix @ reached.astype(float)) > 0 for matrix in matrices])
            grown = reached | ((stays & hits).any(axis=1) & ~avoid)
            if np.array_equal(grown, reached):
                break
            reached = grown
        if np.array_equal(reached, keep):
            return keep
        keep = reached


def mdp_prob0a(matrices, enabled: np.ndarray, target: np.ndarray, avoid: np.ndarray) -> np.ndarray:
    """Minimal reachability probability is 0."""
    keep = ~target
    while True:
        closed = (enabled & (_mass_outside(matrices, keep) == 0)).any(axis=1)
        shrunk = keep & (closed | avoid)
        if np.array_equal(shrunk, keep):
            return keep
        keep = shrunk


def mdp_prob1a(matrices, enabled: np.ndarray, target: np.ndarray, avoid: np.ndarray) -> np.ndarray:
    """Minimal reachability probability is 1."""
    prob0a = mdp_prob0a(matrices, enabled, target, avoid)
    return ~backward_reachable(union_graph(matrices), prob0a, ~target)
