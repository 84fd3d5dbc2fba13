from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Tuple

import numpy as np
from scipy.stats import entropy

from fscforge.checker.checker import CheckResult
from fscforge.checker.spec import Comparison, Spec
from fscforge.exceptions.check_error import CheckError
from fscforge.extraction.fsc import Fsc
from fscforge.pomdp.pomdp import Pomdp
from fscforge.synthesis.product import Pair, ProductDtmc, action_support


class CriticalPair(NamedTuple):
    node: int
    state: int
    value: float


@dataclass(frozen=True)
class CritSet:
    pairs: Tuple[CriticalPair, ...]
    spec: Spec

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[CriticalPair]:
        return iter(self.pairs)

    @property
    def states(self) -> Tuple[int, ...]:
        """Distinct POMDP states of the critical pairs, ascending."""
        return tuple(sorted({pair.state for pair in self.pairs}))


def is_critical(spec: Spec, value: float) -> bool:
    bound = spec.bound
    if spec.comparison in (Comparison.GE, Comparison.GT):
        return value < bound
    if spec.comparison is Comparison.LE:
        return value > bound
    return value >= bound


def critical_pairs(product: ProductDtmc, result: CheckResult, spec: Spec) -> CritSet:
    """Reachable (node, state) pairs whose own value violates the bound of `spec`."""
    if spec.is_query:
        raise CheckError("Critical pairs need a bounded specification.")
    if len(result.values) != product.n_states:
        raise CheckError(f"Result covers {len(result.values)} states, chain has {product.n_states}.")
    pairs = tuple(
        CriticalPair(node, state, float(result.values[i]))
        for i, (node, state) in enumerate(product.pairs)
        if is_critical(spec, float(result.values[i]))
    )
    return CritSet(pairs, spec)


def pair_entropy(fsc: Fsc, p: Pomdp, node: int, state: int) -> float:
    """Entropy of the action choice at (node, state), in base |Act(state)| so that it lies in [0, 1]."""
    k = len(p.enabled_actions[state])
    if k < 2:
        return 0.0
    row = fsc.action_distribution(node, p.observation_of(state))
    if row is None:
        raise CheckError(f"Controller has no action distribution for ({node}, {p.observation_of(state)}).")
    support, _ = action_support(p, state, row)
    probs = np.fromiter(support.values(), dtype=float)
    if len(probs) == k and np.all(probs == probs[0]):
        return 1.0
    return float(np.clip(entropy(probs, base=k), 0.0, 1.0))


def average_entropy(fsc: Fsc, pairs: Iterable[Pair], p: Pomdp) -> float:
    values = [pair_entropy(fsc, p, node, state) for node, state in pairs]
    if not values:
        raise CheckError("Entropy of an empty pair set is undefined.")
    return float(np.mean(values))


def entropy_of(fsc: Fsc, crit: CritSet, p: Pomdp) -> float:
    return average_entropy(fsc, ((pair.node, pair.state) for pair in crit), p)
