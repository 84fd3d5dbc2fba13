import logging
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Mapping, Optional, Tuple

from fscforge.exceptions.extraction_error import ExtractionError
from fscforge.extraction.fsc import Fsc
from fscforge.pomdp.pomdp import Dtmc, Pomdp

Pair = Tuple[int, int]


@dataclass(frozen=True)
class ProductDtmc(Dtmc):
    """Chain induced by a controller on a POMDP; state i is the (node, state) pair pairs[i]."""

    pairs: Tuple[Pair, ...]

    @cached_property
    def pair_index(self) -> Dict[Pair, int]:
        return {pair: i for i, pair in enumerate(self.pairs)}


def action_support(p: Pomdp, state: int, row: Mapping[str, float]) -> Tuple[Dict[int, float], bool]:
    """
    Restricts an action distribution to the actions enabled at `state` and renormalises it.

    Returns the distribution and whether the uniform fallback was needed.
    """
    unknown = [name for name in row if name not in p.action_index]
    if unknown:
        raise ExtractionError(f"Controller uses unknown action(s) {', '.join(sorted(unknown))}.")
    enabled = p.enabled_actions[state]
    weights = {a: row.get(p.actions[a], 0.0) for a in enabled}
    total = sum(weights.values())
    if total <= 0.0:
        return {a: 1.0 / len(enabled) for a in enabled}, True
    return {a: w / total for a, w in weights.items() if w > 0.0}, False


def induce_dtmc(p: Pomdp, fsc: Fsc, logger: Optional[logging.Logger] = None) -> ProductDtmc:
    """
    Builds the reachable part of the chain over (node, state) pairs.

    Pairs are numbered in breadth-first order from the initial pairs; labels carry over
    through the state component.
    """
    logger = logger or logging.getLogger(__name__)
    pairs: List[Pair] = []
    index: Dict[Pair, int] = {}
    queue = deque()

    def visit(pair: Pair) -> int:
        if pair not in index:
            index[pair] = len(pairs)
            pairs.append(pair)
            queue.append(pair)
        return index[pair]

    init = {visit((fsc.initial, s)): prob for s, prob in sorted(p.init.items()) if prob > 0.0}
    transitions: List[Dict[int, float]] = []
    rewards: List[float] = []
    fallbacks = 0
    while queue:
        node, state = queue.popleft()
        observation = p.observation_of(state)
        row = fsc.action_distribution(node, observation)
        if row is None:
            logger.error(f"❌ No action distribution for node {node} on '{observation}'")
            raise ExtractionError(f"Controller has no action distribution for ({node}, {observation}).")
        support, fallback = action_support(p, state, row)
        fallbacks += fallback
        dist: Dict[int, float] = {}
        reward = 0.0
        for a, weight in support.items():
            following = fsc.next_node(node, observation, p.actions[a])
            for target, prob in p.transitions[(state, a)].items():
                key = visit((following, target))
                dist[key] = dist.get(key, 0.0) + weight * prob
            reward += weight * p.rewards.get((state, a), 0.0)
        transitions.append(dist)
        rewards.append(reward)

    if fallbacks:
        logger.warning(f"⚠️ {fallbacks} pair(s) had no mass on enabled actions; used uniform choice")
    names = tuple(f"({node},{p.state_names[state]})" for node, state in pairs)
    labels = {
        name: frozenset(i for i, (_, state) in enumerate(pairs) if state in states)
        for name, states in p.labels.items()
    }
    product = ProductDtmc(
        state_names=names,
        transitions=tuple(transitions),
        state_rewards=tuple(rewards),
        init=init,
        labels=labels,
        pairs=tuple(pairs),
    )
    logger.info(f"✅ Induced chain with {product.n_states} reachable pairs")
    return product
