import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from fscforge.environment.seeding import derive_seed
from fscforge.exceptions.extraction_error import ExtractionError
from fscforge.extraction.fsc import Fsc, TransactionTable
from fscforge.network.policy_network import Code, QuantizedPolicy
from fscforge.pomdp.pomdp import Pomdp, sample_index


class Step(NamedTuple):
    code: Code
    observation: int
    action: int
    next_code: Code
    state: int


Trajectory = List[Step]


def _rollout(p: Pomdp, qpolicy: QuantizedPolicy, max_steps: int, seed: int) -> Trajectory:
    rng = np.random.default_rng(seed)
    state = p.sample_initial(rng)
    code = qpolicy.initial_code
    steps: Trajectory = []
    for _ in range(max_steps):
        if state in p.terminal_states():
            break
        z = p.obs_map[state]
        a = sample_index(qpolicy.distribution(code, z), rng)
        next_code = qpolicy.successor(code, z, a)
        steps.append(Step(code, z, a, next_code, state))
        state = p.sample_successor(state, a, rng)
        code = next_code
    return steps


def simulate_rollouts(p: Pomdp, qpolicy: QuantizedPolicy, n_rollouts: int, max_steps: int,
                      master_seed: int, threads: int = 1, phase: str = "extract") -> List[Trajectory]:
    """
    Samples trajectories of the quantized policy on `p`.

    Trajectory i draws from its own generator seeded by (master_seed, phase, i), so the
    result does not depend on `threads`.
    """
    def rollout(i: int) -> Trajectory:
        return _rollout(p, qpolicy, max_steps, derive_seed(master_seed, phase, i))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(rollout, range(n_rollouts)))
    return [rollout(i) for i in range(n_rollouts)]


class FscExtractor:
    """
    Builds an Fsc from quantized-policy trajectories.

    Example:
        extractor = FscExtractor(pomdp)
        fsc = extractor.build(trajectories, QuantizedPolicy(net))
    """

    def __init__(self, pomdp: Pomdp, logger=None):
        self.pomdp = pomdp
        self.logger = logger or logging.getLogger(__name__)

    def build(self, trajectories: Sequence[Trajectory], qpolicy: QuantizedPolicy) -> Fsc:
        if not any(trajectories):
            self.logger.error("❌ No trajectory steps to extract from")
            raise ExtractionError("Trajectory set is empty.")
        p = self.pomdp
        table = TransactionTable(qpolicy.initial_code)
        for trajectory in trajectories:
            for step in trajectory:
                table.record(step.code, step.observation, step.action, step.next_code)
        codes = table.codes
        if table.conflicts():
            self.logger.warning(f"⚠️ {table.conflicts()} transaction keys saw several successors; majority kept")

        observed = sorted(set(p.obs_map))
        alpha: Dict[Tuple[int, str], Dict[str, float]] = {}
        for node, code in enumerate(codes):
            for z in observed:
                dist = qpolicy.distribution(code, z)
                alpha[(node, p.observations[z])] = {
                    p.actions[a]: float(prob) for a, prob in enumerate(dist) if prob > 0.0
                }
        delta = {
            (node, p.observations[z], p.actions[a]): table.successor((node, z, a))
            for (node, z, a) in table.counts
        }
        fsc = Fsc(len(codes), 0, alpha, delta, codes=codes)

        missing = len(uncovered_keys(fsc, p))
        if missing:
            self.logger.warning(f"⚠️ {missing} (node, observation, action) keys unseen; they keep their node")
        self.logger.info(f"✅ Extracted FSC with {fsc.n_nodes} nodes and {len(delta)} memory updates")
        return fsc


def build_fsc(trajectories: Sequence[Trajectory], qpolicy: QuantizedPolicy, p: Pomdp) -> Fsc:
    return FscExtractor(p).build(trajectories, qpolicy)


def uncovered_keys(fsc: Fsc, p: Pomdp) -> List[Tuple[int, str, str]]:
    """Keys with positive action probability and no recorded memory update."""
    return [
        (node, observation, action)
        for (node, observation), row in sorted(fsc.alpha.items())
        if observation in p.observation_index
        for action, prob in row.items()
        if prob > 0.0 and (node, observation, action) not in fsc.delta
    ]


def extraction_fidelity(fsc: Fsc, qpolicy: QuantizedPolicy, trajectories: Sequence[Trajectory],
                        p: Pomdp) -> float:
    """Largest total-variation distance between alpha and the network over visited (node, observation)."""
    if not fsc.codes:
        raise ExtractionError("Controller carries no code table; it was not extracted from a network.")
    node_of = {code: node for node, code in enumerate(fsc.codes)}
    worst = 0.0
    seen = set()
    for trajectory in trajectories:
        for step in trajectory:
            key = (step.code, step.observation)
            if key in seen:
                continue
            seen.add(key)
            node: Optional[int] = node_of.get(step.code)
            if node is None:
                raise ExtractionError(f"Code {step.code} is not a node of the controller.")
            row = fsc.action_distribution(node, p.observations[step.observation]) or {}
            extracted = np.array([row.get(a, 0.0) for a in p.actions])
            worst = max(worst, 0.5 * float(np.abs(extracted - qpolicy.distribution(*key)).sum()))
    return worst
