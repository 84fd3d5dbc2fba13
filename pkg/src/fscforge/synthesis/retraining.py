import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np

from fscforge.checker.checker import MdpSolution, ModelChecker
from fscforge.checker.spec import Spec
from fscforge.environment.seeding import derive_seed
from fscforge.environment.settings import LoopConfig
from fscforge.exceptions.check_error import CheckError
from fscforge.network.training import LabelledSequence, TrainingBatch
from fscforge.pomdp.pomdp import Pomdp
from fscforge.synthesis.counterexamples import CritSet

logger = logging.getLogger(__name__)


def is_feasible(solution: MdpSolution, spec: Spec, state: int) -> bool:
    """Whether the optimal MDP policy can make progress towards the objective from `state`."""
    value = solution.values[state]
    if not np.isfinite(value):
        return False
    if spec.is_probability and spec.optimization_direction == "max":
        return value > 0.0
    return True


def _demonstration(p: Pomdp, solution: MdpSolution, start: Optional[int], max_steps: int,
                   seed: int, tie_breaking: str) -> LabelledSequence:
    rng = np.random.default_rng(seed)
    state = p.sample_initial(rng) if start is None else start
    sequence: LabelledSequence = []
    for _ in range(max_steps):
        if state in p.terminal_states():
            break
        options = solution.choices_of(state)
        if tie_breaking == "uniform" and len(options) > 1:
            action = options[int(rng.integers(len(options)))]
        else:
            action = options[0]
        sequence.append((p.obs_map[state], action))
        state = p.sample_successor(state, action, rng)
    return sequence


def generate_demonstrations(p: Pomdp, solution: MdpSolution, starts: Sequence[Optional[int]],
                            max_steps: int, master_seed: int, phase: str, threads: int = 1,
                            tie_breaking: str = "uniform") -> TrainingBatch:
    """
    Rolls out the MDP policy once per entry of `starts` (None draws from the initial
    distribution) and labels each visited observation with the chosen action. Under
    "uniform" tie-breaking every step draws among the state's optimal progressing actions,
    under "first" it always takes the lowest-indexed one.
    """
    def rollout(i: int) -> LabelledSequence:
        return _demonstration(p, solution, starts[i], max_steps, derive_seed(master_seed, phase, i), tie_breaking)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            sequences = list(pool.map(rollout, range(len(starts))))
    else:
        sequences = [rollout(i) for i in range(len(starts))]
    return TrainingBatch([s for s in sequences if s])


def generate_initial_data(p: Pomdp, spec: Spec, cfg: LoopConfig, checker: Optional[ModelChecker] = None,
                          solution: Optional[MdpSolution] = None) -> TrainingBatch:
    solution = solution or (checker or ModelChecker()).mdp_optimize(p.underlying_mdp(), spec)
    batch = generate_demonstrations(
        p, solution, [None] * cfg.initial_rollouts, cfg.max_steps, cfg.seed, "initial", cfg.threads,
        cfg.tie_breaking,
    )
    logger.info(f"📊 {len(batch)} initial demonstrations from the MDP policy")
    return batch


def generate_retraining_data(p: Pomdp, crit: CritSet, spec: Spec, cfg: LoopConfig,
                             checker: Optional[ModelChecker] = None, solution: Optional[MdpSolution] = None,
                             phase: str = "retrain") -> TrainingBatch:
    """
    Demonstrations of the MDP-optimal policy started in every critical state, memory
    ignored, `cfg.retrain_rollouts` per state.
    """
    if not len(crit):
        raise CheckError("No critical pairs to generate retraining data for.")
    solution = solution or (checker or ModelChecker()).mdp_optimize(p.underlying_mdp(), spec)
    starts: List[int] = []
    for state in crit.states:
        if not is_feasible(solution, spec, state):
            logger.warning(f"⚠️ Skipping critical state {p.state_names[state]}: objective infeasible there")
            continue
        starts.extend([state] * cfg.retrain_rollouts)
    batch = generate_demonstrations(
        p, solution, starts, cfg.max_steps, cfg.seed, phase, cfg.threads, cfg.tie_breaking
    )
    logger.info(f"📊 {len(batch)} retraining sequences from {len(crit.states)} critical state(s)")
    return batch
