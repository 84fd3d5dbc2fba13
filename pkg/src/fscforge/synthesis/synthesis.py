import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

from fscforge.checker.checker import CheckResult, ModelChecker, Verdict, format_value
from fscforge.checker.spec import Spec
from fscforge.environment.seeding import derive_seed
from fscforge.environment.settings import Hyperparams, LoopConfig, QbnSchedule, SolverConfig
from fscforge.exceptions.configuration_error import ConfigurationError
from fscforge.exceptions.training_error import TrainingError
from fscforge.extraction.extraction import FscExtractor, simulate_rollouts
from fscforge.extraction.fsc import Fsc
from fscforge.network.policy_network import QuantizedPolicy, RecurrentPolicy
from fscforge.network.training import TrainingBatch, collect_hidden_states, insert_qbn, train_bc
from fscforge.pomdp.pomdp import Pomdp
from fscforge.synthesis.counterexamples import CritSet, average_entropy, critical_pairs, entropy_of
from fscforge.synthesis.product import ProductDtmc, induce_dtmc
from fscforge.synthesis.retraining import generate_initial_data, generate_retraining_data

RETRAIN_WEIGHT = 2.0


def _entropy_cell(value: Optional[float]) -> str:
    return "-" if value is None else format_value(value)


class LoopAction(Enum):
    DONE = "done"
    RETRAIN = "retrain"
    INCREMENT = "increment"
    EXHAUSTED = "exhausted"


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    b_h: int
    nodes: int
    verdict: Verdict
    value: float
    crit_entropy: Optional[float]
    fsc_entropy: float
    critical: int
    action: LoopAction


@dataclass
class LoopReport:
    records: List[IterationRecord] = field(default_factory=list)
    fsc: Optional[Fsc] = None
    product: Optional[ProductDtmc] = None
    result: Optional[CheckResult] = None
    best_iteration: int = 0

    @property
    def verdict(self) -> Optional[Verdict]:
        return self.result.verdict if self.result else None

    @property
    def value(self) -> Optional[float]:
        return self.result.value if self.result else None

    @property
    def status(self) -> str:
        if not self.records:
            return "empty"
        last = self.records[-1].action
        if last in (LoopAction.DONE, LoopAction.EXHAUSTED):
            return last.value
        return "max-iterations"


class RefinementLoop:
    """
    Train, quantize, extract, check and refine until the controller satisfies the spec.

    Example:
        loop = RefinementLoop(pomdp, parse_spec('R<=6.0 [ F "goal" ]'), LoopConfig(seed=7))
        report = loop.run()
        print(format_report(report))
    """

    def __init__(self, pomdp: Pomdp, spec: Spec, config: Optional[LoopConfig] = None,
                 hyperparams: Optional[Hyperparams] = None, schedule: Optional[QbnSchedule] = None,
                 solver: Optional[SolverConfig] = None, logger=None):
        if spec.is_query:
            raise ConfigurationError("The refinement loop needs a bounded specification.", field="spec")
        self.pomdp = pomdp
        self.spec = spec
        self.config = config or LoopConfig()
        self.hyperparams = hyperparams or Hyperparams(seed=self.config.seed)
        self.schedule = schedule or QbnSchedule()
        self.checker = ModelChecker(solver)
        self.extractor = FscExtractor(pomdp)
        self.logger = logger or logging.getLogger(__name__)
        self._solution = None

    @property
    def solution(self):
        if self._solution is None:
            self._solution = self.checker.mdp_optimize(self.pomdp.underlying_mdp(), self.spec)
        return self._solution

    def decide(self, result: CheckResult, crit: CritSet, crit_entropy: Optional[float], b_h: int) -> LoopAction:
        if result.verdict is Verdict.SAT:
            return LoopAction.DONE
        if not len(crit) or crit_entropy is None or crit_entropy <= self.config.eta:
            if b_h + 1 > self.config.bh_max:
                return LoopAction.EXHAUSTED
            return LoopAction.INCREMENT
        return LoopAction.RETRAIN

    def _is_better(self, value: float, best: Optional[float]) -> bool:
        if best is None:
            return True
        if self.spec.optimization_direction == "max":
            return value > best
        return value < best

    def _quantize(self, net: RecurrentPolicy, batch: TrainingBatch, b_h: int, iteration: int) -> None:
        cfg = self.config
        net.attach_qbn(None)
        hidden = collect_hidden_states(
            net, self.pomdp, self.schedule.hidden_rollouts, cfg.max_steps,
            derive_seed(cfg.seed, "hidden", iteration), cfg.threads,
        )
        insert_qbn(net, b_h, hidden, self.hyperparams, self.schedule, batch, logger=self.logger)

    def run(self) -> LoopReport:
        cfg, p = self.config, self.pomdp
        report = LoopReport()
        batch = generate_initial_data(p, self.spec, cfg, solution=self.solution)
        if not len(batch):
            raise TrainingError("The MDP policy produced no demonstrations from the initial distribution.")
        net = RecurrentPolicy.for_pomdp(p, self.hyperparams.hidden_size, self.hyperparams.seed)
        train_bc(net, batch, self.hyperparams, logger=self.logger)

        b_h = cfg.bh_initial
        best: Optional[float] = None
        for iteration in range(1, cfg.max_iterations + 1):
            self.logger.info(f"🔄 Iteration {iteration}: B_h={b_h}, {len(batch)} sequences")
            self._quantize(net, batch, b_h, iteration)
            qpolicy = QuantizedPolicy(net)
            trajectories = simulate_rollouts(
                p, qpolicy, cfg.extraction_rollouts, cfg.max_steps,
                derive_seed(cfg.seed, "extract", iteration), cfg.threads,
            )
            fsc = self.extractor.build(trajectories, qpolicy)
            product = induce_dtmc(p, fsc)
            result = self.checker.check(product, self.spec)
            crit = critical_pairs(product, result, self.spec)
            crit_entropy = entropy_of(fsc, crit, p) if len(crit) else None
            fsc_entropy = average_entropy(fsc, product.pairs, p)
            action = self.decide(result, crit, crit_entropy, b_h)

            new_data = None
            if action is LoopAction.RETRAIN:
                new_data = generate_retraining_data(
                    p, crit, self.spec, cfg, solution=self.solution, phase=f"retrain-{iteration}"
                )
                if not len(new_data):
                    self.logger.warning("⚠️ No retraining data from the critical states; increasing B_h instead")
                    action = LoopAction.EXHAUSTED if b_h + 1 > cfg.bh_max else LoopAction.INCREMENT

            if action is LoopAction.DONE or self._is_better(result.value, best):
                best = result.value
                report.fsc, report.product, report.result = fsc, product, result
                report.best_iteration = iteration
            report.records.append(IterationRecord(
                iteration, b_h, fsc.n_nodes, result.verdict, result.value,
                crit_entropy, fsc_entropy, len(crit), action,
            ))
            self.logger.info(
                f"📊 Iteration {iteration}: {result.verdict.value} value={format_value(result.value)} "
                f"|N|={fsc.n_nodes} |Crit|={len(crit)} H={_entropy_cell(crit_entropy)} -> {action.value}"
            )

            if action in (LoopAction.DONE, LoopAction.EXHAUSTED):
                break
            if action is LoopAction.INCREMENT:
                b_h += 1
            else:
                batch = batch.extend(new_data, RETRAIN_WEIGHT)
                net.attach_qbn(None)
                train_bc(net, batch, self.hyperparams, logger=self.logger)

        status = report.status
        if status == "done":
            self.logger.info(f"✅ Loop finished with a satisfying controller after {len(report.records)} iteration(s)")
        else:
            self.logger.warning(
                f"⚠️ Loop stopped ({status}); best controller from iteration {report.best_iteration} "
                f"with value {format_value(report.value)}"
            )
        return report


def run_loop(p: Pomdp, spec: Spec, cfg: Optional[LoopConfig] = None, **kwargs) -> LoopReport:
    return RefinementLoop(p, spec, cfg, **kwargs).run()


def format_report(report: LoopReport) -> str:
    """One line per iteration: iter bh nodes verdict value entropy fsc_entropy action."""
    lines = ["iter bh nodes verdict value entropy fsc_entropy action"]
    for r in report.records:
        lines.append(
            f"{r.iteration} {r.b_h} {r.nodes} {r.verdict.value} {format_value(r.value)} "
            f"{_entropy_cell(r.crit_entropy)} {_entropy_cell(r.fsc_entropy)} {r.action.value}"
        )
    return "\n".join(lines) + "\n"
