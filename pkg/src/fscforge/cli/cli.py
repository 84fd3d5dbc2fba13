import functools
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional

import click

from fscforge import __version__
from fscforge.checker.checker import ModelChecker, Verdict, format_value, initial_value
from fscforge.checker.spec import format_spec, parse_spec
from fscforge.environment.forge_environment import ForgeEnvironment
from fscforge.environment.settings import Hyperparams, LoopConfig, QbnSchedule, SolverConfig
from fscforge.exceptions.check_error import CheckError
from fscforge.exceptions.configuration_error import ConfigurationError
from fscforge.exceptions.extraction_error import ExtractionError
from fscforge.exceptions.model_format_error import ModelFormatError
from fscforge.exceptions.model_validation_error import ModelValidationError
from fscforge.exceptions.training_error import TrainingError
from fscforge.extraction.extraction import build_fsc, extraction_fidelity, simulate_rollouts
from fscforge.extraction.fsc import parse_fsc, serialize_fsc
from fscforge.network.checkpoint import load_checkpoint, save_checkpoint
from fscforge.network.policy_network import QuantizedPolicy, RecurrentPolicy
from fscforge.network.training import collect_hidden_states, insert_qbn, parse_dataset, train_bc
from fscforge.pomdp.generators import GENERATORS
from fscforge.pomdp.model_format import parse_dtmc, parse_pomdp, serialize_pomdp
from fscforge.synthesis.product import induce_dtmc
from fscforge.synthesis.retraining import generate_initial_data
from fscforge.synthesis.synthesis import format_report, run_loop

EXIT_SAT = 0
EXIT_UNSAT = 1
EXIT_ERROR = 2

DOMAIN_ERRORS = (
    ModelFormatError, ModelValidationError, CheckError, TrainingError, ExtractionError,
    ConfigurationError, OSError, ValueError,
)

logger = logging.getLogger("fscforge.cli")


@dataclass
class RunManifest:
    subcommand: str
    inputs: Dict[str, str]
    seed: int
    overrides: Dict[str, object] = field(default_factory=dict)
    version: str = __version__
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def write_next_to(self, out: str) -> Path:
        path = Path(f"{out}.manifest.json")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info(f"📝 Run manifest written to {path}")
        return path


def guarded(command):
    """Maps domain and I/O errors to exit code 2 with a one-line message on stderr."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except DOMAIN_ERRORS as e:
            logger.error(f"❌ {type(e).__name__}: {e}")
            click.echo(f"error: {e}", err=True)
            raise click.exceptions.Exit(EXIT_ERROR)
    return wrapper


def _read(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _write(path: str, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
    logger.info(f"📤 Wrote {path}")


def _solver(env: ForgeEnvironment, exact: Optional[bool]) -> SolverConfig:
    method = env.solver if exact is None else ("exact" if exact else "iterative")
    return SolverConfig(method=method, exact_limit=env.exact_limit)


def _verdict_exit(verdict: Verdict) -> int:
    return EXIT_UNSAT if verdict is Verdict.UNSAT else EXIT_SAT


solver_option = click.option("--exact/--iterative", "exact", default=None,
                             help="Force exact elimination or value iteration (default: FSCFORGE_SOLVER).")
seed_option = click.option("--seed", type=click.IntRange(min=0), default=None,
                           help="Master seed (default: FSCFORGE_SEED).")
tie_breaking_option = click.option("--tie-breaking", type=click.Choice(["uniform", "first"]), default="uniform",
                                   show_default=True, help="How demonstrations pick among optimal MDP actions.")


@click.group()
@click.version_option(__version__)
@click.pass_context
def main(ctx):
    """fscforge: extract, verify and refine finite-state controllers for POMDPs."""
    try:
        env = ForgeEnvironment.from_env()
    except ValueError as e:
        click.echo(f"error: {e}", err=True)
        ctx.exit(EXIT_ERROR)
    logging.basicConfig(level=env.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = env


@main.command()
@click.argument("kind", type=click.Choice(sorted(GENERATORS)))
@click.argument("c", type=int)
@click.option("--out", type=str, default=None, help="Write the model to this file.")
@guarded
def gen(kind: str, c: int, out: Optional[str]):
    """Generate a Maze(c), Grid(c) or Navigation(c) benchmark."""
    try:
        pomdp = GENERATORS[kind](c)
    except ConfigurationError as e:
        raise click.BadParameter(e.message, param_hint="C") from e
    if out:
        _write(out, serialize_pomdp(pomdp))
    click.echo(f"|S|={pomdp.n_states} |Z|={pomdp.n_observations}")


@main.command()
@click.argument("model_path")
@click.argument("fsc_path")
@click.argument("spec_text")
@solver_option
@click.pass_obj
@guarded
def check(env: ForgeEnvironment, model_path: str, fsc_path: str, spec_text: str, exact: Optional[bool]):
    """Check the chain induced by an FSC on a POMDP against a specification."""
    pomdp = parse_pomdp(_read(model_path))
    fsc = parse_fsc(_read(fsc_path))
    spec = parse_spec(spec_text)
    result = ModelChecker(_solver(env, exact)).check(induce_dtmc(pomdp, fsc), spec)
    click.echo(f"{result.verdict.value} value={format_value(result.value)}")
    sys.exit(_verdict_exit(result.verdict))


@main.command(name="eval")
@click.argument("spec_text")
@click.option("--dtmc", "dtmc_path", default=None, help="Chain file to evaluate.")
@click.option("--model", "model_path", default=None, help="POMDP file, used with --fsc.")
@click.option("--fsc", "fsc_path", default=None, help="FSC file, used with --model.")
@click.option("--states", is_flag=True, help="Also print the value of every chain state.")
@solver_option
@click.pass_obj
@guarded
def evaluate(env: ForgeEnvironment, spec_text: str, dtmc_path: Optional[str], model_path: Optional[str],
             fsc_path: Optional[str], states: bool, exact: Optional[bool]):
    """Evaluate a specification (bounded or =?) on a DTMC or on a model+FSC pair."""
    if dtmc_path and not (model_path or fsc_path):
        chain = parse_dtmc(_read(dtmc_path))
    elif model_path and fsc_path and not dtmc_path:
        chain = induce_dtmc(parse_pomdp(_read(model_path)), parse_fsc(_read(fsc_path)))
    else:
        raise click.UsageError("Give either --dtmc or both --model and --fsc.")
    spec = parse_spec(spec_text)
    result = ModelChecker(_solver(env, exact)).check(chain, spec)
    if states:
        for name, value in zip(chain.state_names, result.values):
            click.echo(f"{name} {format_value(float(value))}")
    click.echo(f"{result.verdict.value} value={format_value(result.value)}")
    sys.exit(_verdict_exit(result.verdict))


@main.command(name="solve-mdp")
@click.argument("model_path")
@click.argument("spec_text")
@solver_option
@click.pass_obj
@guarded
def solve_mdp(env: ForgeEnvironment, model_path: str, spec_text: str, exact: Optional[bool]):
    """Solve the fully observable MDP underlying a POMDP; prints one 'state action value' line per state."""
    pomdp = parse_pomdp(_read(model_path))
    spec = parse_spec(spec_text)
    solution = ModelChecker(_solver(env, exact)).mdp_optimize(pomdp.underlying_mdp(), spec)
    for s, name in enumerate(pomdp.state_names):
        click.echo(f"{name} {pomdp.actions[solution.action_of(s)]} {format_value(float(solution.values[s]))}")
    click.echo(f"value={format_value(initial_value(pomdp.init_vector, solution.values))}")


@main.command()
@click.argument("model_path")
@click.argument("spec_text")
@click.option("--out", required=True, help="Checkpoint file to write.")
@click.option("--dataset", "dataset_path", default=None, help="Train on 'seq' lines instead of MDP demonstrations.")
@click.option("--rollouts", type=click.IntRange(min=1), default=200, show_default=True)
@click.option("--max-steps", type=click.IntRange(min=1), default=40, show_default=True)
@click.option("--epochs", type=click.IntRange(min=1), default=300, show_default=True)
@click.option("--hidden", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--lr", type=float, default=0.01, show_default=True)
@seed_option
@tie_breaking_option
@solver_option
@click.pass_obj
@guarded
def train(env: ForgeEnvironment, model_path: str, spec_text: str, out: str, dataset_path: Optional[str],
          rollouts: int, max_steps: int, epochs: int, hidden: int, lr: float, seed: Optional[int],
          tie_breaking: str, exact: Optional[bool]):
    """Behaviour-clone a recurrent policy from a dataset or from the MDP-optimal policy."""
    seed = env.seed if seed is None else seed
    pomdp = parse_pomdp(_read(model_path))
    spec = parse_spec(spec_text)
    if dataset_path:
        batch = parse_dataset(_read(dataset_path), pomdp)
    else:
        cfg = LoopConfig(initial_rollouts=rollouts, max_steps=max_steps, seed=seed, threads=env.threads,
                         tie_breaking=tie_breaking)
        batch = generate_initial_data(pomdp, spec, cfg, checker=ModelChecker(_solver(env, exact)))
    hp = Hyperparams(learning_rate=lr, epochs=epochs, seed=seed, hidden_size=hidden)
    net = RecurrentPolicy.for_pomdp(pomdp, hidden, seed)
    _, losses = train_bc(net, batch, hp)
    save_checkpoint(net, out)
    RunManifest(
        "train", {"model": model_path, "dataset": dataset_path or ""}, seed,
        {"spec": format_spec(spec), "rollouts": rollouts, "max_steps": max_steps, "epochs": epochs,
         "hidden": hidden, "lr": lr, "tie_breaking": tie_breaking},
    ).write_next_to(out)
    click.echo(f"sequences={len(batch)} loss={format_value(losses[-1])}")


@main.command()
@click.argument("model_path")
@click.argument("checkpoint_path")
@click.option("--bh", type=click.IntRange(min=1), default=1, show_default=True, help="Bottleneck width B_h.")
@click.option("--out", required=True, help="FSC file to write.")
@click.option("--checkpoint-out", default=None, help="Also save the network with its bottleneck.")
@click.option("--dataset", "dataset_path", default=None, help="Fine-tune with the bottleneck on these sequences.")
@click.option("--rollouts", type=click.IntRange(min=1), default=500, show_default=True)
@click.option("--max-steps", type=click.IntRange(min=1), default=40, show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Rollout threads (default: FSCFORGE_THREADS).")
@seed_option
@click.pass_obj
@guarded
def extract(env: ForgeEnvironment, model_path: str, checkpoint_path: str, bh: int, out: str,
            checkpoint_out: Optional[str], dataset_path: Optional[str], rollouts: int, max_steps: int,
            threads: Optional[int], seed: Optional[int]):
    """Insert a QBN of width B_h into a trained network and extract an FSC from it."""
    seed = env.seed if seed is None else seed
    threads = env.threads if threads is None else threads
    pomdp = parse_pomdp(_read(model_path))
    net = load_checkpoint(checkpoint_path)
    if (net.n_observations, net.n_actions) != (pomdp.n_observations, pomdp.n_actions):
        raise ExtractionError("Checkpoint dimensions do not match the model.")
    batch = parse_dataset(_read(dataset_path), pomdp) if dataset_path else None
    schedule = QbnSchedule(hidden_rollouts=rollouts)
    hp = Hyperparams(seed=seed, hidden_size=net.hidden_size)

    net.attach_qbn(None)
    hidden = collect_hidden_states(net, pomdp, schedule.hidden_rollouts, max_steps, seed, threads)
    _, qbn_report = insert_qbn(net, bh, hidden, hp, schedule, batch)
    qpolicy = QuantizedPolicy(net)
    trajectories = simulate_rollouts(pomdp, qpolicy, rollouts, max_steps, seed, threads)
    fsc = build_fsc(trajectories, qpolicy, pomdp)
    fidelity = extraction_fidelity(fsc, qpolicy, trajectories, pomdp)
    _write(out, serialize_fsc(fsc))
    if checkpoint_out:
        save_checkpoint(net, checkpoint_out)
    RunManifest(
        "extract", {"model": model_path, "checkpoint": checkpoint_path, "dataset": dataset_path or ""}, seed,
        {"bh": bh, "rollouts": rollouts, "max_steps": max_steps, "threads": threads},
    ).write_next_to(out)
    click.echo(
        f"nodes={fsc.n_nodes} codes={qbn_report.distinct_codes} "
        f"mse={format_value(qbn_report.reconstruction_mse)} fidelity={format_value(fidelity)}"
    )


@main.command()
@click.argument("model_path")
@click.argument("spec_text")
@click.option("--out", default=None, help="Write the final FSC here.")
@click.option("--bh", type=click.IntRange(min=1), default=1, show_default=True, help="Initial B_h.")
@click.option("--bh-max", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--eta", type=click.FloatRange(0.0, 1.0), default=0.5, show_default=True)
@click.option("--max-iters", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--rollouts", type=click.IntRange(min=1), default=500, show_default=True,
              help="Extraction rollouts per iteration.")
@click.option("--max-steps", type=click.IntRange(min=1), default=40, show_default=True)
@click.option("--epochs", type=click.IntRange(min=1), default=300, show_default=True)
@click.option("--retrain-rollouts", type=click.IntRange(min=1), default=100, show_default=True,
              help="Demonstrations per critical state and retraining round.")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Rollout threads (default: FSCFORGE_THREADS).")
@seed_option
@tie_breaking_option
@solver_option
@click.pass_obj
@guarded
def loop(env: ForgeEnvironment, model_path: str, spec_text: str, out: Optional[str], bh: int, bh_max: int,
         eta: float, max_iters: int, rollouts: int, max_steps: int, epochs: int, threads: Optional[int],
         retrain_rollouts: int, seed: Optional[int], tie_breaking: str, exact: Optional[bool]):
    """Run the extract-check-refine loop and print one report line per iteration."""
    seed = env.seed if seed is None else seed
    threads = env.threads if threads is None else threads
    pomdp = parse_pomdp(_read(model_path))
    spec = parse_spec(spec_text)
    cfg = LoopConfig(eta=eta, bh_initial=bh, bh_max=max(bh, bh_max), max_iterations=max_iters,
                     extraction_rollouts=rollouts, retrain_rollouts=retrain_rollouts, max_steps=max_steps,
                     seed=seed, threads=threads, tie_breaking=tie_breaking)
    report = run_loop(pomdp, spec, cfg, hyperparams=Hyperparams(epochs=epochs, seed=seed),
                      solver=_solver(env, exact))
    click.echo(format_report(report), nl=False)
    click.echo(f"final {report.status} {report.verdict.value} value={format_value(report.value)} "
               f"nodes={report.fsc.n_nodes} iteration={report.best_iteration}")
    if out:
        _write(out, serialize_fsc(report.fsc))
        RunManifest(
            "loop", {"model": model_path}, seed,
            {"spec": format_spec(spec), "bh": bh, "bh_max": bh_max, "eta": eta, "max_iters": max_iters,
             "rollouts": rollouts, "retrain_rollouts": retrain_rollouts, "max_steps": max_steps, "epochs": epochs,
             "threads": threads, "tie_breaking": tie_breaking},
        ).write_next_to(out)
    sys.exit(_verdict_exit(report.verdict))
