import pytest

from conftest import REACH_S3, one_node_fsc
from fscforge.checker.checker import Verdict, check, mdp_optimize
from fscforge.checker.spec import parse_spec
from fscforge.environment.settings import Hyperparams, LoopConfig, QbnSchedule
from fscforge.exceptions.check_error import CheckError
from fscforge.exceptions.configuration_error import ConfigurationError
from fscforge.exceptions.extraction_error import ExtractionError
from fscforge.extraction.fsc import parse_fsc, serialize_fsc
from fscforge.pomdp.generators import gen_grid, gen_maze
from fscforge.synthesis.counterexamples import (
    CriticalPair,
    CritSet,
    average_entropy,
    critical_pairs,
    entropy_of,
    is_critical,
    pair_entropy,
)
from fscforge.synthesis.product import induce_dtmc
from fscforge.synthesis.retraining import generate_initial_data, generate_retraining_data
from fscforge.synthesis.synthesis import LoopAction, RefinementLoop, format_report, run_loop

UNIFORM_GRID_FSC = """\
fsc
nodes 1
init 0
A 0 open north:0.25 south:0.25 east:0.25 west:0.25
A 0 goal north:1
"""

SMALL_LOOP = dict(
    hyperparams=Hyperparams(epochs=5, batch_size=8, hidden_size=4, seed=3),
    schedule=QbnSchedule(hidden_rollouts=10, autoencoder_epochs=5, finetune_epochs=1),
)


def small_config(**changes) -> LoopConfig:
    settings = dict(initial_rollouts=20, extraction_rollouts=20, retrain_rollouts=3, max_steps=10, seed=3)
    settings.update(changes)
    return LoopConfig(**settings)


def test_one_node_product(example_pomdp, one_node):
    product = induce_dtmc(example_pomdp, one_node)
    assert product.pairs == ((0, 0), (0, 1), (0, 2), (0, 3))
    assert product.state_names[0] == "(0,s0)"
    assert product.labels["s3"] == frozenset({3})
    assert product.labels["s4"] == frozenset()


def test_mixed_controller_reaches_every_state(example_pomdp):
    product = induce_dtmc(example_pomdp, parse_fsc(one_node_fsc(0.5)))
    assert product.n_states == 5


def test_memoryless_product_matches_direct_substitution(example_pomdp):
    p_up = 0.3
    product = induce_dtmc(example_pomdp, parse_fsc(one_node_fsc(p_up)))
    weights = {"up": p_up, "down": 1.0 - p_up, "a": 1.0}
    for i, (_, state) in enumerate(product.pairs):
        expected = {}
        for name, a in example_pomdp.action_index.items():
            if (state, a) not in example_pomdp.transitions:
                continue
            weight = weights[name]
            for target, prob in example_pomdp.transitions[(state, a)].items():
                key = product.pair_index[(0, target)]
                expected[key] = expected.get(key, 0.0) + weight * prob
        assert product.transitions[i] == pytest.approx(expected)


def test_two_node_product(example_pomdp, two_node):
    product = induce_dtmc(example_pomdp, two_node)
    assert product.pairs == ((0, 0), (0, 1), (0, 2), (1, 1), (1, 3), (0, 3))
    assert product.labels["s3"] == frozenset({4, 5})
    for row in product.transitions:
        assert sum(row.values()) == pytest.approx(1.0, abs=1e-12)


def test_missing_row_is_an_error(example_pomdp):
    with pytest.raises(ExtractionError):
        induce_dtmc(example_pomdp, parse_fsc("fsc\nnodes 1\ninit 0\nA 0 blue up:1\n"))


def test_unknown_action_is_an_error(example_pomdp):
    fsc = parse_fsc("fsc\nnodes 1\ninit 0\nA 0 blue left:1\nA 0 s3 a:1\nA 0 s4 a:1\n")
    with pytest.raises(ExtractionError):
        induce_dtmc(example_pomdp, fsc)


def test_disabled_choice_falls_back_to_uniform(example_pomdp, reach_s3):
    fsc = parse_fsc("fsc\nnodes 1\ninit 0\nA 0 blue a:1\nA 0 s3 a:1\nA 0 s4 a:1\n")
    assert check(induce_dtmc(example_pomdp, fsc), reach_s3).value == pytest.approx(0.75)


def test_product_rewards_are_expected_action_costs():
    p = gen_grid(3)
    product = induce_dtmc(p, parse_fsc(UNIFORM_GRID_FSC))
    goal = p.state_index["x2_2"]
    for i, (_, state) in enumerate(product.pairs):
        assert product.state_rewards[i] == (0.0 if state == goal else 1.0)


def test_critical_pairs_of_one_node_controller(example_pomdp, one_node, reach_s3):
    product = induce_dtmc(example_pomdp, one_node)
    crit = critical_pairs(product, check(product, reach_s3), reach_s3)
    assert {(pair.node, pair.state) for pair in crit} == {(0, 0), (0, 1)}
    assert crit.states == (0, 1)
    assert all(pair.value == 0.0 for pair in crit)


def test_satisfying_controller_has_no_critical_pairs(example_pomdp, two_node, reach_s3):
    product = induce_dtmc(example_pomdp, two_node)
    assert len(critical_pairs(product, check(product, reach_s3), reach_s3)) == 0


def test_critical_cost_pairs_exceed_the_bound():
    p = gen_grid(3)
    spec = parse_spec('R<=2.15 [ F "goal" ]')
    product = induce_dtmc(p, parse_fsc(UNIFORM_GRID_FSC))
    result = check(product, spec)
    assert result.verdict is Verdict.UNSAT
    crit = critical_pairs(product, result, spec)
    assert len(crit)
    flagged = {(pair.node, pair.state) for pair in crit}
    for i, pair in enumerate(product.pairs):
        assert (pair in flagged) == (result.values[i] > 2.15)
    assert crit.states == tuple(sorted({state for _, state in flagged}))


def test_critical_pairs_need_a_bound(example_pomdp, one_node):
    product = induce_dtmc(example_pomdp, one_node)
    query = parse_spec('Pmax=? [ F "s3" ]')
    with pytest.raises(CheckError):
        critical_pairs(product, check(product, query), query)


@pytest.mark.parametrize("spec, value, critical", [
    ('P>=0.5 [ F "s3" ]', 0.4, True),
    ('P>=0.5 [ F "s3" ]', 0.5, False),
    ('P>0.5 [ F "s3" ]', 0.5, False),
    ('P<0.5 [ F "s3" ]', 0.5, True),
    ('P<=0.5 [ F "s3" ]', 0.5, False),
])
def test_is_critical(spec, value, critical):
    assert is_critical(parse_spec(spec), value) is critical


def test_pair_entropy(example_pomdp, one_node):
    assert pair_entropy(one_node, example_pomdp, 0, 0) == 0.0
    assert pair_entropy(parse_fsc(one_node_fsc(0.5)), example_pomdp, 0, 0) == 1.0
    skewed = parse_fsc(one_node_fsc(0.9))
    assert pair_entropy(skewed, example_pomdp, 0, 0) == pytest.approx(0.4689955936, abs=1e-9)
    assert pair_entropy(skewed, example_pomdp, 0, 3) == 0.0


def test_average_entropy(example_pomdp):
    fsc = parse_fsc(one_node_fsc(0.5))
    assert average_entropy(fsc, [(0, 0), (0, 3)], example_pomdp) == 0.5
    with pytest.raises(CheckError):
        average_entropy(fsc, [], example_pomdp)


def test_retraining_from_s2_goes_up(example_pomdp, reach_s3):
    crit = CritSet((CriticalPair(0, 2, 0.0),), reach_s3)
    batch = generate_retraining_data(example_pomdp, crit, reach_s3, small_config(retrain_rollouts=5))
    blue, up = example_pomdp.observation_index["blue"], example_pomdp.action_index["up"]
    assert batch.sequences == [[(blue, up)]] * 5


def test_retraining_labels_follow_shortest_paths():
    p = gen_grid(3)
    spec = parse_spec('R<=2.15 [ F "goal" ]')
    goal = p.state_index["x2_2"]
    crit = CritSet(tuple(CriticalPair(0, s, 5.0) for s in range(p.n_states) if s != goal), spec)
    solution = mdp_optimize(p.underlying_mdp(), spec)
    batch = generate_retraining_data(p, crit, spec, small_config(retrain_rollouts=1), solution=solution)
    assert len(batch) == 8
    for state, sequence in zip(crit.states, batch.sequences):
        assert len(sequence) == solution.values[state]
        assert {p.actions[a] for _, a in sequence} <= {"south", "east"}


def test_uniform_tie_breaking_demonstrates_every_optimal_move():
    p = gen_grid(3)
    spec = parse_spec('R<=4 [ F "goal" ]')
    crit = CritSet((CriticalPair(0, p.state_index["x0_0"], 4.0),), spec)
    first_moves = {}
    for rule in ("uniform", "first"):
        batch = generate_retraining_data(p, crit, spec, small_config(retrain_rollouts=40, tie_breaking=rule))
        first_moves[rule] = {p.actions[sequence[0][1]] for sequence in batch.sequences}
    assert first_moves == {"uniform": {"south", "east"}, "first": {"south"}}


def test_grid_demonstrations_take_shortest_paths():
    p = gen_grid(3)
    batch = generate_initial_data(p, parse_spec('R<=4 [ F "goal" ]'), small_config(initial_rollouts=50))
    assert {p.actions[a] for sequence in batch.sequences for _, a in sequence} == {"south", "east"}
    assert all(len(sequence) <= 4 for sequence in batch.sequences)


def test_unknown_tie_breaking_rule_is_rejected():
    with pytest.raises(ConfigurationError):
        LoopConfig(tie_breaking="random")


def test_infeasible_critical_states_are_skipped(example_pomdp, reach_s3):
    crit = CritSet((CriticalPair(0, 4, 0.0),), reach_s3)
    assert len(generate_retraining_data(example_pomdp, crit, reach_s3, small_config())) == 0


def test_retraining_needs_critical_pairs(example_pomdp, reach_s3):
    with pytest.raises(CheckError):
        generate_retraining_data(example_pomdp, CritSet((), reach_s3), reach_s3, small_config())


def test_decide(example_pomdp, one_node, reach_s3):
    loop = RefinementLoop(example_pomdp, reach_s3, LoopConfig(eta=0.5, bh_max=4))
    product = induce_dtmc(example_pomdp, one_node)
    result = check(product, reach_s3)
    crit = critical_pairs(product, result, reach_s3)
    entropy = entropy_of(one_node, crit, example_pomdp)
    assert entropy == 0.0
    assert loop.decide(result, crit, entropy, 1) is LoopAction.INCREMENT
    assert loop.decide(result, crit, entropy, 4) is LoopAction.EXHAUSTED
    assert loop.decide(result, crit, 0.8, 1) is LoopAction.RETRAIN

    satisfied = check(induce_dtmc(example_pomdp, parse_fsc(one_node_fsc(1.0))), parse_spec('P>=0.3 [ F "s3" ]'))
    assert loop.decide(satisfied, CritSet((), reach_s3), None, 1) is LoopAction.DONE


def test_loop_rejects_queries(example_pomdp):
    with pytest.raises(ConfigurationError):
        RefinementLoop(example_pomdp, parse_spec('Pmax=? [ F "s3" ]'))


def test_trivial_bound_finishes_in_one_iteration(example_pomdp):
    spec = parse_spec('P>=0 [ F "s3" ]')
    report = run_loop(example_pomdp, spec, small_config(), **SMALL_LOOP)
    assert report.status == "done"
    assert len(report.records) == 1
    assert report.verdict is Verdict.SAT
    assert report.best_iteration == 1
    assert check(induce_dtmc(example_pomdp, report.fsc), spec).value == report.value

    lines = format_report(report).splitlines()
    assert lines[0] == "iter bh nodes verdict value entropy fsc_entropy action"
    iteration, b_h, nodes, verdict, _, entropy, _, action = lines[1].split()
    assert (iteration, b_h, verdict, entropy, action) == ("1", "1", "SAT", "-", "done")
    assert int(nodes) == report.fsc.n_nodes


@pytest.mark.slow
def test_loop_keeps_its_best_controller(example_pomdp):
    spec = parse_spec(REACH_S3)
    cfg = small_config(initial_rollouts=100, extraction_rollouts=200, max_iterations=3)
    report = run_loop(example_pomdp, spec, cfg, **SMALL_LOOP)
    assert 1 <= len(report.records) <= 3
    assert report.best_iteration in [r.iteration for r in report.records]
    best = max(r.value for r in report.records)
    assert report.value == best
    assert (report.status == "done") == (report.verdict is Verdict.SAT)


def test_report_and_controller_do_not_depend_on_thread_count(example_pomdp, reach_s3):
    outputs = set()
    for threads in (1, 4, 1):
        report = run_loop(example_pomdp, reach_s3, small_config(max_iterations=2, threads=threads), **SMALL_LOOP)
        outputs.add((format_report(report), serialize_fsc(report.fsc)))
    assert len(outputs) == 1


@pytest.mark.slow
@pytest.mark.parametrize("make, c, spec_text", [
    (gen_grid, 3, 'R<=4.0 [ F "goal" ]'),
    (gen_maze, 1, 'R<=6.0 [ F "goal" ]'),
])
def test_loop_reaches_cost_bound(make, c, spec_text):
    p = make(c)
    spec = parse_spec(spec_text)
    report = run_loop(p, spec, LoopConfig(seed=7))
    assert report.status == "done"
    assert report.verdict is Verdict.SAT
    assert len(report.records) <= 10
    assert report.value <= spec.bound
    assert check(induce_dtmc(p, report.fsc), spec).value == report.value
