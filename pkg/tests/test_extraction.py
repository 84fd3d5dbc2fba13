import pytest
import torch

from conftest import TWO_NODE_FSC, one_node_fsc
from fscforge.exceptions.extraction_error import ExtractionError
from fscforge.exceptions.model_format_error import ModelFormatError
from fscforge.exceptions.model_validation_error import ModelValidationError
from fscforge.extraction.extraction import (
    FscExtractor,
    Step,
    build_fsc,
    extraction_fidelity,
    simulate_rollouts,
    uncovered_keys,
)
from fscforge.extraction.fsc import Fsc, TransactionTable, parse_fsc, serialize_fsc
from fscforge.network.policy_network import Qbn, QuantizedPolicy, RecurrentPolicy


def quantized(pomdp, width: int = 1, seed: int = 0) -> QuantizedPolicy:
    net = RecurrentPolicy.for_pomdp(pomdp, hidden_size=4, seed=seed)
    torch.manual_seed(seed)
    net.attach_qbn(Qbn(4, width))
    return QuantizedPolicy(net)


def frozen_memory(pomdp) -> QuantizedPolicy:
    """Encoder outputs 0 everywhere, so every memory maps to the all-zero code."""
    net = RecurrentPolicy.for_pomdp(pomdp, hidden_size=4, seed=1)
    qbn = Qbn(4, 2)
    with torch.no_grad():
        qbn.encoder.weight.zero_()
        qbn.encoder.bias.zero_()
    net.attach_qbn(qbn)
    return QuantizedPolicy(net)


def test_rollouts_are_reproducible(example_pomdp):
    qpolicy = quantized(example_pomdp)
    first = simulate_rollouts(example_pomdp, qpolicy, 50, 10, master_seed=4)
    second = simulate_rollouts(example_pomdp, qpolicy, 50, 10, master_seed=4)
    threaded = simulate_rollouts(example_pomdp, qpolicy, 50, 10, master_seed=4, threads=4)
    assert first == second == threaded


def test_no_rollouts_gives_no_trajectories(example_pomdp):
    assert simulate_rollouts(example_pomdp, quantized(example_pomdp), 0, 10, master_seed=1) == []


def test_every_rollout_starts_on_blue(example_pomdp):
    trajectories = simulate_rollouts(example_pomdp, quantized(example_pomdp), 1000, 5, master_seed=2)
    blue = example_pomdp.observation_index["blue"]
    assert all(t and t[0].observation == blue for t in trajectories)
    assert all(t[0].state in (0, 1, 2) for t in trajectories)


def test_rollouts_stop_in_labelled_sinks(example_pomdp):
    trajectories = simulate_rollouts(example_pomdp, quantized(example_pomdp), 200, 50, master_seed=3)
    for trajectory in trajectories:
        assert all(step.state not in (3, 4) for step in trajectory)


def test_transaction_table_keeps_the_majority_successor():
    table = TransactionTable((0,))
    for _ in range(3):
        table.record((0,), 0, 1, (0,))
    for _ in range(7):
        table.record((0,), 0, 1, (1,))
    assert table.successor((0, 0, 1)) == table.node_of((1,)) == 1
    assert table.conflicts() == 1


def test_transaction_table_ties_go_to_lowest_node():
    table = TransactionTable((1,))
    table.record((1,), 0, 0, (-1,))
    table.record((1,), 0, 0, (1,))
    assert table.successor((0, 0, 0)) == 0
    assert table.codes == ((1,), (-1,))


def test_majority_vote_reaches_the_controller(example_pomdp):
    qpolicy = quantized(example_pomdp)
    start = qpolicy.initial_code
    other = (1,) if start != (1,) else (-1,)
    trajectories = [[Step(start, 0, 0, start, 0)]] * 3 + [[Step(start, 0, 0, other, 0)]] * 7
    fsc = build_fsc(trajectories, qpolicy, example_pomdp)
    assert fsc.n_nodes == 2
    assert fsc.next_node(0, "blue", "up") == 1


def test_node_count_is_bounded_by_code_space(example_pomdp):
    for width in (1, 2):
        qpolicy = quantized(example_pomdp, width=width, seed=width)
        trajectories = simulate_rollouts(example_pomdp, qpolicy, 300, 10, master_seed=5)
        assert FscExtractor(example_pomdp).build(trajectories, qpolicy).n_nodes <= 3 ** width


def test_constant_memory_gives_one_node(example_pomdp):
    qpolicy = frozen_memory(example_pomdp)
    trajectories = simulate_rollouts(example_pomdp, qpolicy, 100, 10, master_seed=6)
    fsc = build_fsc(trajectories, qpolicy, example_pomdp)
    assert fsc.n_nodes == 1
    assert set(fsc.delta.values()) == {0}
    assert fsc.codes == ((0, 0),)


def test_alpha_reproduces_the_network(example_pomdp):
    qpolicy = quantized(example_pomdp, width=2, seed=7)
    trajectories = simulate_rollouts(example_pomdp, qpolicy, 300, 10, master_seed=7)
    fsc = build_fsc(trajectories, qpolicy, example_pomdp)
    assert extraction_fidelity(fsc, qpolicy, trajectories, example_pomdp) <= 1e-12
    for node in range(fsc.n_nodes):
        assert set(fsc.alpha[(node, "blue")]) <= {"up", "down"}
        assert fsc.alpha[(node, "s3")] == {"a": 1.0}


def test_memory_updates_cover_the_visited_keys(example_pomdp):
    qpolicy = quantized(example_pomdp, width=1, seed=8)
    trajectories = simulate_rollouts(example_pomdp, qpolicy, 500, 10, master_seed=8)
    fsc = build_fsc(trajectories, qpolicy, example_pomdp)
    for trajectory in trajectories:
        for step in trajectory:
            node = fsc.codes.index(step.code)
            key = (node, example_pomdp.observations[step.observation], example_pomdp.actions[step.action])
            assert key in fsc.delta
    # Sinks end every rollout, so their rows are never followed by a recorded update.
    assert (0, "s3", "a") in uncovered_keys(fsc, example_pomdp)


def test_empty_trajectories_are_rejected(example_pomdp):
    with pytest.raises(ExtractionError):
        build_fsc([[], []], quantized(example_pomdp), example_pomdp)


def test_fidelity_needs_codes(example_pomdp):
    with pytest.raises(ExtractionError):
        extraction_fidelity(parse_fsc(TWO_NODE_FSC), quantized(example_pomdp), [], example_pomdp)


def test_controller_text_round_trip():
    fsc = parse_fsc(TWO_NODE_FSC)
    assert fsc.n_nodes == 2
    assert fsc.next_node(0, "blue", "up") == 1
    assert fsc.next_node(0, "blue", "down") == 0
    assert parse_fsc(serialize_fsc(fsc)) == fsc


def test_controller_probabilities_survive_round_trip():
    fsc = parse_fsc(one_node_fsc(1 / 3))
    again = parse_fsc(serialize_fsc(fsc))
    assert again.alpha[(0, "blue")]["up"] == 1 / 3
    assert again == fsc


def test_controller_row_sum_is_checked():
    with pytest.raises(ModelFormatError) as e:
        parse_fsc("fsc\nnodes 1\ninit 0\nA 0 blue up:0.5 down:0.48\n")
    assert e.value.line == 4


@pytest.mark.parametrize("text", [
    "fsc\nnodes 1\ninit 1\n",
    "fsc\nnodes 2\ninit 0\nD 0 blue up 2\n",
    "fsc\ninit 0\n",
    "controller\nnodes 1\ninit 0\n",
])
def test_malformed_controllers(text):
    with pytest.raises(ModelFormatError):
        parse_fsc(text)


def test_controller_validation():
    with pytest.raises(ModelValidationError):
        Fsc(1, 0, {(0, "blue"): {"up": 0.98}}, {})
    with pytest.raises(ModelValidationError):
        Fsc(1, 0, {}, {(0, "blue", "up"): 3})
