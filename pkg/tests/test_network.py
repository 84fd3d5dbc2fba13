import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from fscforge.checker.spec import parse_spec
from fscforge.environment.settings import Hyperparams, LoopConfig, QbnSchedule
from fscforge.exceptions.extraction_error import ExtractionError
from fscforge.exceptions.model_format_error import ModelFormatError
from fscforge.exceptions.training_error import TrainingError
from fscforge.network.checkpoint import dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from fscforge.network.policy_network import (
    DTYPE,
    Qbn,
    QuantizedPolicy,
    RecurrentPolicy,
    action_distribution_for_code,
    forward_sequence,
)
from fscforge.network.training import (
    TrainingBatch,
    collect_hidden_states,
    insert_qbn,
    parse_dataset,
    serialize_dataset,
    train_bc,
)
from fscforge.pomdp.generators import gen_maze
from fscforge.synthesis.retraining import generate_initial_data


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def tiny_policy() -> RecurrentPolicy:
    """One memory neuron, readable by hand: the head turns h into logits (h, -h)."""
    net = RecurrentPolicy(n_observations=1, n_actions=2, hidden_size=1, seed=0)
    with torch.no_grad():
        for parameter in net.parameters():
            parameter.zero_()
        net.candidate_input.weight.copy_(torch.tensor([[0.3, 0.2, -0.4, 0.1]], dtype=DTYPE))
        net.candidate_hidden.weight.fill_(0.7)
        net.head.weight.copy_(torch.tensor([[1.0], [-1.0]], dtype=DTYPE))
        net.h0.fill_(0.5)
    return net


def lossless_qbn() -> Qbn:
    qbn = Qbn(hidden_size=3, width=3)
    with torch.no_grad():
        qbn.encoder.weight.copy_(3.0 * torch.eye(3, dtype=DTYPE))
        qbn.encoder.bias.zero_()
        qbn.decoder.weight.copy_(torch.eye(3, dtype=DTYPE))
        qbn.decoder.bias.zero_()
    return qbn


def test_zero_weights_give_uniform_distribution():
    net = RecurrentPolicy(n_observations=2, n_actions=4, hidden_size=5)
    with torch.no_grad():
        for parameter in net.parameters():
            parameter.zero_()
    distributions, _ = forward_sequence(net, [(0, None), (1, 2), (0, 3)])
    for distribution in distributions:
        np.testing.assert_allclose(distribution, np.full(4, 0.25), atol=1e-12)


def test_hand_set_neuron_matches_closed_form():
    net = tiny_policy()
    distributions, hidden = forward_sequence(net, [(0, None), (0, 1)])

    read0 = 0.5 * 0.5 + 0.5 * math.tanh(0.3 + 0.1 + 0.7 * 0.5)
    assert distributions[0][0] == pytest.approx(sigmoid(2 * read0), abs=1e-12)

    h1 = 0.5 * 0.5 + 0.5 * math.tanh(0.3 - 0.4 + 0.7 * 0.5)
    assert float(hidden[1]) == pytest.approx(h1, abs=1e-12)
    read1 = 0.5 * h1 + 0.5 * math.tanh(0.3 + 0.1 + 0.7 * h1)
    assert distributions[1][0] == pytest.approx(sigmoid(2 * read1), abs=1e-12)


def test_prefix_outputs_do_not_depend_on_the_future():
    net = RecurrentPolicy(n_observations=3, n_actions=3, hidden_size=6, seed=11)
    short, _ = forward_sequence(net, [(0, None), (1, 2)])
    long, _ = forward_sequence(net, [(0, None), (1, 2), (2, 0), (0, 1)])
    for a, b in zip(short, long):
        np.testing.assert_array_equal(a, b)


def test_forward_sequence_rejects_bad_steps():
    net = RecurrentPolicy(n_observations=2, n_actions=2, hidden_size=3)
    with pytest.raises(IndexError):
        forward_sequence(net, [(0, 1)])
    with pytest.raises(IndexError):
        forward_sequence(net, [(0, None), (5, 0)])


def test_masked_actions_get_no_probability(example_pomdp):
    net = RecurrentPolicy.for_pomdp(example_pomdp, hidden_size=4, seed=1)
    distributions, _ = forward_sequence(net, [(0, None)])
    assert distributions[0][example_pomdp.action_index["a"]] == 0.0
    assert distributions[0].sum() == pytest.approx(1.0, abs=1e-12)


def test_quantizer_rounds_to_ternary_and_passes_gradients():
    e = torch.tensor([0.9, -0.9, 0.1], dtype=DTYPE, requires_grad=True)
    q = Qbn.quantize(e)
    assert q.tolist() == [1.0, -1.0, 0.0]
    q.sum().backward()
    assert e.grad.tolist() == [1.0, 1.0, 1.0]


def test_hand_set_qbn_is_lossless_on_ternary_states():
    qbn = lossless_qbn()
    states = torch.tensor([[1.0, -1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, 1.0, 1.0]], dtype=DTYPE)
    assert F.mse_loss(qbn(states), states).item() == 0.0
    assert qbn.code(states[0]) == (1, -1, 0)


def test_decoder_gradient_matches_finite_differences():
    torch.manual_seed(5)
    qbn = Qbn(hidden_size=4, width=2)
    h = torch.randn(8, 4, dtype=DTYPE)

    def loss() -> torch.Tensor:
        return F.mse_loss(qbn(h), h)

    qbn.zero_grad()
    loss().backward()
    analytic = qbn.decoder.weight.grad.clone()
    eps = 1e-6
    with torch.no_grad():
        for i in range(4):
            for j in range(2):
                original = qbn.decoder.weight[i, j].item()
                qbn.decoder.weight[i, j] = original + eps
                up = loss().item()
                qbn.decoder.weight[i, j] = original - eps
                down = loss().item()
                qbn.decoder.weight[i, j] = original
                assert analytic[i, j].item() == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-8)


def test_encoder_gradient_passes_straight_through_the_quantizer():
    torch.manual_seed(6)
    qbn = Qbn(hidden_size=4, width=2)
    h = torch.randn(8, 4, dtype=DTYPE)
    F.mse_loss(qbn(h), h).backward()
    analytic = qbn.encoder.weight.grad.clone()
    assert analytic.abs().sum() > 0

    # Gradient reaching the codes; the quantizer hands it to the encoder output unchanged.
    with torch.no_grad():
        codes = Qbn.quantize(qbn.encode(h))
    codes.requires_grad_(True)
    F.mse_loss(qbn.decode(codes), h).backward()
    upstream = codes.grad.detach()

    def surrogate() -> float:
        return float((qbn.encode(h) * upstream).sum())

    eps = 1e-6
    with torch.no_grad():
        for i in range(2):
            for j in range(4):
                original = qbn.encoder.weight[i, j].item()
                qbn.encoder.weight[i, j] = original + eps
                up = surrogate()
                qbn.encoder.weight[i, j] = original - eps
                down = surrogate()
                qbn.encoder.weight[i, j] = original
                assert analytic[i, j].item() == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-8)


def test_behaviour_cloning_fits_a_tiny_dataset():
    net = RecurrentPolicy(n_observations=3, n_actions=3, hidden_size=8, seed=3)
    batch = TrainingBatch([[(0, 1), (1, 0), (2, 2)]] * 4)
    _, losses = train_bc(net, batch, Hyperparams(learning_rate=0.05, epochs=400, batch_size=4, seed=3))
    assert losses[-1] < 0.01
    assert losses[-1] < losses[0]
    distributions, _ = forward_sequence(net, [(0, None), (1, 1), (2, 0)])
    assert [int(np.argmax(d)) for d in distributions] == [1, 0, 2]


def test_training_is_deterministic_for_a_seed():
    batch = TrainingBatch([[(0, 1), (1, 0)], [(1, 1)], [(0, 0), (0, 1), (1, 1)]])
    hp = Hyperparams(epochs=5, batch_size=2, seed=9)
    first, _ = train_bc(RecurrentPolicy(2, 2, 4, seed=9), batch, hp)
    second, _ = train_bc(RecurrentPolicy(2, 2, 4, seed=9), batch, hp)
    for a, b in zip(first.state_dict().values(), second.state_dict().values()):
        assert torch.equal(a, b)


def test_training_rejects_bad_batches():
    net = RecurrentPolicy(2, 2, 3)
    with pytest.raises(TrainingError):
        train_bc(net, TrainingBatch([]), Hyperparams(epochs=1))
    with pytest.raises(TrainingError):
        train_bc(net, TrainingBatch([[(0, 7)]]), Hyperparams(epochs=1))
    with pytest.raises(TrainingError):
        TrainingBatch([[(0, 0)]], [0.0])


def test_batch_extension_scales_weights():
    batch = TrainingBatch([[(0, 0)]]).extend(TrainingBatch([[(1, 1)], [(0, 1)]]), 2.0)
    assert len(batch) == 3
    assert batch.weights == [1.0, 2.0, 2.0]


def test_dataset_text_round_trip(example_pomdp):
    text = "seq 1 blue:up blue:down s3:a\nseq 2.5 blue:up\n"
    batch = parse_dataset(text, example_pomdp)
    assert batch.sequences[0] == [(0, 0), (0, 1), (1, 2)]
    assert batch.weights == [1.0, 2.5]
    assert serialize_dataset(batch, example_pomdp) == text
    with pytest.raises(ModelFormatError):
        parse_dataset("seq 1 blue:left\n", example_pomdp)


def test_insert_qbn_attaches_bottleneck(example_pomdp):
    net = RecurrentPolicy.for_pomdp(example_pomdp, hidden_size=6, seed=2)
    hidden = collect_hidden_states(net, example_pomdp, n_rollouts=20, max_steps=6, seed=2)
    assert hidden.shape[1] == 6
    schedule = QbnSchedule(hidden_rollouts=20, autoencoder_epochs=30, finetune_epochs=0)
    _, report = insert_qbn(net, 2, hidden, Hyperparams(seed=2), schedule)
    assert net.qbn is not None and net.qbn.width == 2
    assert 1 <= report.distinct_codes <= 9
    assert report.finetune_loss is None


def test_qbn_training_improves_reconstruction(example_pomdp):
    net = RecurrentPolicy.for_pomdp(example_pomdp, hidden_size=6, seed=4)
    hidden = collect_hidden_states(net, example_pomdp, n_rollouts=30, max_steps=6, seed=4)
    short = QbnSchedule(hidden_rollouts=30, autoencoder_epochs=1, finetune_epochs=0, learning_rate=1e-6)
    long = QbnSchedule(hidden_rollouts=30, autoencoder_epochs=300, finetune_epochs=0, learning_rate=0.01)
    _, untrained = insert_qbn(net, 3, hidden, Hyperparams(seed=4), short)
    _, trained = insert_qbn(net, 3, hidden, Hyperparams(seed=4), long)
    assert trained.reconstruction_mse < untrained.reconstruction_mse


def test_insert_qbn_rejects_bad_input():
    net = RecurrentPolicy(2, 2, 3)
    with pytest.raises(TrainingError):
        insert_qbn(net, 0, torch.zeros(4, 3, dtype=DTYPE), Hyperparams())
    with pytest.raises(TrainingError):
        insert_qbn(net, 1, torch.zeros(0, 3, dtype=DTYPE), Hyperparams())


def test_code_distributions_are_normalised():
    net = RecurrentPolicy(n_observations=2, n_actions=3, hidden_size=4, seed=8)
    torch.manual_seed(8)
    net.attach_qbn(Qbn(4, 2))
    for code in [(-1, -1), (0, 1), (1, 0), (1, 1)]:
        for z in range(2):
            assert action_distribution_for_code(net, code, z).sum() == pytest.approx(1.0, abs=1e-12)


def test_code_arity_is_checked():
    net = RecurrentPolicy(2, 2, 4)
    net.attach_qbn(Qbn(4, 2))
    with pytest.raises(ExtractionError):
        action_distribution_for_code(net, (1, 0, 1), 0)
    with pytest.raises(ExtractionError):
        action_distribution_for_code(net, (2, 0), 0)


def test_quantized_policy_matches_network_rollout():
    net = RecurrentPolicy(n_observations=2, n_actions=2, hidden_size=4, seed=6)
    torch.manual_seed(6)
    net.attach_qbn(Qbn(4, 2))
    qpolicy = QuantizedPolicy(net)
    distributions, hidden = forward_sequence(net, [(0, None), (1, 1), (0, 0)])
    code = qpolicy.initial_code
    for t, (z, following) in enumerate([(0, 1), (1, 0), (0, None)]):
        np.testing.assert_allclose(qpolicy.distribution(code, z), distributions[t], atol=1e-12)
        if following is not None:
            code = qpolicy.successor(code, z, following)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = RecurrentPolicy(n_observations=3, n_actions=2, hidden_size=5, seed=12)
    torch.manual_seed(12)
    net.attach_qbn(Qbn(5, 2))
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    again = load_checkpoint(path)
    assert again.qbn is not None and again.qbn.width == 2
    for (name, a), (other, b) in zip(net.state_dict().items(), again.state_dict().items()):
        assert name == other
        assert torch.equal(a, b)


def test_tampered_checkpoint_is_rejected():
    text = dumps_checkpoint(RecurrentPolicy(2, 2, 3))
    lines = text.splitlines()
    lines[4] = lines[4].replace("0x", "-0x", 1) if not lines[4].startswith("-") else lines[4][1:]
    with pytest.raises(ModelFormatError, match="digest"):
        loads_checkpoint("\n".join(lines) + "\n")


@pytest.mark.slow
def test_trained_example_policy_goes_down_after_blue_and_up(example_pomdp, reach_s3):
    net = RecurrentPolicy.for_pomdp(example_pomdp, hidden_size=16, seed=7)
    train_bc(net, generate_initial_data(example_pomdp, reach_s3, LoopConfig(seed=7)), Hyperparams(seed=7))
    blue = example_pomdp.observation_index["blue"]
    distributions, _ = forward_sequence(net, [(blue, None), (blue, example_pomdp.action_index["up"])])
    assert int(np.argmax(distributions[1])) == example_pomdp.action_index["down"]


@pytest.mark.slow
def test_maze_bottleneck_reconstructs_hidden_states():
    maze = gen_maze(1)
    hp = Hyperparams(hidden_size=8, seed=7)
    net = RecurrentPolicy.for_pomdp(maze, hp.hidden_size, hp.seed)
    train_bc(net, generate_initial_data(maze, parse_spec('R<=6.0 [ F "goal" ]'), LoopConfig(seed=7)), hp)
    hidden = collect_hidden_states(net, maze, n_rollouts=200, max_steps=40, seed=7)
    _, report = insert_qbn(net, 8, hidden, hp, QbnSchedule(autoencoder_epochs=400))
    assert report.distinct_codes <= 3 ** 8
    assert report.reconstruction_mse <= 0.05
