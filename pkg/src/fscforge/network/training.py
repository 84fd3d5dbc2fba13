import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from fscforge.environment.seeding import derive_seed
from fscforge.environment.settings import Hyperparams, QbnSchedule
from fscforge.exceptions.model_format_error import ModelFormatError
from fscforge.exceptions.training_error import TrainingError
from fscforge.network.policy_network import DTYPE, Qbn, RecurrentPolicy
from fscforge.pomdp.model_format import format_real, parse_real, tokenize
from fscforge.pomdp.pomdp import Pomdp, sample_index

logger = logging.getLogger(__name__)

LabelledSequence = List[Tuple[int, int]]


@dataclass
class TrainingBatch:
    """Labelled (observation, action) sequences with one weight per sequence."""

    sequences: List[LabelledSequence]
    weights: List[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.weights:
            self.weights = [1.0] * len(self.sequences)
        if len(self.weights) != len(self.sequences):
            raise TrainingError("Every sequence needs exactly one weight.")
        if any(not w > 0 for w in self.weights):
            raise TrainingError("Sequence weights must be positive.")

    def __len__(self) -> int:
        return len(self.sequences)

    def extend(self, other: "TrainingBatch", weight: float = 1.0) -> "TrainingBatch":
        """Returns a new batch with `other` appended, its weights scaled by `weight`."""
        return TrainingBatch(
            self.sequences + other.sequences,
            self.weights + [w * weight for w in other.weights],
        )

    def validate(self, n_observations: int, n_actions: int) -> None:
        if not self.sequences:
            raise TrainingError("Training batch is empty.")
        for i, sequence in enumerate(self.sequences):
            if not sequence:
                raise TrainingError(f"Sequence {i} is empty.")
            for z, a in sequence:
                if not 0 <= z < n_observations or not 0 <= a < n_actions:
                    raise TrainingError(f"Sequence {i} holds out-of-range pair ({z}, {a}).")


@dataclass(frozen=True)
class QbnReport:
    width: int
    reconstruction_mse: float
    distinct_codes: int
    finetune_loss: Optional[float] = None


def _pad(net: RecurrentPolicy, batch: TrainingBatch, rows: Sequence[int]):
    steps = max(len(batch.sequences[i]) for i in rows)
    observations = torch.zeros(len(rows), steps, dtype=torch.long)
    actions = torch.zeros(len(rows), steps, dtype=torch.long)
    mask = torch.zeros(len(rows), steps, dtype=torch.bool)
    for r, i in enumerate(rows):
        sequence = batch.sequences[i]
        observations[r, :len(sequence)] = torch.tensor([z for z, _ in sequence])
        actions[r, :len(sequence)] = torch.tensor([a for _, a in sequence])
        mask[r, :len(sequence)] = True
    # Padded labels point at an allowed action so the masked logits stay finite.
    fallback = net.action_mask.to(torch.long).argmax(dim=1)[observations]
    actions = torch.where(mask, actions, fallback)
    weights = torch.tensor([batch.weights[i] for i in rows], dtype=DTYPE)
    return observations, actions, mask, weights


def sequence_loss(net: RecurrentPolicy, observations, actions, mask, weights) -> Tuple[torch.Tensor, torch.Tensor]:
    """Weighted sum of per-step cross-entropies and the weighted step count."""
    log_probs = F.log_softmax(net(observations, actions), dim=-1)
    nll = -log_probs.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    nll = torch.where(mask, nll, torch.zeros_like(nll))
    step_weights = weights.unsqueeze(1) * mask.to(DTYPE)
    return (nll * weights.unsqueeze(1)).sum(), step_weights.sum()


def train_bc(net: RecurrentPolicy, batch: TrainingBatch, hp: Hyperparams,
             logger: Optional[logging.Logger] = None) -> Tuple[RecurrentPolicy, List[float]]:
    """
    Behaviour cloning: minimises the weighted mean per-step cross-entropy of the labels.

    Training continues from the network's current parameters and is deterministic given
    hp.seed and the data.
    """
    logger = logger or logging.getLogger(__name__)
    batch.validate(net.n_observations, net.n_actions)
    optimizer = torch.optim.Adam(net.parameters(), lr=hp.learning_rate)
    generator = torch.Generator().manual_seed(hp.seed)
    losses: List[float] = []

    net.train()
    for epoch in range(1, hp.epochs + 1):
        order = torch.randperm(len(batch), generator=generator).tolist()
        total, count = 0.0, 0.0
        for start in range(0, len(order), hp.batch_size):
            rows = order[start:start + hp.batch_size]
            loss_sum, weight_sum = sequence_loss(net, *_pad(net, batch, rows))
            loss = loss_sum / weight_sum
            if not torch.isfinite(loss):
                logger.error(f"❌ Non-finite loss at epoch {epoch}")
                raise TrainingError("Loss is not finite.", epoch=epoch)
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), hp.clip_norm)
            optimizer.step()
            total += float(loss_sum.detach())
            count += float(weight_sum)
        losses.append(total / count)
        if epoch == 1 or epoch % 50 == 0:
            logger.debug(f"📝 Epoch {epoch}: loss {losses[-1]:.6f}")
    net.eval()
    logger.info(f"✅ Behaviour cloning finished: {hp.epochs} epochs, final loss {losses[-1]:.6f}")
    return net, losses


def _hidden_rollout(net: RecurrentPolicy, p: Pomdp, max_steps: int, seed: int) -> List[torch.Tensor]:
    rng = np.random.default_rng(seed)
    state = p.sample_initial(rng)
    with torch.no_grad():
        h = net.initial_hidden()
        hidden = [h]
        for _ in range(max_steps):
            if state in p.terminal_states():
                break
            z = p.obs_map[state]
            probs = torch.softmax(net.read(h, torch.tensor(z)), dim=-1).numpy()
            a = sample_index(probs, rng)
            h = net.write(h, torch.tensor(z), torch.tensor(a))
            hidden.append(h)
            state = p.sample_successor(state, a, rng)
    return hidden


def collect_hidden_states(net: RecurrentPolicy, p: Pomdp, n_rollouts: int, max_steps: int, seed: int,
                          threads: int = 1) -> torch.Tensor:
    """Memory vectors written while rolling out the network on `p`, one tensor row per write."""
    def rollout(i: int) -> List[torch.Tensor]:
        return _hidden_rollout(net, p, max_steps, derive_seed(seed, "hidden", i))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(rollout, range(n_rollouts)))
    else:
        runs = [rollout(i) for i in range(n_rollouts)]
    rows = [h for run in runs for h in run]
    if not rows:
        return torch.zeros(0, net.hidden_size, dtype=DTYPE)
    logger.info(f"📊 Collected {len(rows)} hidden states from {n_rollouts} rollouts")
    return torch.stack(rows)


def insert_qbn(net: RecurrentPolicy, b_h: int, hidden: torch.Tensor, hp: Hyperparams,
               schedule: Optional[QbnSchedule] = None, batch: Optional[TrainingBatch] = None,
               logger: Optional[logging.Logger] = None) -> Tuple[RecurrentPolicy, QbnReport]:
    """
    Trains a QBN of width `b_h` to reconstruct `hidden`, routes the network's memory
    through it and, when `batch` is given, fine-tunes the whole network with it active.
    """
    logger = logger or logging.getLogger(__name__)
    schedule = schedule or QbnSchedule()
    if b_h < 1:
        raise TrainingError(f"Bottleneck width must be at least 1, got {b_h}.")
    if hidden.shape[0] == 0:
        raise TrainingError("No hidden states to train the bottleneck on.")

    net.attach_qbn(None)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(hp.seed, "qbn", b_h))
        qbn = Qbn(net.hidden_size, b_h)
    hidden = hidden.detach()
    optimizer = torch.optim.Adam(qbn.parameters(), lr=schedule.learning_rate)
    generator = torch.Generator().manual_seed(derive_seed(hp.seed, "qbn-shuffle", b_h))
    for _ in range(schedule.autoencoder_epochs):
        order = torch.randperm(hidden.shape[0], generator=generator)
        for start in range(0, len(order), schedule.batch_size):
            rows = hidden[order[start:start + schedule.batch_size]]
            loss = F.mse_loss(qbn(rows), rows)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    with torch.no_grad():
        mse = float(F.mse_loss(qbn(hidden), hidden))
        codes = Qbn.quantize(qbn.encode(hidden)).round().to(torch.long)
        distinct = len({tuple(row) for row in codes.tolist()})
    net.attach_qbn(qbn)
    logger.info(f"✅ QBN with B_h={b_h} trained: reconstruction MSE {mse:.6f}, {distinct} distinct codes")

    finetune_loss = None
    if batch is not None and schedule.finetune_epochs > 0:
        _, losses = train_bc(net, batch, hp.with_overrides(epochs=schedule.finetune_epochs), logger=logger)
        finetune_loss = losses[-1]
    return net, QbnReport(b_h, mse, distinct, finetune_loss)


def parse_dataset(text: str, p: Pomdp) -> TrainingBatch:
    """
    Reads `seq <weight> <obs>:<action> ...` lines, one labelled sequence per line.
    """
    sequences, weights = [], []
    for line, tokens in tokenize(text):
        if tokens[0] != "seq" or len(tokens) < 3:
            raise ModelFormatError("Expected 'seq <weight> <obs>:<action>+'.", line=line)
        weights.append(parse_real(tokens[1], line))
        sequence = []
        for entry in tokens[2:]:
            observation, sep, action = entry.partition(":")
            if not sep or observation not in p.observation_index or action not in p.action_index:
                raise ModelFormatError(f"Unknown pair '{entry}'.", line=line, entity=entry)
            sequence.append((p.observation_index[observation], p.action_index[action]))
        sequences.append(sequence)
    return TrainingBatch(sequences, weights)


def serialize_dataset(batch: TrainingBatch, p: Pomdp) -> str:
    return "".join(
        f"seq {format_real(w)} " + " ".join(f"{p.observations[z]}:{p.actions[a]}" for z, a in sequence) + "\n"
        for sequence, w in zip(batch.sequences, batch.weights)
    )
