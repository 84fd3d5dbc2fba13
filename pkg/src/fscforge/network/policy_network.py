from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from fscforge.exceptions.extraction_error import ExtractionError
from fscforge.pomdp.pomdp import Pomdp

DTYPE = torch.float64
QUANTIZE_THRESHOLD = 0.5

Code = Tuple[int, ...]


class TernaryQuantize(torch.autograd.Function):
    """Rounds to {-1, 0, 1} at +-QUANTIZE_THRESHOLD; the backward pass is the identity."""

    @staticmethod
    def forward(ctx, e: torch.Tensor) -> torch.Tensor:
        return (e > QUANTIZE_THRESHOLD).to(e.dtype) - (e < -QUANTIZE_THRESHOLD).to(e.dtype)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor) -> torch.Tensor:
        return grad_output


class Qbn(nn.Module):
    """
    Quantized bottleneck: h -> tanh(W_e h + b_e) -> {-1, 0, 1}^B_h -> W_d q + b_d.

    The quantizer passes gradients through unchanged (straight-through estimator).
    """

    def __init__(self, hidden_size: int, width: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.width = width
        self.encoder = nn.Linear(hidden_size, width, dtype=DTYPE)
        self.decoder = nn.Linear(width, hidden_size, dtype=DTYPE)

    def encode(self, h: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.encoder(h))

    @staticmethod
    def quantize(e: torch.Tensor) -> torch.Tensor:
        return TernaryQuantize.apply(e)

    def decode(self, q: torch.Tensor) -> torch.Tensor:
        return self.decoder(q)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.decode(self.quantize(self.encode(h)))

    def code(self, h: torch.Tensor) -> Code:
        with torch.no_grad():
            q = self.quantize(self.encode(h))
        return tuple(int(v) for v in q.round().tolist())


class RecurrentPolicy(nn.Module):
    """
    Gated recurrent policy over one-hot (observation, action) inputs.

    The memory is written with the observation an action was chosen on together with
    that action; the action distribution is read from a one-step update of the current
    memory with the reserved "none" action slot.

    Example:
        net = RecurrentPolicy.for_pomdp(pomdp, hidden_size=16, seed=7)
        distributions, hidden = forward_sequence(net, [(0, None), (1, 2)])
    """

    def __init__(self, n_observations: int, n_actions: int, hidden_size: int = 16, seed: int = 7):
        super().__init__()
        self.n_observations = n_observations
        self.n_actions = n_actions
        self.hidden_size = hidden_size
        self.seed = seed
        input_size = n_observations + n_actions + 1
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.gate_input = nn.Linear(input_size, hidden_size, dtype=DTYPE)
            self.gate_hidden = nn.Linear(hidden_size, hidden_size, bias=False, dtype=DTYPE)
            self.candidate_input = nn.Linear(input_size, hidden_size, dtype=DTYPE)
            self.candidate_hidden = nn.Linear(hidden_size, hidden_size, bias=False, dtype=DTYPE)
            self.head = nn.Linear(hidden_size, n_actions, dtype=DTYPE)
            self.h0 = nn.Parameter(torch.zeros(hidden_size, dtype=DTYPE))
        self.register_buffer("action_mask", torch.ones(n_observations, n_actions, dtype=torch.bool))
        self.qbn: Optional[Qbn] = None

    @classmethod
    def for_pomdp(cls, pomdp: Pomdp, hidden_size: int = 16, seed: int = 7) -> "RecurrentPolicy":
        net = cls(pomdp.n_observations, pomdp.n_actions, hidden_size, seed)
        net.action_mask.copy_(torch.as_tensor(pomdp.observation_actions()))
        return net

    @property
    def none_action(self) -> int:
        return self.n_actions

    def attach_qbn(self, qbn: Optional[Qbn]) -> None:
        if qbn is not None and qbn.hidden_size != self.hidden_size:
            raise ValueError(f"QBN expects width {qbn.hidden_size}, network has {self.hidden_size}.")
        self.qbn = qbn

    def _inputs(self, observations: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        z = F.one_hot(observations, self.n_observations)
        a = F.one_hot(actions, self.n_actions + 1)
        return torch.cat([z, a], dim=-1).to(DTYPE)

    def cell(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        update = torch.sigmoid(self.gate_input(x) + self.gate_hidden(h))
        candidate = torch.tanh(self.candidate_input(x) + self.candidate_hidden(h))
        return (1.0 - update) * h + update * candidate

    def project(self, h: torch.Tensor) -> torch.Tensor:
        return h if self.qbn is None else self.qbn(h)

    def initial_hidden(self, batch_size: Optional[int] = None) -> torch.Tensor:
        h = self.project(self.h0)
        return h if batch_size is None else h.expand(batch_size, self.hidden_size)

    def read(self, h: torch.Tensor, observations: torch.Tensor) -> torch.Tensor:
        """Action logits for memory `h` on `observations`; masked actions get -inf."""
        none = torch.full_like(observations, self.none_action)
        logits = self.head(self.cell(h, self._inputs(observations, none)))
        return logits.masked_fill(~self.action_mask[observations], float("-inf"))

    def write(self, h: torch.Tensor, observations: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        return self.project(self.cell(h, self._inputs(observations, actions)))

    def forward(self, observations: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        """Logits [B, T, |Act|] for recorded observation/action sequences of shape [B, T]."""
        batch, steps = observations.shape
        h = self.initial_hidden(batch)
        logits = []
        for t in range(steps):
            logits.append(self.read(h, observations[:, t]))
            if t + 1 < steps:
                h = self.write(h, observations[:, t], actions[:, t])
        return torch.stack(logits, dim=1)


def _check_step(net: RecurrentPolicy, t: int, z: int, previous: Optional[int]) -> None:
    if not 0 <= z < net.n_observations:
        raise IndexError(f"Step {t}: observation index {z} out of range.")
    if t == 0 and previous is not None:
        raise IndexError("Step 0 takes no previous action.")
    if t > 0 and (previous is None or not 0 <= previous < net.n_actions):
        raise IndexError(f"Step {t}: previous action {previous} out of range.")


def forward_sequence(net: RecurrentPolicy, obs_seq: Sequence[Tuple[int, Optional[int]]]
                     ) -> Tuple[List[np.ndarray], List[torch.Tensor]]:
    """
    Runs (z_t, a_{t-1}) pairs through the network and returns, per step, the action
    distribution and the memory it was read from.
    """
    distributions, hidden = [], []
    with torch.no_grad():
        h = net.initial_hidden()
        for t, (z, previous) in enumerate(obs_seq):
            _check_step(net, t, z, previous)
            if t > 0:
                last_z = torch.tensor(obs_seq[t - 1][0])
                h = net.write(h, last_z, torch.tensor(previous))
            logits = net.read(h, torch.tensor(z))
            distributions.append(torch.softmax(logits, dim=-1).numpy())
            hidden.append(h.clone())
    return distributions, hidden


def quantize_hidden(net: RecurrentPolicy, h: torch.Tensor) -> Code:
    if net.qbn is None:
        raise ExtractionError("Network has no quantized bottleneck.")
    return net.qbn.code(h)


def _code_tensor(net: RecurrentPolicy, code: Sequence[int]) -> torch.Tensor:
    if net.qbn is None:
        raise ExtractionError("Network has no quantized bottleneck.")
    if len(code) != net.qbn.width:
        raise ExtractionError(f"Code {tuple(code)} has arity {len(code)}, expected {net.qbn.width}.")
    if any(v not in (-1, 0, 1) for v in code):
        raise ExtractionError(f"Code {tuple(code)} is not ternary.")
    return torch.tensor(code, dtype=DTYPE)


def action_distribution_for_code(net: RecurrentPolicy, code: Sequence[int], z: int) -> np.ndarray:
    q = _code_tensor(net, code)
    with torch.no_grad():
        logits = net.read(net.qbn.decode(q), torch.tensor(z))
        return torch.softmax(logits, dim=-1).numpy()


class QuantizedPolicy:
    """
    Read-only view of a network with a QBN as a machine over ternary codes.

    Distributions and successors are memoised per key; concurrent readers only ever
    store identical values.
    """

    def __init__(self, net: RecurrentPolicy):
        if net.qbn is None:
            raise ExtractionError("Network has no quantized bottleneck.")
        self.net = net
        self._distributions: Dict[Tuple[Code, int], np.ndarray] = {}
        self._successors: Dict[Tuple[Code, int, int], Code] = {}
        with torch.no_grad():
            self.initial_code = net.qbn.code(net.h0)

    @property
    def width(self) -> int:
        return self.net.qbn.width

    def distribution(self, code: Code, z: int) -> np.ndarray:
        key = (code, z)
        if key not in self._distributions:
            self._distributions[key] = action_distribution_for_code(self.net, code, z)
        return self._distributions[key]

    def successor(self, code: Code, z: int, a: int) -> Code:
        key = (code, z, a)
        if key not in self._successors:
            q = _code_tensor(self.net, code)
            with torch.no_grad():
                h = self.net.cell(self.net.qbn.decode(q), self.net._inputs(torch.tensor(z), torch.tensor(a)))
            self._successors[key] = self.net.qbn.code(h)
        return self._successors[key]
