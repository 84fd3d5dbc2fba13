from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

from fscforge.exceptions.model_format_error import ModelFormatError
from fscforge.exceptions.model_validation_error import ModelValidationError
from fscforge.network.policy_network import Code
from fscforge.pomdp.model_format import format_real, parse_probability, tokenize
from fscforge.pomdp.pomdp import PROB_TOLERANCE

AlphaKey = Tuple[int, str]
DeltaKey = Tuple[int, str, str]


@dataclass(frozen=True)
class Fsc:
    """
    Finite-state controller over named observations and actions.

    alpha maps (node, observation) to an action distribution; delta maps
    (node, observation, action) to the next node and is partial: a missing key keeps
    the controller in its current node.
    """

    n_nodes: int
    initial: int
    alpha: Mapping[AlphaKey, Mapping[str, float]]
    delta: Mapping[DeltaKey, int]
    codes: Tuple[Code, ...] = field(default=(), compare=False)

    def __post_init__(self):
        self.validate()

    def action_distribution(self, node: int, observation: str) -> Optional[Mapping[str, float]]:
        return self.alpha.get((node, observation))

    def next_node(self, node: int, observation: str, action: str) -> int:
        return self.delta.get((node, observation, action), node)

    def validate(self) -> None:
        if self.n_nodes < 1:
            raise ModelValidationError("Controller needs at least one node.")
        if not 0 <= self.initial < self.n_nodes:
            raise ModelValidationError(f"Initial node {self.initial} out of range.")
        for (node, observation), row in self.alpha.items():
            entity = f"alpha({node}, {observation})"
            if not 0 <= node < self.n_nodes:
                raise ModelValidationError(f"{entity} references an unknown node.", entity=entity)
            if any(not 0.0 <= p <= 1.0 for p in row.values()):
                raise ModelValidationError(f"{entity} has a probability outside [0, 1].", entity=entity)
            total = sum(row.values())
            if abs(total - 1.0) > PROB_TOLERANCE:
                raise ModelValidationError(f"{entity} sums to {total!r}, expected 1.", entity=entity)
        for (node, observation, action), target in self.delta.items():
            if not 0 <= node < self.n_nodes or not 0 <= target < self.n_nodes:
                raise ModelValidationError(
                    f"delta({node}, {observation}, {action}) = {target} references an unknown node.",
                    entity=f"delta({node}, {observation}, {action})",
                )


class TransactionTable:
    """
    Visit counts of code transitions keyed by (code, observation, action).

    Codes become node indices in order of first appearance, with the initial code as
    node 0.
    """

    def __init__(self, initial_code: Code):
        self.code_index: Dict[Code, int] = {initial_code: 0}
        self.counts: Dict[Tuple[int, int, int], Counter] = defaultdict(Counter)

    def node_of(self, code: Code) -> int:
        if code not in self.code_index:
            self.code_index[code] = len(self.code_index)
        return self.code_index[code]

    def record(self, code: Code, z: int, a: int, next_code: Code) -> None:
        key = (self.node_of(code), z, a)
        self.counts[key][self.node_of(next_code)] += 1

    @property
    def codes(self) -> Tuple[Code, ...]:
        return tuple(sorted(self.code_index, key=self.code_index.get))

    def successor(self, key: Tuple[int, int, int]) -> int:
        """Most frequent successor node for `key`; ties go to the lowest node index."""
        counts = self.counts[key]
        return min(counts, key=lambda node: (-counts[node], node))

    def conflicts(self) -> int:
        return sum(1 for counts in self.counts.values() if len(counts) > 1)


def parse_fsc(text: str) -> Fsc:
    lines = tokenize(text)
    if not lines or lines[0][1] != ["fsc"]:
        raise ModelFormatError("Document must start with 'fsc'.", line=lines[0][0] if lines else 1)

    n_nodes: Optional[int] = None
    initial: Optional[int] = None
    alpha: Dict[AlphaKey, Dict[str, float]] = {}
    delta: Dict[DeltaKey, int] = {}

    def node(token: str, line: int) -> int:
        try:
            value = int(token)
        except ValueError as e:
            raise ModelFormatError(f"Invalid node '{token}'.", line=line) from e
        if n_nodes is None or not 0 <= value < n_nodes:
            raise ModelFormatError(f"Node {token} out of range.", line=line, entity=token)
        return value

    for line, tokens in lines[1:]:
        keyword = tokens[0]
        if keyword == "nodes":
            if len(tokens) != 2:
                raise ModelFormatError("Expected 'nodes <k>'.", line=line)
            try:
                n_nodes = int(tokens[1])
            except ValueError as e:
                raise ModelFormatError(f"Invalid node count '{tokens[1]}'.", line=line) from e
            if n_nodes < 1:
                raise ModelFormatError("Node count must be positive.", line=line)
        elif keyword == "init":
            if len(tokens) != 2:
                raise ModelFormatError("Expected 'init <node>'.", line=line)
            initial = node(tokens[1], line)
        elif keyword == "A":
            if len(tokens) < 4:
                raise ModelFormatError("Expected 'A <node> <observation> <action>:<prob>+'.", line=line)
            key = (node(tokens[1], line), tokens[2])
            if key in alpha:
                raise ModelFormatError(f"Duplicate action row for {key}.", line=line)
            row: Dict[str, float] = {}
            for entry in tokens[3:]:
                action, sep, prob = entry.partition(":")
                if not sep or action in row:
                    raise ModelFormatError(f"Invalid or repeated entry '{entry}'.", line=line, entity=entry)
                row[action] = parse_probability(prob, line)
            total = sum(row.values())
            if abs(total - 1.0) > PROB_TOLERANCE:
                raise ModelFormatError(f"Action row sums to {total!r}, expected 1.", line=line)
            alpha[key] = row
        elif keyword == "D":
            if len(tokens) != 5:
                raise ModelFormatError("Expected 'D <node> <observation> <action> <node'>'.", line=line)
            key = (node(tokens[1], line), tokens[2], tokens[3])
            if key in delta:
                raise ModelFormatError(f"Duplicate memory update for {key}.", line=line)
            delta[key] = node(tokens[4], line)
        else:
            raise ModelFormatError(f"Unknown keyword '{keyword}'.", line=line)

    if n_nodes is None:
        raise ModelFormatError("Missing 'nodes <k>' line.")
    if initial is None:
        raise ModelFormatError("Missing 'init <node>' line.")
    try:
        return Fsc(n_nodes, initial, alpha, delta)
    except ModelValidationError as e:
        raise ModelFormatError(e.message, entity=e.entity) from e


def serialize_fsc(fsc: Fsc) -> str:
    out: List[str] = ["fsc", f"nodes {fsc.n_nodes}", f"init {fsc.initial}"]
    for (node, observation) in sorted(fsc.alpha):
        row = fsc.alpha[(node, observation)]
        out.append(f"A {node} {observation} " + " ".join(f"{a}:{format_real(p)}" for a, p in row.items()))
    for (node, observation, action) in sorted(fsc.delta):
        out.append(f"D {node} {observation} {action} {fsc.delta[(node, observation, action)]}")
    return "\n".join(out) + "\n"
