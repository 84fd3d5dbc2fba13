import logging
import re
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from fscforge.exceptions.model_format_error import ModelFormatError
from fscforge.exceptions.model_validation_error import ModelValidationError
from fscforge.pomdp.pomdp import PROB_TOLERANCE, Dtmc, Pomdp

logger = logging.getLogger(__name__)

_DEFAULT_STATE = re.compile(r"s(\d+)$")

Line = Tuple[int, List[str]]


def format_real(value: float) -> str:
    """17 significant digits: the rendering re-parses to the identical binary64 value."""
    return format(value, ".17g")


def parse_probability(token: str, line: int) -> float:
    try:
        value = Fraction(token)
    except (ValueError, ZeroDivisionError) as e:
        raise ModelFormatError(f"Invalid probability '{token}'.", line=line) from e
    if not 0 <= value <= 1:
        raise ModelFormatError(f"Probability {token} outside [0, 1].", line=line)
    return float(value)


def parse_real(token: str, line: int) -> float:
    try:
        return float(Fraction(token))
    except (ValueError, ZeroDivisionError) as e:
        raise ModelFormatError(f"Invalid number '{token}'.", line=line) from e


def tokenize(text: str) -> List[Line]:
    lines = []
    for number, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if content:
            lines.append((number, content.split()))
    return lines


def _expect_header(lines: List[Line], keyword: str) -> None:
    if not lines or lines[0][1] != [keyword]:
        line = lines[0][0] if lines else 1
        raise ModelFormatError(f"Document must start with '{keyword}'.", line=line)


def _parse_init(tokens: List[str], line: int, resolve) -> Dict[int, float]:
    init: Dict[int, float] = {}
    for entry in tokens:
        name, sep, prob = entry.partition(":")
        if not sep:
            raise ModelFormatError(f"Expected <state>:<prob>, got '{entry}'.", line=line)
        state = resolve(name, line)
        if state in init:
            raise ModelFormatError(f"State '{name}' repeated in init.", line=line, entity=name)
        init[state] = parse_probability(prob, line)
    return init


def _check_sum(dist: Dict[int, float], line: int, entity: str) -> None:
    total = sum(dist.values())
    if abs(total - 1.0) > PROB_TOLERANCE:
        raise ModelFormatError(f"Probabilities of {entity} sum to {total!r}, expected 1.", line=line, entity=entity)


class _StateTable:
    """Resolves state names declared through the per-state lines of a document."""

    def __init__(self, count: int, declared: List[Tuple[str, int]]):
        names = [name for name, _ in declared]
        if len(set(names)) != len(names):
            for name, line in declared:
                if names.count(name) > 1:
                    raise ModelFormatError(f"State '{name}' declared twice.", line=line, entity=name)
        if len(names) != count:
            raise ModelFormatError(f"Expected {count} states, found {len(names)} declarations.")
        defaults = [_DEFAULT_STATE.match(name) for name in names]
        if all(defaults) and sorted(int(m.group(1)) for m in defaults) == list(range(count)):
            self.names = tuple(f"s{i}" for i in range(count))
        else:
            self.names = tuple(names)
        self.index = {name: i for i, name in enumerate(self.names)}

    def resolve(self, name: str, line: int) -> int:
        if name not in self.index:
            raise ModelFormatError(f"Unknown state '{name}'.", line=line, entity=name)
        return self.index[name]


def _parse_count(tokens: List[str], line: int) -> int:
    if len(tokens) != 2:
        raise ModelFormatError("Expected 'states <n>'.", line=line)
    try:
        count = int(tokens[1])
    except ValueError as e:
        raise ModelFormatError(f"Invalid state count '{tokens[1]}'.", line=line) from e
    if count < 1:
        raise ModelFormatError("State count must be positive.", line=line)
    return count


def parse_pomdp(text: str) -> Pomdp:
    """Parses the line-oriented POMDP format into a validated Pomdp."""
    lines = tokenize(text)
    _expect_header(lines, "pomdp")

    count: Optional[int] = None
    actions: Tuple[str, ...] = ()
    observations: Tuple[str, ...] = ()
    obs_lines: List[Tuple[int, str, str]] = []
    rest: List[Line] = []
    for line, tokens in lines[1:]:
        keyword = tokens[0]
        if keyword == "states":
            count = _parse_count(tokens, line)
        elif keyword == "actions":
            actions = tuple(tokens[1:])
        elif keyword == "observations":
            observations = tuple(tokens[1:])
        elif keyword == "obs":
            if len(tokens) != 3:
                raise ModelFormatError("Expected 'obs <state> <observation>'.", line=line)
            obs_lines.append((line, tokens[1], tokens[2]))
        elif keyword in ("init", "T", "R", "label"):
            rest.append((line, tokens))
        else:
            raise ModelFormatError(f"Unknown keyword '{keyword}'.", line=line)

    if count is None:
        raise ModelFormatError("Missing 'states <n>' line.")
    if not actions:
        raise ModelFormatError("Missing 'actions' line.")
    if not observations:
        raise ModelFormatError("Missing 'observations' line.")
    if len(obs_lines) < count:
        raise ModelFormatError(f"Missing obs entries: {count - len(obs_lines)} state(s) have no observation.")

    table = _StateTable(count, [(name, line) for line, name, _ in obs_lines])
    action_index = {name: i for i, name in enumerate(actions)}
    observation_index = {name: i for i, name in enumerate(observations)}

    obs_map = [0] * count
    for line, state, observation in obs_lines:
        if observation not in observation_index:
            raise ModelFormatError(f"Unknown observation '{observation}'.", line=line, entity=observation)
        obs_map[table.resolve(state, line)] = observation_index[observation]

    def resolve_action(name: str, line: int) -> int:
        if name not in action_index:
            raise ModelFormatError(f"Unknown action '{name}'.", line=line, entity=name)
        return action_index[name]

    init: Optional[Dict[int, float]] = None
    init_line = 1
    transitions: Dict[Tuple[int, int], Dict[int, float]] = {}
    first_line: Dict[Tuple[int, int], int] = {}
    rewards: Dict[Tuple[int, int], float] = {}
    labels: Dict[str, set] = {}
    for line, tokens in rest:
        keyword = tokens[0]
        if keyword == "init":
            if init is not None:
                raise ModelFormatError("Duplicate 'init' line.", line=line)
            init = _parse_init(tokens[1:], line, table.resolve)
            init_line = line
        elif keyword == "T":
            if len(tokens) != 5:
                raise ModelFormatError("Expected 'T <state> <action> <state'> <prob>'.", line=line)
            key = (table.resolve(tokens[1], line), resolve_action(tokens[2], line))
            target = table.resolve(tokens[3], line)
            dist = transitions.setdefault(key, {})
            first_line.setdefault(key, line)
            if target in dist:
                raise ModelFormatError(f"Duplicate transition to '{tokens[3]}'.", line=line, entity=tokens[3])
            dist[target] = parse_probability(tokens[4], line)
        elif keyword == "R":
            if len(tokens) != 4:
                raise ModelFormatError("Expected 'R <state> <action> <real>'.", line=line)
            key = (table.resolve(tokens[1], line), resolve_action(tokens[2], line))
            rewards[key] = parse_real(tokens[3], line)
        else:
            if len(tokens) < 2:
                raise ModelFormatError("Expected 'label <name> <state>*'.", line=line)
            labels.setdefault(tokens[1], set()).update(table.resolve(name, line) for name in tokens[2:])

    if init is None:
        raise ModelFormatError("Missing 'init' line.")
    _check_sum(init, init_line, "init")
    for key, dist in transitions.items():
        s, a = key
        _check_sum(dist, first_line[key], f"({table.names[s]}, {actions[a]})")
    for (s, a) in rewards:
        if (s, a) not in transitions:
            raise ModelFormatError(
                f"Reward for disabled pair ({table.names[s]}, {actions[a]}).", entity=table.names[s]
            )

    try:
        return Pomdp(
            state_names=table.names,
            actions=actions,
            transitions=transitions,
            rewards=rewards,
            init=init,
            labels={name: frozenset(states) for name, states in labels.items()},
            observations=observations,
            obs_map=tuple(obs_map),
        )
    except ModelValidationError as e:
        logger.error(f"❌ Model failed validation: {e.message}")
        raise ModelFormatError(e.message, entity=e.entity) from e


def _init_tokens(init, names) -> str:
    return " ".join(f"{names[s]}:{format_real(p)}" for s, p in sorted(init.items()))


def _label_lines(labels, names) -> List[str]:
    return [
        " ".join(["label", name, *(names[s] for s in sorted(states))])
        for name, states in sorted(labels.items())
    ]


def serialize_pomdp(p: Pomdp) -> str:
    names = p.state_names
    out = [
        "pomdp",
        f"states {p.n_states}",
        "actions " + " ".join(p.actions),
        "observations " + " ".join(p.observations),
        "init " + _init_tokens(p.init, names),
    ]
    out.extend(f"obs {names[s]} {p.observations[z]}" for s, z in enumerate(p.obs_map))
    for (s, a) in sorted(p.transitions):
        for target, prob in sorted(p.transitions[(s, a)].items()):
            out.append(f"T {names[s]} {p.actions[a]} {names[target]} {format_real(prob)}")
    for (s, a) in sorted(p.rewards):
        out.append(f"R {names[s]} {p.actions[a]} {format_real(p.rewards[(s, a)])}")
    out.extend(_label_lines(p.labels, names))
    return "\n".join(out) + "\n"


def parse_dtmc(text: str) -> Dtmc:
    lines = tokenize(text)
    _expect_header(lines, "dtmc")

    count: Optional[int] = None
    body: List[Line] = []
    for line, tokens in lines[1:]:
        if tokens[0] == "states":
            count = _parse_count(tokens, line)
        elif tokens[0] in ("init", "P", "R", "label"):
            body.append((line, tokens))
        else:
            raise ModelFormatError(f"Unknown keyword '{tokens[0]}'.", line=line)
    if count is None:
        raise ModelFormatError("Missing 'states <n>' line.")

    # Chain states are declared by their first P line, in order.
    declared: List[Tuple[str, int]] = []
    seen = set()
    for line, tokens in body:
        if tokens[0] == "P" and len(tokens) == 4 and tokens[1] not in seen:
            seen.add(tokens[1])
            declared.append((tokens[1], line))
    table = _StateTable(count, declared)

    init: Optional[Dict[int, float]] = None
    transitions: List[Dict[int, float]] = [{} for _ in range(count)]
    first_line: Dict[int, int] = {}
    rewards = [0.0] * count
    labels: Dict[str, set] = {}
    for line, tokens in body:
        keyword = tokens[0]
        if keyword == "init":
            if init is not None:
                raise ModelFormatError("Duplicate 'init' line.", line=line)
            init = _parse_init(tokens[1:], line, table.resolve)
        elif keyword == "P":
            if len(tokens) != 4:
                raise ModelFormatError("Expected 'P <state> <state'> <prob>'.", line=line)
            source, target = table.resolve(tokens[1], line), table.resolve(tokens[2], line)
            if target in transitions[source]:
                raise ModelFormatError(f"Duplicate transition to '{tokens[2]}'.", line=line, entity=tokens[2])
            first_line.setdefault(source, line)
            transitions[source][target] = parse_probability(tokens[3], line)
        elif keyword == "R":
            if len(tokens) != 3:
                raise ModelFormatError("Expected 'R <state> <real>'.", line=line)
            rewards[table.resolve(tokens[1], line)] = parse_real(tokens[2], line)
        else:
            if len(tokens) < 2:
                raise ModelFormatError("Expected 'label <name> <state>*'.", line=line)
            labels.setdefault(tokens[1], set()).update(table.resolve(name, line) for name in tokens[2:])

    if init is None:
        raise ModelFormatError("Missing 'init' line.")
    for s, dist in enumerate(transitions):
        _check_sum(dist, first_line[s], table.names[s])

    try:
        return Dtmc(
            state_names=table.names,
            transitions=tuple(transitions),
            state_rewards=tuple(rewards),
            init=init,
            labels={name: frozenset(states) for name, states in labels.items()},
        )
    except ModelValidationError as e:
        logger.error(f"❌ Chain failed validation: {e.message}")
        raise ModelFormatError(e.message, entity=e.entity) from e


def serialize_dtmc(d: Dtmc) -> str:
    names = d.state_names
    out = ["dtmc", f"states {d.n_states}", "init " + _init_tokens(d.init, names)]
    for s, dist in enumerate(d.transitions):
        for target, prob in sorted(dist.items()):
            out.append(f"P {names[s]} {names[target]} {format_real(prob)}")
    for s, reward in enumerate(d.state_rewards):
        if reward != 0.0:
            out.append(f"R {names[s]} {format_real(reward)}")
    out.extend(_label_lines(d.labels, names))
    return "\n".join(out) + "\n"
