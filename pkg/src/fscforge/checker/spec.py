import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

from fscforge.exceptions.model_format_error import ModelFormatError


class Comparison(Enum):
    LT = "<"
    LE = "<="
    GE = ">="
    GT = ">"
    QUERY = "=?"

    def holds(self, value: float, bound: float) -> bool:
        if self is Comparison.LT:
            return value < bound
        if self is Comparison.LE:
            return value <= bound
        if self is Comparison.GE:
            return value >= bound
        if self is Comparison.GT:
            return value > bound
        raise ValueError("A query has no bound to compare against.")


@dataclass(frozen=True)
class ProbEventually:
    target: str


@dataclass(frozen=True)
class ProbUntil:
    avoid: str
    target: str


@dataclass(frozen=True)
class ExpRewardEventually:
    target: str


Objective = Union[ProbEventually, ProbUntil, ExpRewardEventually]


@dataclass(frozen=True)
class Spec:
    objective: Objective
    comparison: Comparison
    bound: Optional[float] = None
    direction: Optional[str] = None

    @property
    def is_probability(self) -> bool:
        return not isinstance(self.objective, ExpRewardEventually)

    @property
    def is_query(self) -> bool:
        return self.comparison is Comparison.QUERY

    @property
    def target(self) -> str:
        return self.objective.target

    @property
    def avoid(self) -> Optional[str]:
        return self.objective.avoid if isinstance(self.objective, ProbUntil) else None

    @property
    def optimization_direction(self) -> str:
        """'max' or 'min': the direction an optimal policy for this spec pushes the value."""
        if self.is_query:
            return self.direction
        upper = self.comparison in (Comparison.GE, Comparison.GT)
        return "max" if upper else "min"

    def holds(self, value: float) -> bool:
        # inf <= bound and inf < bound are false, inf >= bound and inf > bound are true.
        return self.comparison.holds(value, self.bound)


_SPEC = re.compile(
    r"""^\s*(?P<kind>[PR])\s*
        (?:(?P<direction>min|max)\s*=\s*\?|(?P<op><=|>=|<|>)\s*(?P<bound>[^\s\[]+))
        \s*\[\s*(?P<body>.*?)\s*\]\s*$""",
    re.VERBOSE,
)
_EVENTUALLY = re.compile(r'^F\s*"(?P<target>[^"\s]+)"$')
_UNTIL = re.compile(r'^!\s*"(?P<avoid>[^"\s]+)"\s*U\s*"(?P<target>[^"\s]+)"$')


def parse_spec(text: str) -> Spec:
    """Parses `P>=0.9 [ F "goal" ]`, `Pmax=? [ !"X" U "a" ]`, `R<=6 [ F "goal" ]` and friends."""
    match = _SPEC.match(text)
    if not match:
        raise ModelFormatError(f"Cannot parse specification '{text}'.", entity="spec")
    kind, body = match["kind"], match["body"]

    eventually, until = _EVENTUALLY.match(body), _UNTIL.match(body)
    if kind == "P" and eventually:
        objective = ProbEventually(eventually["target"])
    elif kind == "P" and until:
        objective = ProbUntil(until["avoid"], until["target"])
    elif kind == "R" and eventually:
        objective = ExpRewardEventually(eventually["target"])
    else:
        raise ModelFormatError(f"Unsupported path formula '{body}' for {kind}.", entity="spec")

    if match["direction"]:
        return Spec(objective, Comparison.QUERY, direction=match["direction"])

    comparison = Comparison(match["op"])
    if kind == "R" and comparison not in (Comparison.LE, Comparison.GE):
        raise ModelFormatError("Reward bounds support only <= and >=.", entity="spec")
    try:
        bound = float(match["bound"])
    except ValueError as e:
        raise ModelFormatError(f"Invalid bound '{match['bound']}'.", entity="spec") from e
    if math.isnan(bound):
        raise ModelFormatError("Bound must be a number.", entity="spec")
    if kind == "P" and not 0.0 <= bound <= 1.0:
        raise ModelFormatError(f"Probability bound {bound} outside [0, 1].", entity="spec")
    if kind == "R" and bound < 0.0:
        raise ModelFormatError(f"Reward bound {bound} is negative.", entity="spec")
    return Spec(objective, comparison, bound=bound)


def format_spec(spec: Spec) -> str:
    kind = "P" if spec.is_probability else "R"
    head = f"{kind}{spec.direction}=?" if spec.is_query else f"{kind}{spec.comparison.value}{spec.bound!r}"
    if isinstance(spec.objective, ProbUntil):
        body = f'!"{spec.objective.avoid}" U "{spec.objective.target}"'
    else:
        body = f'F "{spec.objective.target}"'
    return f"{head} [ {body} ]"
