import pytest

from fscforge.checker.spec import parse_spec
from fscforge.extraction.fsc import parse_fsc
from fscforge.pomdp.model_format import parse_pomdp

# Five states: s0..s2 look alike ("blue"), s3 is the target, s4 a dead end.
EXAMPLE_MODEL = """\
pomdp
states 5
actions up down a
observations blue s3 s4
obs s0 blue
obs s1 blue
obs s2 blue
obs s3 s3
obs s4 s4
init s0:1/3 s1:1/3 s2:1/3
T s0 up s1 1
T s0 down s2 1
T s1 up s1 1
T s1 down s3 1
T s2 up s3 1
T s2 down s4 1
T s3 a s3 1
T s4 a s4 1
label s3 s3
label s4 s4
"""

# One node, always "up" on blue.
ONE_NODE_FSC = """\
fsc
nodes 1
init 0
A 0 blue up:1
A 0 s3 a:1
A 0 s4 a:1
"""

# Alternates up/down on blue: reaches s3 from every start.
TWO_NODE_FSC = """\
fsc
nodes 2
init 0
A 0 blue up:1 down:0
A 1 blue up:0 down:1
A 0 s3 a:1
A 1 s3 a:1
A 0 s4 a:1
A 1 s4 a:1
D 0 blue up 1
D 1 blue down 0
"""

REACH_S3 = 'P>=0.9 [ F "s3" ]'


def one_node_fsc(p_up: float) -> str:
    return (
        "fsc\nnodes 1\ninit 0\n"
        f"A 0 blue up:{p_up!r} down:{1.0 - p_up!r}\n"
        "A 0 s3 a:1\nA 0 s4 a:1\n"
    )


@pytest.fixture
def example_pomdp():
    return parse_pomdp(EXAMPLE_MODEL)


@pytest.fixture
def one_node():
    return parse_fsc(ONE_NODE_FSC)


@pytest.fixture
def two_node():
    return parse_fsc(TWO_NODE_FSC)


@pytest.fixture
def reach_s3():
    return parse_spec(REACH_S3)


@pytest.fixture
def files(tmp_path):
    """Writes the example model and controllers to disk and returns their paths."""
    paths = {
        "model": tmp_path / "example.pomdp",
        "one_node": tmp_path / "one_node.fsc",
        "two_node": tmp_path / "two_node.fsc",
    }
    paths["model"].write_text(EXAMPLE_MODEL, encoding="utf-8")
    paths["one_node"].write_text(ONE_NODE_FSC, encoding="utf-8")
    paths["two_node"].write_text(TWO_NODE_FSC, encoding="utf-8")
    return {name: str(path) for name, path in paths.items()}
