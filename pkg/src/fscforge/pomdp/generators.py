import logging
from typing import Dict, List, Set, Tuple

from fscforge.exceptions.configuration_error import ConfigurationError
from fscforge.pomdp.pomdp import Pomdp

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

ACTIONS = ("north", "south", "east", "west")
MOVES = {"north": (-1, 0), "south": (1, 0), "east": (0, 1), "west": (0, -1)}

MAZE_OBSERVATIONS = ("es", "ew", "ews", "ws", "ns", "n", "goal")

# Neighbour order for the 8-bit occupancy observation: N, NE, E, SE, S, SW, W, NW.
NEIGHBOURS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _step(cell: Cell, action: str, free: Set[Cell]) -> Cell:
    dr, dc = MOVES[action]
    target = (cell[0] + dr, cell[1] + dc)
    return target if target in free else cell


def _uniform(states: List[int]) -> Dict[int, float]:
    return {s: 1.0 / len(states) for s in states}


def _grid_world(cells: List[Cell], goal: Cell, names: List[str], observations: Tuple[str, ...],
                observe) -> Pomdp:
    """Deterministic cardinal moves over `cells`; blocked moves stay; unit cost off the absorbing goal."""
    index = {cell: i for i, cell in enumerate(cells)}
    free = set(cells)
    transitions = {}
    rewards = {}
    for cell, s in index.items():
        for a, action in enumerate(ACTIONS):
            if cell == goal:
                transitions[(s, a)] = {s: 1.0}
                continue
            transitions[(s, a)] = {index[_step(cell, action, free)]: 1.0}
            rewards[(s, a)] = 1.0
    goal_state = index[goal]
    return Pomdp(
        state_names=tuple(names),
        actions=ACTIONS,
        transitions=transitions,
        rewards=rewards,
        init=_uniform([s for s in range(len(cells)) if s != goal_state]),
        labels={"goal": frozenset({goal_state})},
        observations=observations,
        obs_map=tuple(observations.index(observe(cell)) for cell in cells),
    )


def gen_grid(c: int) -> Pomdp:
    """c x c open grid, goal in the bottom-right corner, observations 'goal' / 'open'."""
    if c < 2:
        raise ConfigurationError(f"Grid size must be at least 2, got {c}.", field="c")
    cells = [(r, col) for r in range(c) for col in range(c)]
    goal = (c - 1, c - 1)
    pomdp = _grid_world(
        cells,
        goal,
        [f"x{r}_{col}" for r, col in cells],
        ("goal", "open"),
        lambda cell: "goal" if cell == goal else "open",
    )
    logger.info(f"✅ Generated Grid({c}): |S|={pomdp.n_states} |Z|={pomdp.n_observations}")
    return pomdp


def gen_maze(c: int) -> Pomdp:
    """
    Five-cell corridor with three shafts of c+1 cells below columns 0, 2 and 4.
    The bottom of the middle shaft is the goal; cells are observed by their open sides.
    """
    if c < 1:
        raise ConfigurationError(f"Maze size must be at least 1, got {c}.", field="c")
    cells = [(0, col) for col in range(5)]
    for r in range(1, c + 2):
        cells.extend((r, col) for col in (0, 2, 4))
    free = set(cells)
    goal = (c + 1, 2)

    def observe(cell: Cell) -> str:
        if cell == goal:
            return "goal"
        return "".join(
            name[0] for name in ("north", "east", "west", "south") if _step(cell, name, free) != cell
        )

    pomdp = _grid_world(cells, goal, [f"m{r}_{col}" for r, col in cells], MAZE_OBSERVATIONS, observe)
    logger.info(f"✅ Generated Maze({c}): |S|={pomdp.n_states} |Z|={pomdp.n_observations}")
    return pomdp


def static_obstacles(c: int) -> Set[Cell]:
    return {
        (r, col)
        for r in range(c)
        for col in range(c)
        if r % 3 == 1 and col % 3 == 1 and (r, col) not in ((0, 0), (c - 1, c - 1))
    }


def gen_navigation(c: int) -> Pomdp:
    """
    Agent and one randomly moving obstacle on a c x c grid with static obstacles.
    States are (agent cell, obstacle cell); the agent sees 8-neighbour occupancy only.
    """
    if c < 2:
        raise ConfigurationError(f"Navigation size must be at least 2, got {c}.", field="c")
    cells = [(r, col) for r in range(c) for col in range(c)]
    inside = set(cells)
    blocked = static_obstacles(c)
    goal = (c - 1, c - 1)
    index = {(agent, obstacle): i for i, (agent, obstacle) in
             enumerate((agent, obstacle) for agent in cells for obstacle in cells)}

    def obstacle_moves(obstacle: Cell) -> List[Cell]:
        moves = [
            (obstacle[0] + dr, obstacle[1] + dc)
            for dr, dc in MOVES.values()
            if (obstacle[0] + dr, obstacle[1] + dc) in inside
            and (obstacle[0] + dr, obstacle[1] + dc) not in blocked
        ]
        return moves or [obstacle]

    def crashed(agent: Cell, obstacle: Cell) -> bool:
        return agent in blocked or agent == obstacle

    def observe(agent: Cell, obstacle: Cell) -> int:
        code = 0
        for dr, dc in NEIGHBOURS:
            cell = (agent[0] + dr, agent[1] + dc)
            occupied = cell not in inside or cell in blocked or cell == obstacle
            code = (code << 1) | int(occupied)
        return code

    transitions = {}
    rewards = {}
    crash, reached = set(), set()
    obs_map = []
    for (agent, obstacle), s in index.items():
        obs_map.append(observe(agent, obstacle))
        if crashed(agent, obstacle):
            crash.add(s)
        elif agent == goal:
            reached.add(s)
        absorbing = s in crash or s in reached
        moves = obstacle_moves(obstacle)
        for a, action in enumerate(ACTIONS):
            if absorbing:
                transitions[(s, a)] = {s: 1.0}
                continue
            dr, dc = MOVES[action]
            moved = (agent[0] + dr, agent[1] + dc)
            target = moved if moved in inside else agent
            dist: Dict[int, float] = {}
            for nxt in moves:
                key = index[(target, nxt)]
                dist[key] = dist.get(key, 0.0) + 1.0 / len(moves)
            transitions[(s, a)] = dist
            rewards[(s, a)] = 1.0

    start = (0, 0)
    starts = [index[(start, obstacle)] for obstacle in cells if obstacle not in blocked and obstacle != start]
    pomdp = Pomdp(
        state_names=tuple(f"a{a[0]}_{a[1]}_o{o[0]}_{o[1]}" for (a, o) in index),
        actions=ACTIONS,
        transitions=transitions,
        rewards=rewards,
        init=_uniform(starts),
        labels={"goal": frozenset(reached), "crash": frozenset(crash)},
        observations=tuple(f"o{code:08b}" for code in range(256)),
        obs_map=tuple(obs_map),
    )
    logger.info(f"✅ Generated Navigation({c}): |S|={pomdp.n_states} |Z|={pomdp.n_observations}")
    return pomdp


GENERATORS = {"maze": gen_maze, "grid": gen_grid, "navigation": gen_navigation}
