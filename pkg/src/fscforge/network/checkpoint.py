"""
Plain-text network checkpoints.

    fscforge-checkpoint 1
    seed <seed>
    dims <observations> <actions> <hidden> <qbn width, 0 without QBN>
    tensor <name> <float64|bool> <d1>x<d2>...
    <values as float.hex, space separated>
    ...
    digest sha256 <hex over every tensor line>
"""
import logging
from pathlib import Path
from typing import Dict, List, Union

import torch

from fscforge.environment.seeding import sha256_hex
from fscforge.exceptions.model_format_error import ModelFormatError
from fscforge.network.policy_network import DTYPE, Qbn, RecurrentPolicy

MAGIC = "fscforge-checkpoint 1"

logger = logging.getLogger(__name__)


def _tensor_lines(name: str, tensor: torch.Tensor) -> List[str]:
    kind = "bool" if tensor.dtype == torch.bool else "float64"
    shape = "x".join(str(d) for d in tensor.shape) or "scalar"
    values = tensor.detach().to(DTYPE).reshape(-1).tolist()
    return [f"tensor {name} {kind} {shape}", " ".join(float(v).hex() for v in values)]


def dumps_checkpoint(net: RecurrentPolicy) -> str:
    width = net.qbn.width if net.qbn is not None else 0
    body: List[str] = []
    for name, tensor in net.state_dict().items():
        body.extend(_tensor_lines(name, tensor))
    digest = sha256_hex("\n".join(body).encode("utf-8"))
    header = [
        MAGIC,
        f"seed {net.seed}",
        f"dims {net.n_observations} {net.n_actions} {net.hidden_size} {width}",
    ]
    return "\n".join(header + body + [f"digest sha256 {digest}"]) + "\n"


def save_checkpoint(net: RecurrentPolicy, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_checkpoint(net), encoding="utf-8")
    logger.info(f"📤 Checkpoint written to {path}")


def _parse_ints(tokens: List[str], line: int) -> List[int]:
    try:
        return [int(t) for t in tokens]
    except ValueError as e:
        raise ModelFormatError(f"Expected integers, got {' '.join(tokens)}.", line=line) from e


def _parse_tensor(header: str, values: str, line: int) -> torch.Tensor:
    tokens = header.split()
    if len(tokens) != 4 or tokens[2] not in ("float64", "bool"):
        raise ModelFormatError("Expected 'tensor <name> <float64|bool> <shape>'.", line=line)
    shape = [] if tokens[3] == "scalar" else _parse_ints(tokens[3].split("x"), line)
    try:
        flat = [float.fromhex(v) for v in values.split()]
    except ValueError as e:
        raise ModelFormatError(f"Invalid value in tensor '{tokens[1]}'.", line=line + 1) from e
    tensor = torch.tensor(flat, dtype=DTYPE)
    expected = 1
    for d in shape:
        expected *= d
    if tensor.numel() != expected:
        raise ModelFormatError(f"Tensor '{tokens[1]}' holds {tensor.numel()} values, expected {expected}.",
                               line=line + 1, entity=tokens[1])
    tensor = tensor.reshape(shape)
    return tensor.to(torch.bool) if tokens[2] == "bool" else tensor


def loads_checkpoint(text: str) -> RecurrentPolicy:
    lines = text.splitlines()
    if len(lines) < 4 or lines[0] != MAGIC:
        raise ModelFormatError(f"Not a checkpoint: expected '{MAGIC}'.", line=1)
    seed_tokens, dim_tokens = lines[1].split(), lines[2].split()
    if len(seed_tokens) != 2 or seed_tokens[0] != "seed":
        raise ModelFormatError("Expected 'seed <seed>'.", line=2)
    if len(dim_tokens) != 5 or dim_tokens[0] != "dims":
        raise ModelFormatError("Expected 'dims <observations> <actions> <hidden> <width>'.", line=3)
    (seed,) = _parse_ints(seed_tokens[1:], 2)
    n_observations, n_actions, hidden_size, width = _parse_ints(dim_tokens[1:], 3)

    digest_tokens = lines[-1].split()
    if len(digest_tokens) != 3 or digest_tokens[:2] != ["digest", "sha256"]:
        raise ModelFormatError("Missing closing digest line.", line=len(lines))
    body = lines[3:-1]
    if sha256_hex("\n".join(body).encode("utf-8")) != digest_tokens[2]:
        logger.error("❌ Checkpoint digest mismatch")
        raise ModelFormatError("Checkpoint digest does not match its tensors.", line=len(lines))
    if len(body) % 2:
        raise ModelFormatError("Every tensor header needs one value line.", line=len(lines) - 1)

    state: Dict[str, torch.Tensor] = {}
    for offset in range(0, len(body), 2):
        line = offset + 4
        tensor = _parse_tensor(body[offset], body[offset + 1], line)
        state[body[offset].split()[1]] = tensor

    net = RecurrentPolicy(n_observations, n_actions, hidden_size, seed)
    if width:
        net.attach_qbn(Qbn(hidden_size, width))
    try:
        net.load_state_dict(state)
    except RuntimeError as e:
        raise ModelFormatError(f"Tensors do not fit the declared dimensions: {e}") from e
    net.eval()
    return net


def load_checkpoint(path: Union[str, Path]) -> RecurrentPolicy:
    net = loads_checkpoint(Path(path).read_text(encoding="utf-8"))
    logger.info(f"📥 Checkpoint loaded from {path}")
    return net
