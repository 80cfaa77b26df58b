"""
DIVMIN1 checkpoints: a line-oriented text format holding named float64
arrays plus string metadata. Floats are written as ``float.hex`` so a
save/load round trip is bitwise exact.

    DIVMIN1 1
    meta <key> <json value>
    records <N>
    param <name>\t<shape>\t<hex floats>
    end
"""

import json
import os
from typing import Any, Dict, Optional, Tuple

import numpy as np

import jsonlog
from autodiff import GaussianPolicyParams, Params

logger = jsonlog.setup_logger("checkpoint")

MAGIC = "DIVMIN1"
VERSION = 1


class CheckpointError(Exception):
    """Raised for a checkpoint that is corrupted, truncated or written by another format version."""


def _encode_array(name: str, value: np.ndarray) -> str:
    if "\t" in name or "\n" in name:
        raise CheckpointError(f"invalid parameter name {name!r}")
    arr = np.asarray(value, dtype=np.float64)
    shape = ",".join(str(d) for d in arr.shape)
    data = " ".join(float(x).hex() for x in arr.reshape(-1))
    return f"param {name}\t{shape}\t{data}"


def _decode_array(line: str) -> Tuple[str, np.ndarray]:
    try:
        name, shape_text, data = line[len("param "):].split("\t")
        shape = tuple(int(d) for d in shape_text.split(",")) if shape_text else ()
        values = [float.fromhex(x) for x in data.split()]
        return name, np.array(values, dtype=np.float64).reshape(shape)
    except ValueError as e:
        raise CheckpointError(f"malformed parameter record: {e}")


def save_checkpoint(path: str, params: Params, meta: Optional[Dict[str, Any]] = None) -> None:
    lines = [f"{MAGIC} {VERSION}"]
    for key, value in (meta or {}).items():
        lines.append(f"meta {key} {json.dumps(value)}")
    lines.append(f"records {len(params)}")
    lines.extend(_encode_array(name, value) for name, value in params.items())
    lines.append("end")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
    logger.info(f"Checkpoint saved: {path}", extra={"records": len(params)})


def load_checkpoint(path: str) -> Tuple[Params, Dict[str, Any]]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: not a text checkpoint (invalid UTF-8)")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CheckpointError(f"{path}: empty file")

    header = lines[0].split(" ")
    if len(header) != 2 or header[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {lines[0][:16]!r}, expected {MAGIC}")
    if header[1] != str(VERSION):
        raise CheckpointError(f"{path}: checkpoint version {header[1]} is not supported "
                              f"(reader is {MAGIC} version {VERSION})")

    meta: Dict[str, Any] = {}
    cursor = 1
    while cursor < len(lines) and lines[cursor].startswith("meta "):
        fields = lines[cursor].split(" ", 2)
        if len(fields) != 3:
            raise CheckpointError(f"{path}: malformed metadata line")
        _, key, value = fields
        try:
            meta[key] = json.loads(value)
        except json.JSONDecodeError:
            raise CheckpointError(f"{path}: malformed metadata for {key!r}")
        cursor += 1

    if cursor >= len(lines) or not lines[cursor].startswith("records "):
        raise CheckpointError(f"{path}: truncated before record count")
    try:
        count = int(lines[cursor].split(" ", 1)[1])
    except ValueError:
        raise CheckpointError(f"{path}: malformed record count")
    cursor += 1

    params: Params = {}
    for _ in range(count):
        if cursor >= len(lines) or not lines[cursor].startswith("param "):
            raise CheckpointError(f"{path}: truncated after {len(params)} of {count} records")
        name, value = _decode_array(lines[cursor])
        params[name] = value
        cursor += 1
    if cursor >= len(lines) or lines[cursor] != "end":
        raise CheckpointError(f"{path}: truncated, missing end marker")
    return params, meta


def checkpoint_roundtrip(params: Params, path: str) -> Params:
    save_checkpoint(path, params)
    loaded, _ = load_checkpoint(path)
    return loaded


def prefixed(prefix: str, params: Params) -> Params:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def strip_prefix(prefix: str, params: Params) -> Params:
    head = f"{prefix}/"
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def pack_agent(agent, prefix: str = "agent0") -> Params:
    """Policy, both value baselines and (when present) the discriminator of one agent."""
    out = prefixed(f"{prefix}/policy", agent.policy.flat())
    out.update(prefixed(f"{prefix}/value_env", agent.values.env.net.weights))
    out.update(prefixed(f"{prefix}/value_shaped", agent.values.shaped.net.weights))
    if agent.discriminator is not None:
        out.update(prefixed(f"{prefix}/discriminator", agent.discriminator.net.weights))
    return out


def unpack_policy(params: Params, prefix: str = "agent0") -> GaussianPolicyParams:
    flat = strip_prefix(f"{prefix}/policy", params)
    if not flat:
        raise CheckpointError(f"no policy stored under {prefix!r}")
    return GaussianPolicyParams.from_flat(flat)
