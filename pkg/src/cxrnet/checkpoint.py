"""Binary checkpoint serialization.

File layout, all integers little-endian:

    magic "CXRNET" (6 bytes)
    u16 format version (currently 1)
    u16 metadata line count
    per line: u16 byte length, then UTF-8 "key=value"
    u32 parameter entry count
    per entry: u16 name length, name bytes (UTF-8), u8 rank,
               u32 extent per axis, then IEEE-754 32-bit values (LE)

Metadata lines carry the network config plus epoch, validation loss, and
seed; floats are written with repr so they round-trip bit-exactly.
Parameter entries list trainable arrays first, then running statistics,
both in build order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, NamedTuple

import numpy as np

from .errors import DataError
from .network import DenseNetConfig, Network, zero_network

MAGIC = b"CXRNET"
VERSION = 1


class CheckpointError(DataError):
    """Checkpoint file is malformed, truncated, or mismatched."""


@dataclass(frozen=True)
class CheckpointMeta:
    epoch: int
    val_loss: float
    seed: int
    extra: dict[str, str]


class Checkpoint(NamedTuple):
    network: Network
    meta: CheckpointMeta


_CONFIG_KEYS = (
    "init_features",
    "growth_rate",
    "block_layers",
    "compression",
    "bottleneck_factor",
    "input_channels",
    "input_size",
    "num_classes",
    "bn_eps",
    "bn_momentum",
)


def _config_lines(config: DenseNetConfig) -> list[str]:
    lines = []
    for key in _CONFIG_KEYS:
        value = getattr(config, key)
        if key == "block_layers":
            text = ",".join(str(n) for n in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key}={text}")
    return lines


def _parse_config(fields: dict[str, str]) -> DenseNetConfig:
    missing = [k for k in _CONFIG_KEYS if k not in fields]
    if missing:
        raise CheckpointError(f"checkpoint metadata missing config keys: {', '.join(missing)}")
    try:
        return DenseNetConfig(
            init_features=int(fields["init_features"]),
            growth_rate=int(fields["growth_rate"]),
            block_layers=tuple(int(n) for n in fields["block_layers"].split(",")),
            compression=float(fields["compression"]),
            bottleneck_factor=int(fields["bottleneck_factor"]),
            input_channels=int(fields["input_channels"]),
            input_size=int(fields["input_size"]),
            num_classes=int(fields["num_classes"]),
            bn_eps=float(fields["bn_eps"]),
            bn_momentum=float(fields["bn_momentum"]),
        )
    except ValueError as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from exc


def save_checkpoint(
    network: Network,
    epoch: int,
    val_loss: float,
    path,
    extra: dict[str, str] | None = None,
) -> None:
    lines = _config_lines(network.config)
    lines.append(f"epoch={int(epoch)}")
    lines.append(f"val_loss={float(val_loss)!r}")
    lines.append(f"seed={int(network.seed)}")
    for key, value in (extra or {}).items():
        if "=" in key:
            raise CheckpointError(f"metadata key {key!r} may not contain '='")
        lines.append(f"{key}={value}")

    entries: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in network.params.items()]
    entries += list(network.buffers.items())

    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += struct.pack("<H", len(lines))
    for line in lines:
        raw = line.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    out += struct.pack("<I", len(entries))
    for name, arr in entries:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes for {what}, got {len(data)}")
    return data


def load_checkpoint(path, expected_config: DenseNetConfig | None = None) -> Checkpoint:
    """Rebuild the network from a checkpoint file.

    When expected_config is given, any divergence fails and names the first
    offending parameter; nothing is ever loaded partially.
    """
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: format version {version} unsupported (expected {VERSION})")
        (n_lines,) = struct.unpack("<H", _read_exact(f, 2, "line count"))
        fields: dict[str, str] = {}
        for _ in range(n_lines):
            (length,) = struct.unpack("<H", _read_exact(f, 2, "line length"))
            line = _read_exact(f, length, "metadata line").decode("utf-8")
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointError(f"metadata line without '=': {line!r}")
            fields[key] = value

        config = _parse_config(fields)
        try:
            epoch = int(fields["epoch"])
            val_loss = float(fields["val_loss"])
            seed = int(fields["seed"])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint metadata missing or invalid: {exc}") from exc
        extra = {k: v for k, v in fields.items() if k not in _CONFIG_KEYS and k not in ("epoch", "val_loss", "seed")}

        (n_entries,) = struct.unpack("<I", _read_exact(f, 4, "entry count"))
        arrays: dict[str, np.ndarray] = {}
        order: list[str] = []
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "parameter name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "extents")) if rank else ()
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(f, 4 * count, f"values of {name}")
            if name in arrays:
                raise CheckpointError(f"duplicate parameter {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            order.append(name)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after parameter table")

    if expected_config is not None and expected_config != config:
        _explain_mismatch(expected_config, config)

    network = zero_network(config)
    expected = list(network.params) + list(network.buffers)
    for name in expected:
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
    for name in order:
        if name not in network.params and name not in network.buffers:
            raise CheckpointError(f"checkpoint has unexpected parameter {name!r}")
    for name, arr in arrays.items():
        target = network.params[name].data if name in network.params else network.buffers[name]
        if target.shape != arr.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {arr.shape}, config implies {target.shape}"
            )
        target[...] = arr
    network.seed = seed
    return Checkpoint(network, CheckpointMeta(epoch, val_loss, seed, extra))


def _explain_mismatch(expected: DenseNetConfig, found: DenseNetConfig) -> None:
    from .network import parameter_shapes

    want_p, want_b = parameter_shapes(expected)
    have_p, have_b = parameter_shapes(found)
    want = {**want_p, **want_b}
    have = {**have_p, **have_b}
    for name in list(want_p) + list(want_b):
        if name not in have:
            raise CheckpointError(f"config mismatch: checkpoint lacks parameter {name!r}")
        if want[name] != have[name]:
            raise CheckpointError(
                f"config mismatch at parameter {name!r}: expected shape {want[name]}, "
                f"checkpoint has {have[name]}"
            )
    for name in list(have_p) + list(have_b):
        if name not in want:
            raise CheckpointError(f"config mismatch: checkpoint has unexpected parameter {name!r}")
    raise CheckpointError("config mismatch: configs differ outside the parameter table")
