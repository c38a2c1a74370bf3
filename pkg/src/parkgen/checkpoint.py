"""Checkpoint file format.

Layout: a versioned magic line, `key=value` header lines (architecture
fields, init seed, optional `extra.*` provenance such as the training task
or a noise schedule), a tensor index (name, numel, shape per line), the
literal line `:binary:`, then the raw little-endian float32 tensor data
back to back in index order. Round trips are bit-exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError
from .nets import ArchSpec, Weights

MAGIC = "PARKGEN-CKPT 1"
_BINARY_SENTINEL = ":binary:"

_SPEC_FIELDS = (
    "kind",
    "in_channels",
    "out_channels",
    "base_width",
    "depth",
    "norm",
    "time_embedding_dim",
)
_INT_FIELDS = {"in_channels", "out_channels", "base_width", "depth", "time_embedding_dim"}


def save_checkpoint(path: str | Path, weights: Weights, extra: dict | None = None) -> None:
    """Write weights (and optional provenance strings) to `path`."""
    spec_dict = weights.spec.to_dict()
    lines = [MAGIC]
    lines += [f"{k}={spec_dict[k]}" for k in _SPEC_FIELDS]
    lines.append(f"seed={weights.seed}")
    for k, v in sorted((extra or {}).items()):
        if "\n" in str(v) or "=" in str(k):
            raise DataError(f"extra field {k!r} not representable in the header")
        lines.append(f"extra.{k}={v}")
    lines.append(f"tensors={len(weights.tensors)}")
    for name, arr in weights.tensors.items():
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name} {arr.size} {shape}")
    lines.append(_BINARY_SENTINEL)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    blob = b"".join(arr.astype("<f4", copy=False).tobytes() for arr in weights.tensors.values())
    Path(path).write_bytes(header + blob)


def load_checkpoint(path: str | Path) -> tuple[Weights, dict]:
    """Read a checkpoint; returns (weights, extra provenance dict)."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    sentinel = (_BINARY_SENTINEL + "\n").encode("utf-8")
    cut = raw.find(sentinel)
    if cut < 0:
        raise DataError(f"{path}: not a checkpoint file (missing binary sentinel)")
    header_lines = raw[:cut].decode("utf-8").splitlines()
    blob = raw[cut + len(sentinel):]

    if not header_lines or header_lines[0] != MAGIC:
        got = header_lines[0] if header_lines else "<empty>"
        raise DataError(f"{path}: bad magic {got!r}, expected {MAGIC!r}")

    fields: dict[str, str] = {}
    extra: dict[str, str] = {}
    index: list[tuple[str, int, tuple[int, ...]]] = []
    it = iter(header_lines[1:])
    for line in it:
        if line.startswith("extra."):
            k, _, v = line[len("extra."):].partition("=")
            extra[k] = v
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise DataError(f"{path}: malformed header line {line!r}")
        fields[key] = value
        if key == "tensors":
            break
    try:
        n_tensors = int(fields["tensors"])
        for _ in range(n_tensors):
            name, numel, shape = next(it).rsplit(" ", 2)
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            index.append((name, int(numel), dims))
        spec = ArchSpec(
            **{k: (int(fields[k]) if k in _INT_FIELDS else fields[k]) for k in _SPEC_FIELDS}
        )
        seed = int(fields["seed"])
    except (KeyError, ValueError, StopIteration) as exc:
        raise DataError(f"{path}: malformed checkpoint header: {exc}") from None

    expected_bytes = sum(numel for _, numel, _ in index) * 4
    if len(blob) != expected_bytes:
        raise DataError(
            f"{path}: tensor payload is {len(blob)} bytes, index promises {expected_bytes}"
        )
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name, numel, dims in index:
        flat = np.frombuffer(blob, dtype="<f4", count=numel, offset=offset)
        tensors[name] = flat.reshape(dims).copy()
        offset += numel * 4
    return Weights(spec=spec, seed=seed, tensors=tensors), extra
