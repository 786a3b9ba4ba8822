"""Binary tensor files and model checkpoints.

Tensor file (little-endian)::

    b"TNSR" | u32 version | u32 rank | rank x u32 extents | payload

Version 1 carries float32 payloads, version 2 float64. Rank 0 is rejected;
scalars are stored as rank 1 with extent 1.

Checkpoint file (little-endian)::

    b"FUSE" | u32 version | u32 len | header text (UTF-8 key=value lines)
    | u32 count | count x (u32 len | name | u64 len | tensor file bytes)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_pairs
from .errors import FormatError, ScenarioError
from .layers import ParamSet
from .model import ArchConfig, FusionModel, Scenario
from .optim import GroupOptState, HyperParams

TENSOR_MAGIC = b"TNSR"
CKPT_MAGIC = b"FUSE"
CKPT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


# ---------------------------------------------------------------- tensors


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 0:
        raise FormatError("rank-0 tensors are not representable; store scalars with shape (1,)")
    if arr.dtype == np.float64:
        version = 2
    elif arr.dtype == np.float32:
        version = 1
    else:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    head = TENSOR_MAGIC + struct.pack(f"<II{arr.ndim}I", version, arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[version]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; returns it and the end offset."""
    view = memoryview(buf)
    if bytes(view[offset : offset + 4]) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    if len(buf) < offset + 12:
        raise FormatError("truncated tensor header")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version not in _DTYPES:
        raise FormatError(f"unsupported tensor version {version}")
    if rank == 0:
        raise FormatError("rank-0 tensor")
    pos = offset + 12
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated tensor extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = _DTYPES[version]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated tensor payload: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: FusionModel
    opt1: GroupOptState
    opt2: GroupOptState
    config: RunConfig
    meta: dict[str, str] = field(default_factory=dict)
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def require_scenario(self, scenario) -> None:
        scenario = Scenario(scenario)
        if self.model.scenario is not scenario:
            raise ScenarioError(
                f"checkpoint was trained for scenario {self.model.scenario.value!r}, "
                f"refusing to evaluate it as {scenario.value!r}"
            )


def _header(ckpt: Checkpoint) -> str:
    m = ckpt.model
    cfg = ckpt.config
    lines = [cfg.to_text()]
    state = {
        "state.scenario": m.scenario.value,
        "state.n_attributes": str(m.n_attributes),
        "state.n_identities": str(m.n_identities),
        "state.dtype": str(m.dtype),
        "state.theta1.t": str(ckpt.opt1.t),
        "state.theta2.t": str(ckpt.opt2.t),
        "state.theta1.members": ",".join(ckpt.opt1.members),
        "state.theta2.members": ",".join(ckpt.opt2.members),
    }
    for k, v in sorted(ckpt.meta.items()):
        state[f"meta.{k}"] = v
    lines.extend(f"{k}={v}\n" for k, v in state.items())
    return "".join(lines)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write ``ckpt`` atomically (temp file, then rename)."""
    named: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in ckpt.model.arrays().items()]
    for tag, st in (("opt1", ckpt.opt1), ("opt2", ckpt.opt2)):
        named += [(f"{tag}.m/{k}", st.m[k]) for k in st.members]
        named += [(f"{tag}.u/{k}", st.u[k]) for k in st.members]
    named += [(f"extra/{k}", v) for k, v in sorted(ckpt.extras.items())]

    header = _header(ckpt).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header, struct.pack("<I", len(named))]
    for name, arr in named:
        blob = encode_tensor(arr)
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<Q", len(blob)), blob]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        if len(buf) < pos + hlen:
            raise FormatError(f"{path}: truncated header")
        header = buf[pos : pos + hlen].decode("utf-8")
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (blen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            if len(buf) < pos + blen:
                raise FormatError(f"{path}: truncated tensor {name!r}")
            arr, end = decode_tensor(buf[pos : pos + blen])
            if end != blen:
                raise FormatError(f"{path}: tensor {name!r} length mismatch")
            tensors[name] = arr
            pos += blen
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: corrupt text block") from exc
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return _rebuild(header, tensors, str(path))


def _rebuild(header: str, tensors: dict[str, np.ndarray], where: str) -> Checkpoint:
    try:
        pairs = parse_pairs(header.splitlines())
        cfg = RunConfig.from_text(
            "".join(f"{k}={v}\n" for k, v in pairs.items() if k.split(".")[0] not in ("state", "meta"))
        )
        scenario = Scenario(pairs["state.scenario"])
        n_attr = int(pairs["state.n_attributes"])
        n_id = int(pairs["state.n_identities"])
        groups = {"w1": ParamSet(), "w21": ParamSet(), "w22": ParamSet()}
        for name, arr in tensors.items():
            if name.startswith("param/"):
                group, pid = name[len("param/"):].split("/", 1)
                groups[group][pid] = arr
        model = FusionModel(ArchConfig.from_config(cfg), scenario, n_attr, n_id, groups["w1"], groups["w21"], groups["w22"])
        hyper = HyperParams(cfg.opt.alpha, cfg.opt.beta1, cfg.opt.beta2, cfg.opt.eps)
        states = []
        for tag, group in (("opt1", "theta1"), ("opt2", "theta2")):
            members = tuple(pairs[f"state.{group}.members"].split(","))
            states.append(GroupOptState(
                group,
                members,
                hyper,
                {k: tensors[f"{tag}.m/{k}"] for k in members},
                {k: tensors[f"{tag}.u/{k}"] for k in members},
                int(pairs[f"state.{group}.t"]),
            ))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{where}: inconsistent checkpoint contents ({exc})") from exc
    expected = model.arrays()
    for k, v in expected.items():
        if v.shape != tensors[f"param/{k}"].shape:
            raise FormatError(f"{where}: parameter {k} has unexpected shape")
    meta = {k[len("meta."):]: v for k, v in pairs.items() if k.startswith("meta.")}
    extras = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
    return Checkpoint(model, states[0], states[1], cfg, meta, extras)
