"""Binary checkpoint format.

Layout (little-endian)::

    b"HIEHRCK1"
    u32 version
    u64 config length, config text (sorted key=value lines, UTF-8)
    u64 tensor count
    per tensor: u32 name length, name, u32 rank, u64 dims[rank], float32 values
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .errors import BadMagic, ShapeMismatch, TruncatedFile, VersionMismatch
from .model import ModelConfig

MAGIC = b"HIEHRCK1"
VERSION = 1


def config_text(config: dict[str, object]) -> str:
    return "".join(f"{k}={config[k]}\n" for k in sorted(config))


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


@dataclass
class Checkpoint:
    config: dict[str, str]
    tensors: dict[str, Tensor]

    @property
    def kind(self) -> str:
        return self.config.get("kind", "")

    def model_config(self) -> ModelConfig:
        prefix = "model."
        return ModelConfig.from_dict(
            {k[len(prefix):]: v for k, v in self.config.items() if k.startswith(prefix)}
        )

    def prefixed(self, prefix: str) -> dict[str, Tensor]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(
    path: str | Path,
    config: dict[str, object],
    tensors: dict[str, Tensor],
) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = config_text(config).encode("utf-8")
    buf.write(struct.pack("<Q", len(text)))
    buf.write(text)
    buf.write(struct.pack("<Q", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"file ends while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str | Path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.data[: len(MAGIC)] != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint (bad magic)")
    r.pos = len(MAGIC)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    (n_cfg,) = r.unpack("<Q", "config length")
    config = parse_config_text(r.take(n_cfg, "config").decode("utf-8"))
    (count,) = r.unpack("<Q", "tensor count")
    tensors = {}
    for i in range(count):
        (n_name,) = r.unpack("<I", f"tensor {i} name length")
        name = r.take(n_name, f"tensor {i} name").decode("utf-8")
        (rank,) = r.unpack("<I", f"{name} rank")
        dims = r.unpack(f"<{rank}Q", f"{name} dims") if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(4 * n, f"{name} values"), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(arr.copy())
    if r.pos != len(r.data):
        raise TruncatedFile(f"{path}: {len(r.data) - r.pos} bytes beyond the declared {count} tensors")
    return Checkpoint(config, tensors)


def load_into(module: nn.Module, tensors: dict[str, Tensor]) -> None:
    """Copy tensors into ``module`` after checking names and shapes."""
    state = module.state_dict()
    missing = sorted(set(state) - set(tensors))
    if missing:
        raise ShapeMismatch(f"checkpoint lacks tensors {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for name, ref in state.items():
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise ShapeMismatch(
                f"{name}: checkpoint shape {tuple(tensors[name].shape)}, config expects {tuple(ref.shape)}"
            )
    module.load_state_dict({k: tensors[k].to(state[k].dtype) for k in state})


def model_config_entries(kind: str, cfg: ModelConfig, extra: dict | None = None) -> dict[str, object]:
    entries: dict[str, object] = {"kind": kind}
    entries.update({f"model.{k}": v for k, v in cfg.to_dict().items()})
    entries.update(extra or {})
    return entries


def generator_tensor(gen: torch.Generator) -> Tensor:
    return gen.get_state().to(torch.float32)


def restore_generator(t: Tensor) -> torch.Generator:
    g = torch.Generator()
    g.set_state(t.to(torch.uint8))
    return g


def save_model(
    path: str | Path,
    kind: str,
    model: nn.Module,
    extra: dict | None = None,
    optimizer=None,
    rng: torch.Generator | None = None,
) -> None:
    """Checkpoint a ``hibehrt``/``behrt`` model or a ``byol`` state."""
    cfg = model.cfg
    extra = dict(extra or {})
    if kind == "byol":
        extra.update({"byol.tau": model.tau, "byol.projector_hidden": model.projector_hidden,
                      "byol.projection_size": model.projection_size})
    tensors = dict(model.state_dict())
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    if rng is not None:
        tensors["rng.torch"] = generator_tensor(rng)
    save_checkpoint(path, model_config_entries(kind, cfg, extra), tensors)


def load_model(path: str | Path) -> tuple[str, nn.Module, Checkpoint]:
    from .byol import ByolState
    from .model import build_model

    ck = load_checkpoint(path)
    cfg = ck.model_config()
    if ck.kind == "byol":
        model = ByolState(cfg, float(ck.config["byol.tau"]), int(ck.config["byol.projector_hidden"]),
                          int(ck.config["byol.projection_size"]))
    else:
        model = build_model(ck.kind, cfg)
    params = {k: v for k, v in ck.tensors.items() if not k.startswith(("optim.", "rng."))}
    load_into(model, params)
    return ck.kind, model, ck
