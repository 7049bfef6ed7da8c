"""Hierarchical encoder, flat baseline encoder and risk head."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor, nn

from .data import CLS, MAX_AGE
from .errors import ConfigInvalid, NoValidSegments
from .nn import Linear, TransformerEncoder, embedding_lookup, trunc_normal_


@dataclass
class ModelConfig:
    vocab_size: int = 0
    hidden: int = 150
    heads: int = 6
    intermediate: int = 108
    extractor_layers: int = 4
    aggregator_layers: int = 4
    flat_layers: int = 8
    dropout: float = 0.2
    attn_dropout: float = 0.3
    max_len: int = 1220
    flat_max_len: int = 256
    window: int = 50
    stride: int = 30
    age_vocab: int = MAX_AGE + 1
    position_vocab: int = 0  # 0: use the encoder's max_len

    def validate(self) -> "ModelConfig":
        if self.hidden % self.heads:
            raise ConfigInvalid(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not 1 <= self.stride <= self.window <= self.max_len:
            raise ConfigInvalid("need 1 <= stride <= window <= max_len")
        if self.vocab_size < 5:
            raise ConfigInvalid("vocab_size must cover the reserved ids plus corpus tokens")
        return self

    def positions_for(self, max_len: int) -> int:
        return self.position_vocab or max_len

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigInvalid(f"unknown model config keys {sorted(unknown)}")
        out = {}
        for k, v in d.items():
            out[k] = float(v) if names[k] in ("float", float) else int(v)
        return cls(**out)


# ---------------------------------------------------------------- geometry


def segment_count(L: int, W: int, S: int) -> int:
    """Number of windows of size W and stride S needed to cover L positions."""
    return math.ceil((max(L, W) - W) / S) + 1


def slide_windows(x: Tensor, mask: Tensor, W: int, S: int) -> tuple[Tensor, Tensor]:
    """Cut ``x`` [..., L, d] into windows [..., N, W, d] starting at 0, S, 2S, ...

    Positions past L are zero-filled with mask False.
    """
    L = x.shape[-2]
    n = segment_count(L, W, S)
    total = (n - 1) * S + W
    if total > L:
        x = torch.cat([x, x.new_zeros(*x.shape[:-2], total - L, x.shape[-1])], dim=-2)
        mask = torch.cat([mask, mask.new_zeros(*mask.shape[:-1], total - L)], dim=-1)
    return x.unfold(-2, W, S).transpose(-1, -2), mask.unfold(-1, W, S)


def attention_cost(L: int, d: int) -> dict[str, int]:
    return {"space": L * L + L * d, "time": L * L * d}


def hierarchical_cost(max_len: int, W: int, S: int, d: int) -> dict[str, int]:
    n = segment_count(max_len, W, S)
    local, top = attention_cost(W, d), attention_cost(n + 1, d)
    return {
        "segments": n,
        "space": n * local["space"] + top["space"],
        "time": n * local["time"] + top["time"],
    }


# ---------------------------------------------------------------- modules


class Embeddings(nn.Module):
    def __init__(self, cfg: ModelConfig, max_len: int):
        super().__init__()
        d = cfg.hidden
        self.token = nn.Parameter(trunc_normal_(torch.empty(cfg.vocab_size, d)))
        self.age = nn.Parameter(trunc_normal_(torch.empty(cfg.age_vocab, d)))
        self.segment = nn.Parameter(trunc_normal_(torch.empty(2, d)))
        self.position = nn.Parameter(trunc_normal_(torch.empty(cfg.positions_for(max_len), d)))

    def forward(self, batch: dict[str, Tensor]) -> Tensor:
        age = batch["age_ids"].clamp(0, self.age.shape[0] - 1)
        pos = batch["position_ids"].clamp(0, self.position.shape[0] - 1)
        return (
            embedding_lookup(self.token, batch["token_ids"])
            + embedding_lookup(self.age, age)
            + embedding_lookup(self.segment, batch["segment_ids"])
            + embedding_lookup(self.position, pos)
        )


class RiskHead(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.pool = Linear(d, d)
        self.out = Linear(d, 1)

    def forward(self, h: Tensor) -> Tensor:
        return self.out(torch.tanh(self.pool(h))).squeeze(-1)


class SegmentTensor(NamedTuple):
    values: Tensor  # [..., N, d]
    mask: Tensor  # [..., N]


class HiBEHRTEncoder(nn.Module):
    """Embeddings, sliding-window local extractor and segment aggregator."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.hidden
        block = (d, cfg.heads, cfg.intermediate, cfg.dropout, cfg.attn_dropout)
        self.embeddings = Embeddings(cfg, cfg.max_len)
        self.extractor = TransformerEncoder(cfg.extractor_layers, *block)
        self.aggregator = TransformerEncoder(cfg.aggregator_layers, *block)
        self.cls_segment = nn.Parameter(trunc_normal_(torch.empty(d)))

    def windows(self, batch: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
        x = self.embeddings(batch)
        return slide_windows(x, batch["mask"], self.cfg.window, self.cfg.stride)

    def extract_segments(
        self, windows: Tensor, window_mask: Tensor, rng: torch.Generator | None = None
    ) -> SegmentTensor:
        """One vector per window: extractor output at the window's first valid position.

        Windows without valid tokens are skipped and yield zero vectors.
        """
        valid = window_mask.any(-1)
        idx = valid.nonzero(as_tuple=True)
        sel, sel_mask = windows[idx], window_mask[idx]
        values = windows.new_zeros(*valid.shape, windows.shape[-1])
        if sel.shape[0]:
            first = sel_mask.to(torch.int8).argmax(-1)
            reps = self.extractor(sel, sel_mask, rng, query_index=first)[..., 0, :]
            values = values.index_put(idx, reps)
        return SegmentTensor(values, valid)

    def aggregate(self, segments: SegmentTensor, rng: torch.Generator | None = None) -> Tensor:
        """Aggregator states [..., 1 + N, d]; index 0 is the CLS segment."""
        values, mask = segments
        if not mask.any(-1).all():
            raise NoValidSegments("a sequence has no valid segments")
        cls = self.cls_segment.expand(*values.shape[:-2], 1, values.shape[-1])
        x = torch.cat([cls, values], dim=-2)
        m = torch.cat([mask.new_ones(*mask.shape[:-1], 1), mask], dim=-1)
        return self.aggregator(x, m, rng)

    def forward(self, batch: dict[str, Tensor], rng: torch.Generator | None = None) -> Tensor:
        w, wm = self.windows(batch)
        return self.aggregate(self.extract_segments(w, wm, rng), rng)


class HiBEHRT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = HiBEHRTEncoder(cfg)
        self.head = RiskHead(cfg.hidden)

    @property
    def max_len(self) -> int:
        return self.cfg.max_len

    def aggregate_and_predict(
        self, segments: SegmentTensor, rng: torch.Generator | None = None
    ) -> Tensor:
        return torch.sigmoid(self.head(self.encoder.aggregate(segments, rng)[..., 0, :]))

    def forward(self, batch: dict[str, Tensor], rng: torch.Generator | None = None) -> Tensor:
        """Logits, one per sequence."""
        return self.head(self.encoder(batch, rng)[..., 0, :])


class BEHRT(nn.Module):
    """Flat encoder over the latest ``flat_max_len`` tokens, pooled at a prepended CLS."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.embeddings = Embeddings(cfg, cfg.flat_max_len)
        self.encoder = TransformerEncoder(
            cfg.flat_layers, cfg.hidden, cfg.heads, cfg.intermediate, cfg.dropout, cfg.attn_dropout
        )
        self.head = RiskHead(cfg.hidden)

    @property
    def max_len(self) -> int:
        return self.cfg.flat_max_len

    def forward(self, batch: dict[str, Tensor], rng: torch.Generator | None = None) -> Tensor:
        x = self.embeddings(batch)
        mask = batch["mask"]
        cls = self.embeddings.token[CLS].expand(*x.shape[:-2], 1, x.shape[-1])
        x = torch.cat([cls, x], dim=-2)
        mask = torch.cat([mask.new_ones(*mask.shape[:-1], 1), mask], dim=-1)
        return self.head(self.encoder(x, mask, rng)[..., 0, :])


def build_model(kind: str, cfg: ModelConfig) -> nn.Module:
    if kind == "hibehrt":
        return HiBEHRT(cfg)
    if kind == "behrt":
        return BEHRT(cfg)
    raise ConfigInvalid(f"unknown model kind {kind!r}")


def to_tensors(arrays: dict[str, np.ndarray], device: str = "cpu") -> dict[str, Tensor]:
    return {k: torch.as_tensor(v, device=device) for k, v in arrays.items()}


@torch.no_grad()
def predict_proba(model: nn.Module, arrays: dict[str, np.ndarray], batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    n = len(arrays["token_ids"])
    out = []
    for i in range(0, n, batch_size):
        batch = to_tensors({k: v[i : i + batch_size] for k, v in arrays.items()})
        out.append(torch.sigmoid(model(batch)).double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)
