"""Self-supervised pretraining with an online/EMA-target pair over segment states.

Only the online branch sees segment augmentation. Both branches consume the
same EHR-augmented sequence unless ``target_sees_augmented`` is switched off.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .data import MASK, EncodedSequence, pack_sequence, stack_sequences
from .errors import ConfigInvalid, ConfigMismatch, EmptySequence, ShapeMismatch, ZeroVector
from .model import HiBEHRT, HiBEHRTEncoder, ModelConfig, SegmentTensor, to_tensors
from .nn import Linear, gelu


@dataclass
class AugmentationConfig:
    crop_prob: float = 0.5
    mask_prob: float = 0.2
    segment_aug_prob: float = 0.5
    zero_prob: float = 0.85  # of selected segments; the rest get Gaussian noise
    noise_std: float = 0.1
    crop_min_fraction: float = 0.5
    target_sees_augmented: bool = True

    def __post_init__(self):
        for name in ("crop_prob", "mask_prob", "segment_aug_prob", "zero_prob", "crop_min_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigInvalid(f"{name} must lie in [0, 1], got {v}")
        if self.noise_std < 0:
            raise ConfigInvalid("noise_std must be non-negative")

    @property
    def mask_vs_noise(self) -> tuple[float, float]:
        return self.zero_prob, 1.0 - self.zero_prob


# ---------------------------------------------------------------- augmentation


def ehr_augment(seq: EncodedSequence, cfg: AugmentationConfig, rng: np.random.Generator) -> EncodedSequence:
    """Random contiguous crop (prob ``crop_prob``) then per-token masking (prob ``mask_prob``)."""
    n = seq.n_valid
    if n == 0:
        raise EmptySequence("cannot augment a sequence without valid tokens")
    tok = seq.token_ids[:n].copy()
    age = seq.age_ids[:n]
    pos = seq.position_ids[:n]
    if rng.random() < cfg.crop_prob:
        lo = max(1, int(np.ceil(cfg.crop_min_fraction * n)))
        length = int(rng.integers(lo, n + 1))
        start = int(rng.integers(0, n - length + 1))
        tok, age, pos = tok[start : start + length], age[start : start + length], pos[start : start + length]
    if cfg.mask_prob > 0:
        tok = np.where(rng.random(len(tok)) < cfg.mask_prob, MASK, tok)
    return pack_sequence(tok, age, pos, len(seq))


def segment_augment(
    segments: SegmentTensor, cfg: AugmentationConfig, rng: torch.Generator | None = None
) -> tuple[SegmentTensor, Tensor]:
    """Zero or noise a random subset of valid segments; returns the selection mask too."""
    values, mask = segments
    u = torch.rand(mask.shape, generator=rng)
    selected = (u < cfg.segment_aug_prob) & mask
    zero = torch.rand(mask.shape, generator=rng) < cfg.zero_prob
    noise = torch.randn(values.shape, generator=rng, dtype=values.dtype) * cfg.noise_std
    to_zero = (selected & zero)[..., None]
    to_noise = (selected & ~zero)[..., None]
    out = torch.where(to_zero, torch.zeros_like(values), values)
    out = torch.where(to_noise, out + noise, out)
    return SegmentTensor(out, mask), selected


# ---------------------------------------------------------------- loss / EMA


def position_losses(online_pred: Tensor, target_proj: Tensor) -> Tensor:
    """2 - 2 cos(q, z) per row; the target side is detached."""
    if online_pred.shape != target_proj.shape:
        raise ShapeMismatch(f"{tuple(online_pred.shape)} vs {tuple(target_proj.shape)}")
    z = target_proj.detach()
    qn, zn = online_pred.norm(dim=-1), z.norm(dim=-1)
    if (qn < 1e-12).any() or (zn < 1e-12).any():
        raise ZeroVector("cannot normalise a zero vector")
    q_hat = online_pred / qn[..., None]
    z_hat = z / zn[..., None]
    return ((q_hat - z_hat) ** 2).sum(-1)


def byol_loss(online_pred: Tensor, target_proj: Tensor) -> Tensor:
    if online_pred.shape[0] < 1:
        raise ValueError("byol_loss needs at least one augmented position")
    return position_losses(online_pred, target_proj).mean()


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    """zeta <- tau * zeta + (1 - tau) * theta for every named parameter."""
    t_params = dict(target.named_parameters())
    o_params = dict(online.named_parameters())
    if t_params.keys() != o_params.keys():
        raise ShapeMismatch("online and target parameter names differ")
    for name, z in t_params.items():
        theta = o_params[name]
        if z.shape != theta.shape:
            raise ShapeMismatch(f"{name}: {tuple(z.shape)} vs {tuple(theta.shape)}")
        z.mul_(tau).add_(theta, alpha=1.0 - tau)


# ---------------------------------------------------------------- networks


class MLP(nn.Module):
    """One hidden layer with GELU; linear output."""

    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.fc1 = Linear(d_in, hidden)
        self.fc2 = Linear(hidden, d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Branch(nn.Module):
    def __init__(self, cfg: ModelConfig, hidden: int, out: int, with_predictor: bool):
        super().__init__()
        self.encoder = HiBEHRTEncoder(cfg)
        self.projector = MLP(cfg.hidden, hidden, out)
        if with_predictor:
            self.predictor = MLP(out, hidden, out)


class ByolState(nn.Module):
    """Online (encoder, projector, predictor) and target (encoder, projector) networks."""

    def __init__(self, cfg: ModelConfig, tau: float = 0.996, hidden: int = 150, out: int = 150):
        super().__init__()
        self.cfg, self.tau = cfg, tau
        self.projector_hidden, self.projection_size = hidden, out
        self.online = Branch(cfg, hidden, out, with_predictor=True)
        self.target = Branch(cfg, hidden, out, with_predictor=False)
        self.reset_target()

    @torch.no_grad()
    def reset_target(self) -> None:
        self.target.encoder.load_state_dict(self.online.encoder.state_dict())
        self.target.projector.load_state_dict(self.online.projector.state_dict())
        for p in self.target.parameters():
            p.requires_grad_(False)

    def online_params(self):
        return self.online.named_parameters()

    def ema(self) -> None:
        ema_update(self.target.encoder, self.online.encoder, self.tau)
        ema_update(self.target.projector, self.online.projector, self.tau)

    def online_projection(self, segments: SegmentTensor, rng=None) -> Tensor:
        states = self.online.encoder.aggregate(segments, rng)[..., 1:, :]
        return self.online.projector(states)

    def target_projection(self, batch: dict[str, Tensor]) -> Tensor:
        enc = self.target.encoder
        was = enc.training
        enc.eval()
        with torch.no_grad():
            states = enc(batch)[..., 1:, :]
            z = self.target.projector(states)
        enc.train(was)
        return z


@dataclass
class PretrainStepOutput:
    loss: float
    num_augmented_positions: int
    per_position_losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    loss_tensor: Tensor | None = None


def byol_forward(
    state: ByolState,
    batch: dict[str, Tensor],
    cfg: AugmentationConfig,
    rng: torch.Generator | None = None,
    target_batch: dict[str, Tensor] | None = None,
) -> PretrainStepOutput:
    """Loss for one batch: per-sequence sum over augmented positions, mean over sequences
    that have at least one augmented position."""
    enc = state.online.encoder
    w, wm = enc.windows(batch)
    segments = enc.extract_segments(w, wm, rng)
    augmented, selected = segment_augment(segments, cfg, rng)
    z = state.target_projection(target_batch if target_batch is not None else batch)
    k = int(selected.sum())
    if k == 0:
        zero = torch.zeros((), dtype=segments.values.dtype)
        return PretrainStepOutput(0.0, 0, np.zeros(0), zero)
    q = state.online.predictor(state.online_projection(augmented, rng))
    per_pos = position_losses(q[selected], z[selected])
    seq_index = selected.nonzero(as_tuple=True)[0]
    per_seq = torch.zeros(selected.shape[0], dtype=per_pos.dtype).index_add(0, seq_index, per_pos)
    has_aug = selected.any(-1)
    loss = per_seq[has_aug].mean()
    return PretrainStepOutput(loss.item(), k, per_pos.detach().double().numpy(), loss)


def pretrain_step(
    seqs: list[EncodedSequence],
    state: ByolState,
    optimizer,
    lr: float,
    cfg: AugmentationConfig,
    np_rng: np.random.Generator,
    rng: torch.Generator | None = None,
) -> PretrainStepOutput:
    aug = [ehr_augment(s, cfg, np_rng) for s in seqs]
    batch = to_tensors(stack_sequences(aug))
    target_batch = None if cfg.target_sees_augmented else to_tensors(stack_sequences(seqs))
    state.online.train()
    out = byol_forward(state, batch, cfg, rng, target_batch)
    optimizer.zero_grad()
    if out.num_augmented_positions:
        out.loss_tensor.backward()
        optimizer.step(lr)
    state.ema()
    return out


def transfer_weights(state: ByolState, cfg: ModelConfig | None = None, freeze: tuple[str, ...] = ()) -> HiBEHRT:
    """Fresh supervised model whose encoder copies the online encoder.

    ``freeze`` lists encoder parameter-name prefixes (e.g. ``"embeddings.token"``)
    that will not receive gradients.
    """
    cfg = cfg or state.cfg
    arch = ("vocab_size", "hidden", "heads", "intermediate", "extractor_layers", "aggregator_layers",
            "max_len", "window", "stride", "age_vocab", "position_vocab")
    diff = [k for k in arch if getattr(cfg, k) != getattr(state.cfg, k)]
    if diff:
        raise ConfigMismatch(f"pretrained and target configs differ in {diff}")
    model = HiBEHRT(cfg)
    model.encoder.load_state_dict(copy.deepcopy(state.online.encoder.state_dict()))
    for name, p in model.encoder.named_parameters():
        if any(name.startswith(f) for f in freeze):
            p.requires_grad_(False)
    return model
