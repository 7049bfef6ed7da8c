"""Training loops, sweeps and stratified evaluation."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import spearmanr
from torch import nn

from .byol import AugmentationConfig, ByolState, pretrain_step, transfer_weights
from .data import (
    EncodedSequence,
    Modality,
    PatientRecord,
    Vocabulary,
    encode_patient,
    record_tokens,
    stack_sequences,
)
from .errors import EmptySequence, NonFiniteValue
from .metrics import MetricsReport, evaluate_scores
from .model import ModelConfig, build_model, predict_proba, to_tensors
from .optim import Adam, EarlyStopping, ScheduleConfig, SGDMomentum, lr_at

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- datasets


@dataclass
class EncodedDataset:
    patient_ids: list[str]
    labels: np.ndarray
    arrays: dict[str, np.ndarray]
    lengths: np.ndarray  # encodable tokens before truncation
    baseline_ages: np.ndarray

    def __len__(self) -> int:
        return len(self.patient_ids)

    def subset(self, idx: Sequence[int]) -> "EncodedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return EncodedDataset(
            [self.patient_ids[i] for i in idx],
            self.labels[idx],
            {k: v[idx] for k, v in self.arrays.items()},
            self.lengths[idx],
            self.baseline_ages[idx],
        )

    def sequences(self) -> list[EncodedSequence]:
        a = self.arrays
        return [
            EncodedSequence(a["token_ids"][i], a["age_ids"][i], a["segment_ids"][i],
                            a["position_ids"][i], a["mask"][i])
            for i in range(len(self))
        ]


def encode_dataset(
    records: Iterable[PatientRecord],
    vocab: Vocabulary,
    max_len: int,
    modalities: Iterable[Modality] | None = None,
    skip_empty: bool = False,
) -> EncodedDataset:
    mods = None if modalities is None else frozenset(modalities)
    ids, labels, seqs, lengths, ages = [], [], [], [], []
    for rec in records:
        try:
            seq = encode_patient(rec, vocab, max_len, modalities=mods)
        except EmptySequence:
            if skip_empty:
                continue
            raise
        ids.append(rec.patient_id)
        labels.append(-1 if rec.label is None else rec.label)
        seqs.append(seq)
        lengths.append(len(record_tokens(rec, modalities=mods)))
        ages.append(rec.visits[-1].age_years)
    arrays = stack_sequences(seqs) if seqs else {}
    return EncodedDataset(ids, np.asarray(labels, dtype=np.int64), arrays,
                          np.asarray(lengths, dtype=np.int64), np.asarray(ages, dtype=np.int64))


# ---------------------------------------------------------------- supervised training


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 100
    peak_lrs: tuple[float, ...] = (5e-5, 1e-4, 5e-4)
    patience: int = 6
    warmup: float = 0.1
    hold: float = 0.4
    decay: float = 0.5
    eval_batch_size: int = 256


@dataclass
class TrainResult:
    model: nn.Module
    peak_lr: float
    best_epoch: int
    best_tune_loss: float
    history: list[dict] = field(default_factory=list)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


@torch.no_grad()
def mean_bce(model: nn.Module, ds: EncodedDataset, batch_size: int = 256) -> float:
    p = predict_proba(model, ds.arrays, batch_size)
    p = np.clip(p, 1e-12, 1 - 1e-12)
    y = ds.labels
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


def train_supervised(
    model: nn.Module,
    train: EncodedDataset,
    tune: EncodedDataset,
    cfg: TrainConfig,
    peak_lr: float,
    seed: int = 0,
    val: EncodedDataset | None = None,
) -> TrainResult:
    """Adam + three-stage schedule + early stopping on tuning-set BCE.

    The returned model carries the weights from the epoch with the lowest
    tuning loss.
    """
    np_rng = np.random.default_rng([seed, 1])
    gen = torch.Generator().manual_seed(seed)
    steps_per_epoch = max(1, math.ceil(len(train) / cfg.batch_size))
    sched = ScheduleConfig(peak_lr, cfg.epochs * steps_per_epoch, "three_stage", cfg.warmup, cfg.hold, cfg.decay)
    opt = Adam(model)
    stopper = EarlyStopping(cfg.patience)
    tensors = to_tensors(train.arrays)
    y = torch.as_tensor(train.labels, dtype=torch.get_default_dtype())
    best_state = copy.deepcopy(model.state_dict())
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        total = 0.0
        for idx in _batches(len(train), cfg.batch_size, np_rng):
            t = torch.as_tensor(idx)
            batch = {k: v[t] for k, v in tensors.items()}
            logits = model(batch, gen)
            loss = F.binary_cross_entropy_with_logits(logits, y[t].to(logits.dtype))
            if not torch.isfinite(loss):
                raise NonFiniteValue(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(step, sched))
            step += 1
            total += loss.item() * len(idx)
        tune_loss = mean_bce(model, tune, cfg.eval_batch_size)
        row = {"epoch": epoch, "step": step, "lr": lr_at(step, sched),
               "train_loss": total / len(train), "tune_loss": tune_loss}
        if val is not None:
            rep = evaluate_scores(predict_proba(model, val.arrays, cfg.eval_batch_size), val.labels)
            row.update(val_auroc=rep.auroc, val_auprc=rep.auprc)
        history.append(row)
        log.info("epoch %d %s", epoch, row)
        stop = stopper.update(tune_loss)
        if stopper.improved:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            break
    model.load_state_dict(best_state)
    return TrainResult(model, peak_lr, stopper.best_epoch, stopper.best, history)


def train_with_lr_sweep(
    make_model: Callable[[], nn.Module],
    train: EncodedDataset,
    tune: EncodedDataset,
    cfg: TrainConfig,
    seed: int = 0,
    val: EncodedDataset | None = None,
) -> TrainResult:
    """Train once per peak learning rate and keep the run with the lowest tuning loss."""
    best = None
    for lr in cfg.peak_lrs:
        torch.manual_seed(seed)
        res = train_supervised(make_model(), train, tune, cfg, lr, seed, val)
        if best is None or res.best_tune_loss < best.best_tune_loss:
            best = res
    return best


def model_factory(kind: str, cfg: ModelConfig, seed: int) -> Callable[[], nn.Module]:
    def make():
        torch.manual_seed(seed)
        return build_model(kind, cfg)

    return make


def evaluate(model: nn.Module, ds: EncodedDataset, stratum: str = "all", batch_size: int = 256) -> MetricsReport:
    return evaluate_scores(predict_proba(model, ds.arrays, batch_size), ds.labels, stratum)


# ---------------------------------------------------------------- sweeps


def fraction_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    k = max(1, int(round(fraction * n)))
    rng = np.random.default_rng([seed, int(round(fraction * 1e6))])
    return np.sort(rng.choice(n, size=k, replace=False))


def training_fraction_sweep(
    make_model: Callable[[int], nn.Module],
    train: EncodedDataset,
    tune: EncodedDataset,
    val: EncodedDataset,
    cfg: TrainConfig,
    fractions: Sequence[float] = (0.01, 0.05, 0.1, 0.2, 0.5, 1.0),
    seeds: Sequence[int] = (0,),
) -> list[dict]:
    """Mean validation AUROC/AUPRC per training fraction over ``seeds``.

    ``make_model(seed)`` builds the starting model (fresh or transferred).
    """
    rows = []
    for frac in fractions:
        reps = []
        for seed in seeds:
            sub = train.subset(fraction_subset(len(train), frac, seed))
            res = train_with_lr_sweep(lambda: make_model(seed), sub, tune, cfg, seed)
            reps.append(evaluate(res.model, val, batch_size=cfg.eval_batch_size))
        rows.append({
            "fraction": frac,
            "n_train": max(1, int(round(frac * len(train)))),
            "seeds": len(seeds),
            "auroc": float(np.nanmean([r.auroc for r in reps])),
            "auprc": float(np.nanmean([r.auprc for r in reps])),
        })
    return rows


def curve_spearman(rows: list[dict], metric: str = "auroc") -> float:
    return float(spearmanr([r["fraction"] for r in rows], [r[metric] for r in rows]).statistic)


# ---------------------------------------------------------------- stratified evaluation


@dataclass
class Stratum:
    name: str
    predicate: Callable[[PatientRecord, int], bool] = lambda rec, length: True
    modalities: frozenset[Modality] | None = None


def length_strata(threshold: int = 256) -> list[Stratum]:
    return [
        Stratum(f"0-{threshold}", lambda rec, n: n <= threshold),
        Stratum(f">{threshold}", lambda rec, n: n > threshold),
    ]


def age_strata(bands: Iterable[tuple[int, int]]) -> list[Stratum]:
    """Baseline age (age at the last visit) in [lo, hi)."""
    out = []
    for lo, hi in bands:
        out.append(Stratum(f"{lo}-{hi}", lambda rec, n, lo=lo, hi=hi: lo <= rec.visits[-1].age_years < hi))
    return out


def modality_strata(subsets: Iterable[Iterable[Modality]]) -> list[Stratum]:
    out = []
    for sub in subsets:
        sub = frozenset(sub)
        name = "+".join(m.value for m in Modality if m in sub)
        out.append(Stratum(name, modalities=sub))
    return out


def downsample_positives(labels: np.ndarray, target: float, rng: np.random.Generator) -> np.ndarray:
    """Indices keeping every negative and a random subset of positives at prevalence ``target``."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if not 0 < target < 1:
        raise ValueError("target prevalence must lie in (0, 1)")
    k = int(round(target * len(neg) / (1.0 - target)))
    k = min(max(k, 1), len(pos))
    chosen = rng.choice(pos, size=k, replace=False)
    return np.sort(np.concatenate([neg, chosen]))


def stratified_eval(
    model: nn.Module,
    records: Sequence[PatientRecord],
    vocab: Vocabulary,
    strata: Sequence[Stratum],
    max_len: int | None = None,
    match_prevalence: float | str | None = None,
    draws: int = 5,
    seed: int = 0,
    batch_size: int = 256,
) -> list[MetricsReport]:
    """One report per stratum (single-class strata are reported with an error, not raised).

    ``match_prevalence`` (a float, or ``"first"`` for the first stratum's
    prevalence) adds, per stratum, the mean over ``draws`` positive-downsampled
    evaluations.
    """
    max_len = max_len or getattr(model, "max_len")
    reports = []
    cache: dict = {}
    for st in strata:
        key = st.modalities
        if key not in cache:
            ds = encode_dataset(records, vocab, max_len, modalities=key, skip_empty=True)
            cache[key] = (ds, predict_proba(model, ds.arrays, batch_size) if len(ds) else np.zeros(0))
        ds, scores = cache[key]
        by_id = {r.patient_id: r for r in records}
        keep = np.array([st.predicate(by_id[pid], int(n)) for pid, n in zip(ds.patient_ids, ds.lengths)], dtype=bool)
        reports.append(evaluate_scores(scores[keep], ds.labels[keep], st.name))
        reports[-1].extra["scores"] = scores[keep]
        reports[-1].extra["labels"] = ds.labels[keep]

    if match_prevalence is not None:
        target = reports[0].positive_fraction if match_prevalence == "first" else float(match_prevalence)
        matched = []
        for rep in reports:
            s, y = rep.extra["scores"], rep.extra["labels"]
            rng = np.random.default_rng([seed, len(matched)])
            runs = []
            for _ in range(draws):
                if not (y == 1).any() or not (y == 0).any():
                    break
                idx = downsample_positives(y, target, rng)
                runs.append(evaluate_scores(s[idx], y[idx]))
            m = MetricsReport(f"{rep.stratum}@{target:.4g}", runs[0].n if runs else rep.n,
                              runs[0].positives if runs else rep.positives)
            if runs:
                m.auroc = float(np.mean([r.auroc for r in runs]))
                m.auprc = float(np.mean([r.auprc for r in runs]))
            else:
                m.error = "SingleClass: cannot downsample a single-class stratum"
            matched.append(m)
        reports.extend(matched)
    for rep in reports:
        rep.extra.pop("scores", None)
        rep.extra.pop("labels", None)
    return reports


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainConfig:
    batch_size: int = 256
    epochs: int = 1000
    warmup_epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    tau: float = 0.996
    projector_hidden: int = 150
    projection_size: int = 150


def pretrain(
    ds: EncodedDataset,
    model_cfg: ModelConfig,
    cfg: PretrainConfig,
    aug: AugmentationConfig,
    seed: int = 0,
    state: ByolState | None = None,
) -> tuple[ByolState, list[dict]]:
    """SGD-momentum BYOL pretraining with warmup + cosine decay; returns the state and loss curve."""
    torch.manual_seed(seed)
    state = state or ByolState(model_cfg, cfg.tau, cfg.projector_hidden, cfg.projection_size)
    opt = SGDMomentum(state.online_params(), cfg.momentum)
    steps_per_epoch = max(1, math.ceil(len(ds) / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    sched = ScheduleConfig(cfg.lr, total, "warmup_cosine",
                           warmup_steps=min(total, cfg.warmup_epochs * steps_per_epoch))
    np_rng = np.random.default_rng([seed, 2])
    gen = torch.Generator().manual_seed(seed)
    seqs = ds.sequences()
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(len(seqs), cfg.batch_size, np_rng):
            out = pretrain_step([seqs[i] for i in idx], state, opt, lr_at(step, sched), aug, np_rng, gen)
            if not math.isfinite(out.loss):
                raise NonFiniteValue(f"non-finite pretraining loss at epoch {epoch}")
            losses.append(out.loss)
            step += 1
        curve.append({"epoch": epoch, "step": step, "lr": lr_at(step, sched), "loss": float(np.mean(losses))})
        log.info("pretrain epoch %d loss %.4f", epoch, curve[-1]["loss"])
    return state, curve


def finetune(
    state: ByolState,
    train: EncodedDataset,
    tune: EncodedDataset,
    cfg: TrainConfig,
    seed: int = 0,
    model_cfg: ModelConfig | None = None,
    freeze: tuple[str, ...] = (),
) -> TrainResult:
    def make():
        torch.manual_seed(seed)
        return transfer_weights(state, model_cfg, freeze)

    return train_with_lr_sweep(make, train, tune, cfg, seed)
