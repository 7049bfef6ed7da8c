"""Coded-event data model, value binning, vocabulary and sequence encoding."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadRatios,
    EmptyCorpus,
    EmptySequence,
    ParseError,
    UnknownModality,
    ValueOutOfRange,
)

PAD, UNK, MASK, CLS = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[MASK]", "[CLS]")
MAX_AGE = 120


class Modality(str, enum.Enum):
    DIAG = "DIAG"
    MED = "MED"
    PROC = "PROC"
    TEST = "TEST"
    SBP = "SBP"
    DBP = "DBP"
    BMI = "BMI"
    SMOKE = "SMOKE"
    ALCOHOL = "ALCOHOL"

    @property
    def has_value(self) -> bool:
        return self in VALUE_MODALITIES


VALUE_MODALITIES = frozenset({Modality.SBP, Modality.DBP, Modality.BMI})
STATUS_CODES = ("current", "ex", "non")


def parse_modality(name: str) -> Modality:
    try:
        return Modality(name)
    except ValueError:
        raise UnknownModality(f"unknown modality {name!r}") from None


@dataclass(frozen=True)
class RawEvent:
    modality: Modality
    code: str | None = None
    value: float | None = None

    def __post_init__(self):
        if not isinstance(self.modality, Modality):
            object.__setattr__(self, "modality", parse_modality(self.modality))
        if self.modality.has_value:
            if self.value is None or self.code is not None:
                raise ValueError(f"{self.modality.value} events carry a value and no code")
        elif self.code is None or self.value is not None:
            raise ValueError(f"{self.modality.value} events carry a code and no value")


@dataclass
class Visit:
    age_years: int
    days_since_first: int
    events: list[RawEvent] = field(default_factory=list)


@dataclass
class PatientRecord:
    patient_id: str
    label: int | None
    visits: list[Visit]

    def __post_init__(self):
        if not self.visits:
            raise ValueError(f"patient {self.patient_id}: no visits")
        days = [v.days_since_first for v in self.visits]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise ValueError(f"patient {self.patient_id}: visits not strictly ordered")

    @property
    def n_events(self) -> int:
        return sum(len(v.events) for v in self.visits)


# ---------------------------------------------------------------- binning


@dataclass(frozen=True)
class BinningSpec:
    min: float
    max: float
    step: float

    def __post_init__(self):
        if self.step <= 0 or self.max <= self.min:
            raise ValueError("binning needs step > 0 and max > min")
        n = (self.max - self.min) / self.step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("(max - min) must be an integral multiple of step")

    @property
    def n_bins(self) -> int:
        return int(round((self.max - self.min) / self.step))

    def edges(self, k: int) -> tuple[float, float]:
        return self.min + k * self.step, self.min + (k + 1) * self.step


DEFAULT_BINS = {
    Modality.SBP: BinningSpec(80.0, 200.0, 5.0),
    Modality.DBP: BinningSpec(50.0, 140.0, 5.0),
    Modality.BMI: BinningSpec(16.0, 50.0, 1.0),
}


def _num(x: float) -> str:
    return f"{x:g}"


def bin_index(value: float, spec: BinningSpec) -> int:
    if not (spec.min <= value <= spec.max):
        raise ValueOutOfRange(f"{value} outside [{spec.min}, {spec.max}]")
    k = int(math.floor((value - spec.min) / spec.step))
    return min(k, spec.n_bins - 1)


def bin_value(modality: Modality | str, value: float, spec: BinningSpec | None = None) -> str:
    """Token for the half-open bin containing ``value`` (``max`` joins the last bin)."""
    modality = parse_modality(modality) if isinstance(modality, str) else modality
    if spec is None:
        if modality not in DEFAULT_BINS:
            raise UnknownModality(f"{modality.value} is not value-bearing")
        spec = DEFAULT_BINS[modality]
    lo, hi = spec.edges(bin_index(value, spec))
    return f"{modality.value}_{_num(lo)}_{_num(hi)}"


def event_token(event: RawEvent, bins: dict[Modality, BinningSpec] | None = None) -> str:
    """Token text for one event; raises ValueOutOfRange for unbinnable values."""
    if event.modality.has_value:
        spec = (bins or DEFAULT_BINS)[event.modality]
        return bin_value(event.modality, event.value, spec)
    return f"{event.modality.value}_{event.code}"


def record_tokens(
    record: PatientRecord,
    bins: dict[Modality, BinningSpec] | None = None,
    modalities: Iterable[Modality] | None = None,
) -> list[tuple[str, int, int]]:
    """Flatten a record into ``(token, age, visit_index)`` triples.

    Out-of-range values are dropped. Visits left without tokens do not
    consume a visit index.
    """
    keep = None if modalities is None else frozenset(modalities)
    out = []
    vi = 0
    for visit in record.visits:
        age = min(max(int(visit.age_years), 0), MAX_AGE)
        added = False
        for ev in visit.events:
            if keep is not None and ev.modality not in keep:
                continue
            try:
                tok = event_token(ev, bins)
            except ValueOutOfRange:
                continue
            out.append((tok, age, vi))
            added = True
        if added:
            vi += 1
    return out


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(SPECIAL_TOKENS) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @staticmethod
    def modality_of(token: str) -> str:
        if token in SPECIAL_TOKENS:
            return "SPECIAL"
        return token.split("_", 1)[0]

    def save(self, path: str | Path) -> None:
        lines = [f"{i}\t{t}\t{self.modality_of(t)}\n" for i, t in enumerate(self.itos)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0].isdigit() or int(parts[0]) != n - 1:
                raise ParseError("expected 'id<TAB>token<TAB>modality' with ascending ids", n)
            tokens.append(parts[1])
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ParseError("reserved tokens missing from vocabulary head", 1)
        return cls(tokens[4:])


def build_vocabulary(
    corpus: Iterable[PatientRecord], bins: dict[Modality, BinningSpec] | None = None
) -> Vocabulary:
    tokens: set[str] = set()
    seen = False
    for rec in corpus:
        seen = True
        tokens.update(tok for tok, _, _ in record_tokens(rec, bins))
    if not seen:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    return Vocabulary(sorted(tokens))


# ---------------------------------------------------------------- encoding


@dataclass
class EncodedSequence:
    token_ids: np.ndarray
    age_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def pack_sequence(
    tokens: Sequence[int], ages: Sequence[int], visits: Sequence[int], max_len: int
) -> EncodedSequence:
    """Keep the latest ``max_len`` entries, renumber visits from 0 and pad."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if len(tokens) == 0:
        raise EmptySequence("no tokens to encode")
    tokens, ages, visits = tokens[-max_len:], ages[-max_len:], visits[-max_len:]
    n = len(tokens)
    tok = np.full(max_len, PAD, dtype=np.int64)
    age = np.empty(max_len, dtype=np.int64)
    pos = np.empty(max_len, dtype=np.int64)
    tok[:n] = tokens
    age[:n] = ages
    visits = np.asarray(visits, dtype=np.int64)
    # renumber so retained visits are 0,1,2,... with no gaps
    pos[:n] = np.concatenate([[0], np.cumsum(np.diff(visits) != 0)])
    age[n:] = age[n - 1]
    pos[n:] = pos[n - 1]
    mask = np.zeros(max_len, dtype=bool)
    mask[:n] = True
    return EncodedSequence(tok, age, pos % 2, pos, mask)


def encode_patient(
    record: PatientRecord,
    vocab: Vocabulary,
    max_len: int,
    bins: dict[Modality, BinningSpec] | None = None,
    modalities: Iterable[Modality] | None = None,
) -> EncodedSequence:
    triples = record_tokens(record, bins, modalities)
    if not triples:
        raise EmptySequence(f"patient {record.patient_id} has no encodable events")
    toks, ages, visits = zip(*triples)
    return pack_sequence([vocab.lookup(t) for t in toks], ages, visits, max_len)


def stack_sequences(seqs: Sequence[EncodedSequence]) -> dict[str, np.ndarray]:
    return {
        name: np.stack([getattr(s, name) for s in seqs])
        for name in ("token_ids", "age_ids", "segment_ids", "position_ids", "mask")
    }


# ---------------------------------------------------------------- files


def record_to_dict(rec: PatientRecord) -> dict:
    visits = []
    for v in rec.visits:
        events = []
        for e in v.events:
            d = {"modality": e.modality.value}
            if e.modality.has_value:
                d["value"] = e.value
            else:
                d["code"] = e.code
            events.append(d)
        visits.append(
            {"age_years": v.age_years, "days_since_first": v.days_since_first, "events": events}
        )
    return {"patient_id": rec.patient_id, "label": rec.label, "visits": visits}


def dumps_record(rec: PatientRecord) -> str:
    return json.dumps(record_to_dict(rec), separators=(",", ":"), ensure_ascii=False)


def record_from_dict(d: dict) -> PatientRecord:
    if set(d) != {"patient_id", "label", "visits"}:
        raise ValueError(f"expected fields patient_id, label, visits; got {sorted(d)}")
    label = d["label"]
    if label not in (0, 1, None) or isinstance(label, bool):
        raise ValueError(f"label must be 0, 1 or null, got {label!r}")
    visits = []
    for v in d["visits"]:
        events = []
        for e in v["events"]:
            mod = parse_modality(e["modality"])
            value = e.get("value")
            events.append(RawEvent(mod, e.get("code"), None if value is None else float(value)))
        age, days = v["age_years"], v["days_since_first"]
        if not isinstance(age, int) or not isinstance(days, int) or days < 0:
            raise ValueError("age_years and days_since_first must be non-negative integers")
        visits.append(Visit(age, days, events))
    return PatientRecord(str(d["patient_id"]), label, visits)


def load_dataset(path: str | Path) -> list[PatientRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(record_from_dict(json.loads(line)))
            except UnknownModality as exc:
                raise ParseError(str(exc), n) from exc
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(str(exc) or type(exc).__name__, n) from exc
    return records


def save_dataset(records: Iterable[PatientRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")


def _split_key(patient_id: str, seed: int) -> bytes:
    return hashlib.sha256(f"{seed}:{patient_id}".encode()).digest()


def split_dataset(
    records: Sequence[PatientRecord],
    ratios: tuple[float, ...] = (0.6, 0.1, 0.3),
    seed: int = 0,
) -> tuple[list[PatientRecord], ...]:
    """Partition by a seeded hash of each patient id.

    Sizes use largest-remainder rounding so that, e.g., 10 patients split
    (0.6, 0.1, 0.3) give exactly (6, 1, 3).
    """
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be non-negative and sum to 1, got {ratios}")
    n = len(records)
    raw = [r * n for r in ratios]
    sizes = [int(math.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    ranked = sorted(records, key=lambda r: _split_key(r.patient_id, seed))
    parts, start = [], 0
    for s in sizes:
        part = ranked[start : start + s]
        # keep file order inside each part
        ids = {id(r) for r in part}
        parts.append([r for r in records if id(r) in ids])
        start += s
    return tuple(parts)
