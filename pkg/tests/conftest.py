import numpy as np
import pytest
import torch

from hibehrt.data import Modality, PatientRecord, RawEvent, Visit, build_vocabulary, encode_patient, stack_sequences
from hibehrt.model import ModelConfig

torch.set_num_threads(1)

ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d} {title}: {detail}")


def make_record(pid="p", label=1, visit_sizes=(3, 2), age0=40, codes=None):
    codes = iter(codes or [f"C{i}" for i in range(sum(visit_sizes))])
    visits = []
    for i, size in enumerate(visit_sizes):
        events = [RawEvent(Modality.DIAG, code=next(codes)) for _ in range(size)]
        visits.append(Visit(age0 + i // 4, 30 * i, events))
    return PatientRecord(pid, label, visits)


def random_records(n, seed=0, max_visits=30, n_codes=20):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        nv = int(rng.integers(1, max_visits))
        sizes = rng.integers(1, 6, size=nv).tolist()
        codes = [f"C{int(c)}" for c in rng.integers(0, n_codes, size=sum(sizes))]
        out.append(make_record(f"r{i}", int(rng.integers(0, 2)), sizes, int(rng.integers(20, 80)), codes))
    return out


def toy_config(vocab_size, **kw):
    base = dict(vocab_size=vocab_size, hidden=8, heads=2, intermediate=12, extractor_layers=1,
                aggregator_layers=1, flat_layers=1, max_len=40, flat_max_len=16, window=10, stride=6,
                dropout=0.0, attn_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def records():
    return random_records(12, seed=3)


@pytest.fixture
def vocab(records):
    return build_vocabulary(records)


@pytest.fixture
def toy_batch(records, vocab):
    return stack_sequences([encode_patient(r, vocab, 40) for r in records[:4]])
