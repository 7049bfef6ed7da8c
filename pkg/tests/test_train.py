import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from conftest import random_records, toy_config
from oracles import auprc_enumerate, auroc_pairs
from hibehrt.data import Modality, PatientRecord, RawEvent, Visit, build_vocabulary
from hibehrt.errors import ConfigInvalid, NoPositives, NonFiniteGradient, ShapeMismatch, SingleClass, StepOutOfRange
from hibehrt.metrics import auprc, auroc, evaluate_scores
from hibehrt.model import build_model
from hibehrt.optim import Adam, EarlyStopping, SGDMomentum, ScheduleConfig, lr_at
from hibehrt.training import (
    Stratum,
    TrainConfig,
    age_strata,
    curve_spearman,
    downsample_positives,
    encode_dataset,
    evaluate,
    fraction_subset,
    length_strata,
    model_factory,
    modality_strata,
    stratified_eval,
    train_supervised,
    training_fraction_sweep,
)

# ---------------------------------------------------------------- schedule


def test_lr_examples():
    cfg = ScheduleConfig(peak_lr=2.0, total_steps=1000)
    assert lr_at(100, cfg) == 2.0
    assert lr_at(1000, cfg) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(750, cfg) == pytest.approx(1.0, abs=1e-12)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(50, cfg) == pytest.approx(1.0)
    assert lr_at(300, cfg) == 2.0


@pytest.mark.parametrize("T", [1, 7, 10, 1000, 12345])
def test_lr_continuous_and_nonnegative(T):
    cfg = ScheduleConfig(peak_lr=1e-3, total_steps=T)
    for b in (0.1 * T, 0.5 * T):
        left, right = lr_at(b - 1e-13 * T, cfg), lr_at(b, cfg)
        assert abs(left - right) < 1e-12
    xs = np.linspace(0, T, 501)
    vals = [lr_at(x, cfg) for x in xs]
    assert min(vals) >= 0
    # no jumps larger than the steepest slope allows
    assert max(abs(a - b) for a, b in zip(vals, vals[1:])) <= 1e-3 * 10 / 500 + 1e-12


def test_lr_out_of_range():
    cfg = ScheduleConfig(peak_lr=1.0, total_steps=10)
    for bad in (-1, 10.5):
        with pytest.raises(StepOutOfRange):
            lr_at(bad, cfg)


def test_warmup_cosine():
    cfg = ScheduleConfig(peak_lr=1.0, total_steps=110, kind="warmup_cosine", warmup_steps=10)
    assert lr_at(5, cfg) == 0.5 and lr_at(10, cfg) == 1.0
    assert lr_at(60, cfg) == pytest.approx(0.5) and lr_at(110, cfg) == pytest.approx(0.0, abs=1e-15)


def test_schedule_config_checks():
    with pytest.raises(ConfigInvalid):
        ScheduleConfig(1.0, 10, warmup=0.2, hold=0.4, decay=0.5)
    with pytest.raises(ConfigInvalid):
        ScheduleConfig(1.0, 0)
    with pytest.raises(ConfigInvalid):
        ScheduleConfig(1.0, 10, kind="linear")


# ---------------------------------------------------------------- optimizers


def _param(values):
    return torch.nn.Parameter(torch.tensor(values, dtype=torch.float64))


def test_adam_lr_zero_keeps_params_updates_moments():
    w = _param([1.0, -2.0])
    opt = Adam([("w", w)])
    w.grad = torch.tensor([0.5, 0.5], dtype=torch.float64)
    opt.step(0.0)
    assert torch.equal(w.detach(), torch.tensor([1.0, -2.0], dtype=torch.float64))
    assert torch.allclose(opt.m["w"], torch.full((2,), 0.05, dtype=torch.float64))
    assert torch.allclose(opt.v["w"], torch.full((2,), 0.00025, dtype=torch.float64))
    assert opt.steps == 1


@pytest.mark.parametrize("c", [3.0, -0.25, 1e-3])
def test_adam_first_step_closed_form(c):
    w = _param([0.0])
    opt = Adam([("w", w)])
    w.grad = torch.tensor([c], dtype=torch.float64)
    opt.step(0.1)
    # m_hat = c, v_hat = c^2 after bias correction
    assert w.item() == pytest.approx(-0.1 * c / (abs(c) + 1e-8), rel=1e-12)
    assert w.item() == pytest.approx(-0.1 * math.copysign(1, c), rel=1e-4)


def test_adam_matches_reference_over_steps():
    torch.manual_seed(0)
    w = _param(torch.randn(5).tolist())
    ref = torch.nn.Parameter(w.detach().clone())
    ours, theirs = Adam([("w", w)]), torch.optim.Adam([ref], lr=0.01)
    for _ in range(20):
        g = torch.randn(5, dtype=torch.float64)
        w.grad, ref.grad = g.clone(), g.clone()
        ours.step(0.01)
        theirs.step()
    assert torch.allclose(w, ref, atol=1e-12)


def test_sgd_example():
    w = _param([0.0, 0.0])
    opt = SGDMomentum([("w", w)], momentum=0.0)
    w.grad = torch.tensor([1.0, -2.0], dtype=torch.float64)
    opt.step(1.0)
    assert w.tolist() == [-1.0, 2.0]


def test_sgd_momentum_accumulates():
    w = _param([0.0])
    opt = SGDMomentum([("w", w)], momentum=0.9)
    for _ in range(2):
        w.grad = torch.tensor([1.0], dtype=torch.float64)
        opt.step(1.0)
    assert w.item() == pytest.approx(-(1 + 1.9))


def test_optimizer_errors():
    w = _param([0.0, 0.0])
    opt = Adam([("w", w)])
    w.grad = torch.tensor([float("inf"), 0.0], dtype=torch.float64)
    with pytest.raises(NonFiniteGradient):
        opt.step(0.1)

    class Stale:  # torch refuses mis-shaped .grad on a real Parameter
        shape = (2,)
        grad = torch.zeros(3)

    opt.params["w"] = Stale()
    with pytest.raises(ShapeMismatch):
        opt.step(0.1)
    with pytest.raises(ValueError):
        SGDMomentum([("w", w)]).step(-1.0)


def test_optimizer_skips_frozen():
    lin = torch.nn.Linear(2, 2)
    lin.bias.requires_grad_(False)
    assert list(Adam(lin).params) == ["weight"]


# ---------------------------------------------------------------- early stopping


def _stop_epoch(trace, patience=6):
    es = EarlyStopping(patience)
    for e, loss in enumerate(trace):
        if es.update(loss):
            return e, es.best_epoch
    return None, es.best_epoch


def test_early_stopping_scripted_traces():
    assert _stop_epoch([1.0, 0.9, 0.9, 0.95, 1, 1, 1, 1, 0.1]) == (7, 1)
    # a new strict minimum resets the counter
    assert _stop_epoch([1.0, 1, 1, 1, 1, 0.5, 1, 1, 1, 1, 1, 1, 0.1]) == (11, 5)
    assert _stop_epoch([5, 4, 3, 2, 1]) == (None, 4)
    assert _stop_epoch([1.0] * 7) == (6, 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=30))
def test_early_stopping_matches_definition(trace):
    stop, _ = _stop_epoch(trace)
    expected = None
    for e in range(len(trace)):
        if e >= 6 and all(trace[k] >= min(trace[: e - 5]) for k in range(e - 5, e + 1)):
            expected = e
            break
    assert stop == expected


# ---------------------------------------------------------------- metrics


def test_metric_worked_examples():
    s, y = [0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]
    assert auroc(s, y) == pytest.approx(0.75)
    assert auprc(s, y) == pytest.approx((1 + 2 / 3) / 2)
    assert auroc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auroc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert auprc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auprc([0.5, 0.4, 0.3, 0.2, 0.1], [0, 0, 0, 0, 1]) == pytest.approx(1 / 5)


def test_metric_errors():
    with pytest.raises(SingleClass):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(NoPositives):
        auprc([0.1, 0.2], [0, 0])
    rep = evaluate_scores([0.1, 0.2], [0, 0])
    assert rep.error and math.isnan(rep.auroc)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 12).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 4), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n))))
def test_metrics_match_oracles(data):
    scores, labels = data
    scores = [s / 4 for s in scores]  # coarse grid so ties are common
    if 0 < sum(labels) < len(labels):
        assert auroc(scores, labels) == pytest.approx(auroc_pairs(scores, labels), abs=1e-12)
    if sum(labels):
        assert auprc(scores, labels) == pytest.approx(auprc_enumerate(scores, labels), abs=1e-12)


def test_auroc_equals_trapezoid():
    rng = np.random.default_rng(0)
    s = rng.random(200).round(2)
    y = (rng.random(200) < 0.3).astype(int)
    thresholds = np.r_[np.inf, np.unique(s)[::-1]]
    tpr = [(s[y == 1] >= t).mean() for t in thresholds]
    fpr = [(s[y == 0] >= t).mean() for t in thresholds]
    assert auroc(s, y) == pytest.approx(trapezoid(tpr, fpr), abs=1e-12)


# ---------------------------------------------------------------- stratified evaluation


@pytest.fixture(scope="module")
def strat_setup():
    recs = random_records(40, seed=9, max_visits=12)
    vocab = build_vocabulary(recs)
    torch.manual_seed(0)
    model = build_model("hibehrt", toy_config(len(vocab))).eval()
    return recs, vocab, model


def test_trivial_stratum_equals_unstratified(strat_setup):
    recs, vocab, model = strat_setup
    [rep] = stratified_eval(model, recs, vocab, [Stratum("all")], max_len=40)
    ref = evaluate(model, encode_dataset(recs, vocab, 40))
    assert (rep.n, rep.positives, rep.auroc, rep.auprc) == (ref.n, ref.positives, ref.auroc, ref.auprc)


def test_disjoint_strata_partition(strat_setup):
    recs, vocab, model = strat_setup
    for strata in (length_strata(20), age_strata([(0, 60), (60, 200)])):
        reps = stratified_eval(model, recs, vocab, strata, max_len=40)
        assert sum(r.n for r in reps) == len(recs)
        assert sum(r.positives for r in reps) == sum(r.label for r in recs)


def test_single_class_stratum_reported(strat_setup):
    recs, vocab, model = strat_setup
    reps = stratified_eval(model, recs, vocab, [Stratum("none", lambda r, n: r.label == 1)], max_len=40)
    assert reps[0].error.startswith("SingleClass")


def test_modality_stratum_drops_events():
    recs = [PatientRecord(f"p{i}", i % 2, [Visit(50, 0, [RawEvent(Modality.DIAG, code="a"),
                                                         RawEvent(Modality.MED, code=f"m{i}")])])
            for i in range(6)]
    vocab = build_vocabulary(recs)
    model = build_model("hibehrt", toy_config(len(vocab))).eval()
    reps = stratified_eval(model, recs, vocab, modality_strata([[Modality.DIAG], [Modality.DIAG, Modality.MED]]),
                           max_len=40)
    assert [r.stratum for r in reps] == ["DIAG", "DIAG+MED"]
    assert reps[0].auroc == 0.5  # diagnosis-only sequences are identical
    assert reps[1].n == 6


@pytest.mark.parametrize("n_neg,n_pos", [(1000, 300), (977, 50), (5000, 1000)])
def test_downsample_prevalence(n_neg, n_pos):
    labels = np.r_[np.zeros(n_neg, int), np.ones(n_pos, int)]
    idx = downsample_positives(labels, 0.023, np.random.default_rng(0))
    kept_pos = int(labels[idx].sum())
    assert (labels[idx] == 0).sum() == n_neg
    # the positive count that best realises the target, within one case
    assert abs(kept_pos - 0.023 * n_neg / (1 - 0.023)) <= 1
    assert len(set(idx.tolist())) == len(idx)


def test_match_prevalence_rows(strat_setup):
    recs, vocab, model = strat_setup
    reps = stratified_eval(model, recs, vocab, length_strata(20), max_len=40, match_prevalence="first", draws=3)
    assert len(reps) == 4 and reps[2].stratum.startswith("0-20@")
    target = reps[0].positive_fraction
    for raw, matched in zip(reps[:2], reps[2:]):
        neg = raw.n - raw.positives
        # positives can only be removed, so a stratum short of positives keeps all of them
        assert matched.positives == min(raw.positives, max(1, round(target * neg / (1 - target))))
        assert matched.n - matched.positives == neg


# ---------------------------------------------------------------- training loops


@pytest.fixture(scope="module")
def tiny_data():
    recs = random_records(24, seed=4)
    vocab = build_vocabulary(recs)
    ds = encode_dataset(recs, vocab, 40)
    return vocab, ds.subset(range(16)), ds.subset(range(16, 20)), ds.subset(range(20, 24))


def test_train_supervised_history_and_restore(tiny_data):
    vocab, train, tune, val = tiny_data
    torch.manual_seed(0)
    model = build_model("hibehrt", toy_config(len(vocab)))
    cfg = TrainConfig(batch_size=8, epochs=4, patience=6)
    res = train_supervised(model, train, tune, cfg, 1e-3, seed=0, val=val)
    assert len(res.history) == 4
    assert {"epoch", "train_loss", "tune_loss", "val_auroc", "val_auprc"} <= set(res.history[0])
    best = min(range(4), key=lambda e: res.history[e]["tune_loss"])
    assert res.best_epoch == best
    from hibehrt.training import mean_bce

    assert mean_bce(res.model, tune) == pytest.approx(res.best_tune_loss, rel=1e-6)


def test_fraction_subset():
    assert len(fraction_subset(200, 1.0, 0)) == 200
    assert len(fraction_subset(200, 0.05, 0)) == 10
    assert len(fraction_subset(50, 0.01, 0)) == 1
    assert np.array_equal(fraction_subset(200, 0.2, 3), fraction_subset(200, 0.2, 3))


def test_sweep_deterministic(tiny_data):
    vocab, train, tune, val = tiny_data
    cfg = TrainConfig(batch_size=8, epochs=2, peak_lrs=(1e-3,))
    mc = toy_config(len(vocab))

    def make(seed):
        return model_factory("hibehrt", mc, seed)()

    a = training_fraction_sweep(make, train, tune, val, cfg, fractions=(0.5, 1.0), seeds=(0, 1))
    b = training_fraction_sweep(make, train, tune, val, cfg, fractions=(0.5, 1.0), seeds=(0, 1))
    assert a == b
    assert [r["n_train"] for r in a] == [8, 16]


def test_curve_spearman():
    rows = [{"fraction": f, "auroc": a} for f, a in [(0.01, 0.5), (0.1, 0.6), (1.0, 0.7)]]
    assert curve_spearman(rows) == pytest.approx(1.0)
