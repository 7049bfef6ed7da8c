import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_check
from hibehrt import nn as hn
from hibehrt.errors import AllMasked, IdOutOfRange, NonFiniteValue, NonScalarLoss, ShapeMismatch


def test_softmax_uniform():
    out = hn.softmax(torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(out, torch.full((3,), 1 / 3, dtype=torch.float64))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalised(xs, c):
    x = torch.tensor(xs, dtype=torch.float64)
    a, b = hn.softmax(x), hn.softmax(x + c)
    assert torch.allclose(a, b, atol=1e-12)
    assert abs(a.sum().item() - 1) < 1e-6


def test_gelu_values():
    assert hn.gelu(torch.tensor(0.0)).item() == 0.0
    phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert abs(hn.gelu(torch.tensor(1.0, dtype=torch.float64)).item() - phi1) < 1e-12
    assert abs(hn.gelu(torch.tensor(1.0, dtype=torch.float64)).item() - 0.841345) < 1e-5


def test_gelu_matches_erf_formula():
    x = torch.linspace(-5, 5, 101, dtype=torch.float64)
    ref = torch.tensor([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x.tolist()], dtype=torch.float64)
    assert torch.allclose(hn.gelu(x), ref, atol=1e-14)


def test_layer_norm_moments_and_formula():
    x = torch.randn(7, 16, dtype=torch.float64) * 3 + 2
    out = hn.layer_norm(x, torch.ones(16, dtype=torch.float64), torch.zeros(16, dtype=torch.float64))
    assert out.mean(-1).abs().max() < 1e-6
    assert (out.var(-1, unbiased=False) - 1).abs().max() < 1e-5
    g, b = torch.randn(16, dtype=torch.float64), torch.randn(16, dtype=torch.float64)
    mu = x.mean(-1, keepdim=True)
    ref = (x - mu) / torch.sqrt(((x - mu) ** 2).mean(-1, keepdim=True) + hn.LN_EPS) * g + b
    assert torch.allclose(hn.layer_norm(x, g, b), ref, atol=1e-12)


def test_layer_norm_shape_check():
    with pytest.raises(ShapeMismatch):
        hn.layer_norm(torch.zeros(2, 4), torch.ones(3), torch.zeros(3))


def test_dropout_identity_cases():
    x = torch.randn(5, 5)
    assert hn.dropout(x, 0.0, None, True) is x
    assert hn.dropout(x, 0.5, None, False) is x
    with pytest.raises(ValueError):
        hn.dropout(x, 1.0, None, True)


def test_dropout_survivor_fraction_and_scaling():
    rate, n = 0.3, 100_000
    g = torch.Generator().manual_seed(0)
    out = hn.dropout(torch.ones(n, dtype=torch.float64), rate, g, True)
    kept = (out != 0).sum().item()
    sigma = math.sqrt(n * rate * (1 - rate))
    assert abs(kept - n * (1 - rate)) < 3 * sigma
    assert torch.allclose(out[out != 0], torch.full((kept,), 1 / (1 - rate), dtype=torch.float64))


def test_dropout_reproducible_from_generator():
    x = torch.ones(1000)
    a = hn.dropout(x, 0.5, torch.Generator().manual_seed(4), True)
    b = hn.dropout(x, 0.5, torch.Generator().manual_seed(4), True)
    assert torch.equal(a, b)


def test_embedding_lookup():
    table = torch.arange(12.0).view(4, 3)
    assert torch.equal(hn.embedding_lookup(table, torch.tensor([2, 0])), table[[2, 0]])
    with pytest.raises(IdOutOfRange):
        hn.embedding_lookup(table, torch.tensor([4]))
    with pytest.raises(IdOutOfRange):
        hn.embedding_lookup(table, torch.tensor([-1]))


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        hn.matmul(torch.zeros(2, 3), torch.zeros(4, 2))
    with pytest.raises(ShapeMismatch):
        hn.add(torch.zeros(2, 3), torch.zeros(4))
    with pytest.raises(NonFiniteValue):
        hn.check_finite(torch.tensor([1.0, float("nan")]))


def test_trunc_normal_init():
    t = hn.trunc_normal_(torch.empty(100_000))
    assert t.abs().max() <= 2 * hn.INIT_STD
    assert abs(t.std().item() - 0.02 * 0.88) < 1e-3  # std of N(0,1) truncated at +-2 is ~0.88


# ---------------------------------------------------------------- attention


def _attn(d=8, heads=2):
    torch.manual_seed(0)
    return hn.MultiHeadAttention(d, heads).double().eval()


def test_attention_single_token_is_value_projection():
    a = _attn()
    x = torch.randn(1, 8, dtype=torch.float64)
    out = a(x, torch.tensor([True]))
    assert torch.allclose(out, a.wo(a.wv(x)), atol=1e-12)


def test_attention_masked_content_ignored():
    a = _attn()
    x = torch.randn(6, 8, dtype=torch.float64)
    mask = torch.tensor([True, True, False, True, False, True])
    y = x.clone()
    y[~mask] = torch.randn(2, 8, dtype=torch.float64) * 100
    assert torch.equal(a(x, mask)[mask], a(y, mask)[mask])


def test_attention_weights_normalised():
    a = _attn()
    x = torch.randn(3, 7, 8, dtype=torch.float64)
    mask = torch.rand(3, 7) > 0.3
    mask[:, 0] = True
    _, w = a(x, mask, return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)
    assert (w.masked_select(~mask[:, None, None, :].expand_as(w)) == 0).all()


def test_attention_all_masked_raises():
    with pytest.raises(AllMasked):
        _attn()(torch.randn(3, 8, dtype=torch.float64), torch.zeros(3, dtype=torch.bool))


def test_attention_query_index_matches_full():
    a = _attn()
    x = torch.randn(4, 9, 8, dtype=torch.float64)
    mask = torch.ones(4, 9, dtype=torch.bool)
    idx = torch.tensor([0, 3, 8, 1])
    full = a(x, mask)
    part = a(x, mask, query_index=idx)
    assert torch.allclose(part[:, 0], full[torch.arange(4), idx], atol=1e-12)


# ---------------------------------------------------------------- encoder layer


def test_layer_zero_output_projections_reduce_to_norms():
    torch.manual_seed(1)
    layer = hn.TransformerEncoderLayer(8, 2, 16, 0.0, 0.0).double()
    with torch.no_grad():
        for lin in (layer.attn.wo, layer.ff_out):
            lin.weight.zero_()
            lin.bias.zero_()
    x = torch.randn(5, 8, dtype=torch.float64)
    out = layer(x, torch.ones(5, dtype=torch.bool))
    ref = layer.norm2(layer.norm1(x))
    assert torch.allclose(out, ref, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 9), st.sampled_from([(4, 1), (8, 2), (12, 3)]))
def test_layer_shape_preserved(L, dh):
    d, heads = dh
    layer = hn.TransformerEncoderLayer(d, heads, 6, 0.1, 0.1)
    x = torch.randn(2, L, d)
    assert layer(x, torch.ones(2, L, dtype=torch.bool), torch.Generator().manual_seed(0)).shape == x.shape


def test_encoder_query_index_last_layer_only():
    torch.manual_seed(2)
    enc = hn.TransformerEncoder(2, 8, 2, 16, 0.0, 0.0).double()
    x = torch.randn(3, 6, 8, dtype=torch.float64)
    mask = torch.ones(3, 6, dtype=torch.bool)
    mask[1, :2] = False
    first = mask.to(torch.int8).argmax(-1)
    full = enc(x, mask)
    assert torch.allclose(enc(x, mask, query_index=first)[:, 0], full[torch.arange(3), first], atol=1e-12)


# ---------------------------------------------------------------- backward


def test_backward_linear_form():
    w = torch.randn(5, dtype=torch.float64, requires_grad=True)
    x = torch.randn(5, dtype=torch.float64)
    hn.backward((w * x).sum())
    assert torch.equal(w.grad, x)


def test_backward_fan_out_accumulates():
    w = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    hn.backward(w * 2 + w**2)
    assert w.grad.item() == 2 + 6


def test_backward_requires_scalar():
    w = torch.randn(3, requires_grad=True)
    with pytest.raises(NonScalarLoss):
        hn.backward(w * 2)


def _probe(module, loss_fn):
    params = dict(module.named_parameters())
    failures = finite_difference_check(loss_fn, params, probes=20)
    assert not failures, failures[:5]


def test_gradcheck_linear_and_layer_norm():
    torch.manual_seed(3)
    lin, ln = hn.Linear(6, 5).double(), hn.LayerNorm(5).double()
    with torch.no_grad():
        ln.gain.normal_()
        ln.bias.normal_()
    x = torch.randn(4, 6, dtype=torch.float64)
    t = torch.randn(4, 5, dtype=torch.float64)
    seq = torch.nn.Sequential(lin, ln)
    _probe(seq, lambda: ((ln(lin(x)) - t) ** 2).sum())


def test_gradcheck_gelu_softmax_inputs():
    x = torch.randn(4, 7, dtype=torch.float64, requires_grad=True)
    t = torch.randn(4, 7, dtype=torch.float64)
    failures = finite_difference_check(lambda: (hn.softmax(hn.gelu(x) * 3) * t).sum(), {"x": x}, probes=28)
    assert not failures


def test_gradcheck_attention():
    torch.manual_seed(4)
    a = hn.MultiHeadAttention(8, 2).double()
    x = torch.randn(2, 5, 8, dtype=torch.float64)
    mask = torch.tensor([[True] * 5, [True, True, True, False, False]])
    t = torch.randn(2, 5, 8, dtype=torch.float64)
    _probe(a, lambda: (a(x, mask) * t).sum())


def test_gradcheck_encoder_layer():
    torch.manual_seed(5)
    layer = hn.TransformerEncoderLayer(8, 2, 12, 0.0, 0.0).double()
    with torch.no_grad():
        for p in layer.parameters():
            p.add_(torch.randn_like(p) * 0.1)
    x = torch.randn(2, 6, 8, dtype=torch.float64)
    mask = torch.ones(2, 6, dtype=torch.bool)
    mask[0, 4:] = False
    t = torch.randn(2, 6, 8, dtype=torch.float64)
    _probe(layer, lambda: (layer(x, mask) * t).sum())


def test_gradcheck_embedding_lookup():
    table = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    ids = torch.tensor([[1, 1, 5], [0, 2, 1]])
    t = torch.randn(2, 3, 4, dtype=torch.float64)
    assert not finite_difference_check(lambda: (hn.embedding_lookup(table, ids) * t).sum(), {"t": table}, probes=24)


def test_fd_oracle_detects_wrong_gradient():
    w = torch.randn(4, dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**2

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x * g

    assert finite_difference_check(lambda: Wrong.apply(w).sum() * 1.0, {"w": w}, probes=4)


def test_linear_init_and_layout():
    lin = hn.Linear(3, 7)
    assert lin.weight.shape == (3, 7) and torch.equal(lin.bias, torch.zeros(7))
    x = torch.randn(2, 3)
    assert torch.allclose(lin(x), x @ lin.weight + lin.bias)
    assert lin.weight.detach().abs().max().item() <= 2 * hn.INIT_STD
