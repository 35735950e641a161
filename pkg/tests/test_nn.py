import math

import pytest
import torch

from tide import utils
from tide.nn import (
    GRAD_UNITS,
    CrossAttention,
    ImplicitLayout,
    LoraAdapter,
    LoraLinear,
    TanLayer,
    TextEmbedding,
    TextEncoder,
    Vocabulary,
    apply_shared_attention,
    cross_attention,
    encode_text,
    grad_check,
    lora_linear,
    pad_tokens,
    tan_combine,
    tan_modulate,
    tan_modulate_dual,
    time_embedding,
    tokenize,
)

utils.setup_logger(None)


def _identity(linear: LoraLinear):
    with torch.no_grad():
        linear.base.weight.copy_(torch.eye(linear.base.in_features, dtype=linear.base.weight.dtype))
        linear.base.bias.zero_()


def _ctx(rows: list[list[float]]) -> TextEmbedding:
    matrix = torch.tensor([rows], dtype=torch.float64)
    return TextEmbedding(torch.zeros(1, len(rows), dtype=torch.long), matrix)


class TestText:
    def test_tokenize(self):
        vocab = Vocabulary(["a", "fish"])
        assert vocab["a"] == 3 and vocab["fish"] == 4
        assert tokenize("", vocab) == [vocab.BOS, vocab.EOS]
        assert tokenize("a fish", vocab) == [vocab.BOS, 3, 4, vocab.EOS]
        assert tokenize("A zzz", vocab) == [vocab.BOS, 3, vocab.UNK, vocab.EOS]

    def test_vocabulary_dedups_and_skips_specials(self):
        vocab = Vocabulary(["fish", "Fish", "<eos>", "reef"])
        assert vocab.to_list() == ["fish", "reef"]
        assert len(vocab) == 5

    def test_pad_tokens(self):
        ids, mask = pad_tokens([[0, 5, 1], [0, 1]])
        assert ids.tolist() == [[0, 5, 1], [0, 1, Vocabulary.EOS]]
        assert mask.tolist() == [[True, True, True], [True, True, False]]

    def test_encode_text_lookup(self):
        torch.manual_seed(0)
        encoder = TextEncoder(8, 4, 6)
        single = encode_text([5], encoder)
        assert single.matrix.shape == (1, 4)
        assert torch.equal(single.matrix[0], encoder.embed.weight[5] + encoder.position[0])
        pair = encode_text([2, 5], encoder)
        expected = torch.stack(
            [encoder.embed.weight[2] + encoder.position[0], encoder.embed.weight[5] + encoder.position[1]]
        )
        assert torch.equal(pair.matrix, expected)
        swapped = encode_text([5, 2], encoder)
        assert not torch.equal(swapped.matrix, pair.matrix)

    def test_encode_text_errors(self):
        encoder = TextEncoder(8, 4, 3)
        with pytest.raises(ValueError):
            encode_text([8], encoder)
        with pytest.raises(ValueError):
            encode_text([], encoder)

    def test_encode_text_truncates(self):
        encoder = TextEncoder(8, 4, 3)
        mask = torch.tensor([[True, True, True, False]])
        long = encode_text(torch.tensor([[0, 1, 2, 3]]), encoder, mask)
        assert long.length == 3
        assert torch.equal(long.matrix, encode_text(torch.tensor([[0, 1, 2]]), encoder).matrix)
        assert long.mask is not None and long.mask.tolist() == [[True, True, True]]


class TestAttention:
    def test_single_token_layout(self):
        torch.manual_seed(1)
        p = CrossAttention(4).double()
        x = torch.randn(1, 3, 4, dtype=torch.float64)
        ctx = TextEmbedding(torch.zeros(1, 1, dtype=torch.long), torch.randn(1, 1, 4, dtype=torch.float64))
        out, layout = cross_attention(x, ctx, p)
        assert torch.equal(layout.probs, torch.ones(1, 1, 3, 1, dtype=torch.float64))
        value = p.o(p.v(ctx.matrix))[0, 0]
        for q in range(3):
            assert torch.allclose(out[0, q], value)

    def test_zero_logits_are_uniform(self):
        torch.manual_seed(2)
        p = CrossAttention(4).double()
        with torch.no_grad():
            p.q.base.weight.zero_()
            p.q.base.bias.zero_()
        x = torch.randn(2, 5, 4, dtype=torch.float64)
        ctx = TextEmbedding(torch.zeros(2, 2, dtype=torch.long), torch.randn(2, 2, 4, dtype=torch.float64))
        _, layout = cross_attention(x, ctx, p)
        assert torch.allclose(layout.probs, torch.full_like(layout.probs, 0.5))

    def test_hand_softmax(self):
        p = CrossAttention(1).double()
        _identity(p.q)
        _identity(p.k)
        x = torch.ones(1, 1, 1, dtype=torch.float64)
        _, layout = cross_attention(x, _ctx([[math.log(3)], [0.0]]), p)
        assert layout.probs.flatten().tolist() == pytest.approx([0.75, 0.25])

    def test_shared_attention_mixture(self):
        p = CrossAttention(2).double()
        _identity(p.v)
        _identity(p.o)
        layout = ImplicitLayout(torch.tensor([[[[0.75, 0.25]]]], dtype=torch.float64))
        out = apply_shared_attention(layout, _ctx([[1.0, 2.0], [3.0, 4.0]]), p)
        assert out.flatten().tolist() == pytest.approx([1.5, 2.5])

    def test_shared_attention_matches_cross_attention_bitwise(self):
        torch.manual_seed(3)
        for heads in (1, 2):
            p = CrossAttention(8, heads=heads).double()
            x = torch.randn(2, 6, 8, dtype=torch.float64)
            ctx = TextEmbedding(
                torch.zeros(2, 4, dtype=torch.long), torch.randn(2, 4, 8, dtype=torch.float64)
            )
            out, layout = cross_attention(x, ctx, p)
            assert torch.equal(apply_shared_attention(layout, ctx, p), out)
            shared, same = p(x, ctx, layout)
            assert same is layout and torch.equal(shared, out)

    def test_layout_rows_are_distributions(self):
        torch.manual_seed(4)
        p = CrossAttention(8, heads=2)
        x = torch.randn(3, 10, 8) * 5
        ctx = TextEmbedding(torch.zeros(3, 5, dtype=torch.long), torch.randn(3, 5, 8) * 5)
        _, layout = cross_attention(x, ctx, p)
        assert layout.heads == 2
        assert layout.is_stochastic()

    def test_padding_gets_no_attention(self):
        torch.manual_seed(5)
        p = CrossAttention(4)
        mask = torch.tensor([[True, True, False]])
        ctx = TextEmbedding(torch.zeros(1, 3, dtype=torch.long), torch.randn(1, 3, 4), mask)
        _, layout = cross_attention(torch.randn(1, 2, 4), ctx, p)
        assert torch.all(layout.probs[..., 2] == 0)
        assert layout.is_stochastic()

    def test_dimension_errors(self):
        p = CrossAttention(4)
        ctx = TextEmbedding(torch.zeros(1, 2, dtype=torch.long), torch.randn(1, 2, 4))
        with pytest.raises(ValueError):
            cross_attention(torch.randn(1, 3, 5), ctx, p)
        with pytest.raises(ValueError):
            apply_shared_attention(ImplicitLayout(torch.full((1, 1, 3, 3), 1 / 3)), ctx, p)
        with pytest.raises(ValueError):
            ImplicitLayout(torch.ones(3, 2))


class TestTimeAndTan:
    def test_time_embedding(self):
        emb = time_embedding(0, 8)
        assert torch.equal(emb[:4], torch.zeros(4))
        assert torch.equal(emb[4:], torch.ones(4))
        assert time_embedding(1, 2, torch.float64).tolist() == pytest.approx(
            [math.sin(1), math.cos(1)]
        )
        assert torch.equal(time_embedding(17, 16), time_embedding(17, 16))
        assert time_embedding(torch.tensor([1, 2, 3]), 5).shape == (3, 5)
        assert time_embedding(3, 5)[-1] == 0
        with pytest.raises(ValueError):
            time_embedding(-1, 4)

    def test_fresh_tan_is_identity(self):
        torch.manual_seed(6)
        for gate in ("scalar", "channel"):
            layer = TanLayer(8, 16, gate=gate)
            x = torch.randn(2, 5, 8)
            out = tan_modulate(x, torch.randn(2, 5, 8), torch.randn(2, 16), layer)
            assert torch.equal(out, x)
            out = tan_modulate_dual(x, torch.randn(2, 5, 8), torch.randn(2, 5, 8), torch.randn(2, 16), layer)
            assert torch.equal(out, x)

    def test_tan_arithmetic(self):
        assert tan_combine(
            torch.tensor(2.0), torch.tensor(0.5), torch.tensor(1.0), torch.tensor(0.5)
        ).item() == pytest.approx(3.0)
        layer = TanLayer(1, 2)
        with torch.no_grad():
            layer.gamma_mlp[2].bias.fill_(0.5)
            layer.beta_mlp[2].bias.fill_(1.0)
            layer.gate.weight.zero_()
            layer.gate.bias.zero_()
        x = torch.full((1, 1, 1), 2.0)
        out = tan_modulate(x, torch.randn(1, 1, 1), torch.randn(1, 2), layer)
        assert out.item() == pytest.approx(3.0)

    def test_closed_gate_is_identity(self):
        torch.manual_seed(7)
        layer = TanLayer(4, 4).double()
        with torch.no_grad():
            layer.gamma_mlp[2].bias.fill_(3.0)
            layer.beta_mlp[2].bias.fill_(-2.0)
            layer.gate.weight.zero_()
            layer.gate.bias.fill_(-60.0)
        x = torch.randn(1, 3, 4, dtype=torch.float64)
        x_f, x_t = torch.randn(1, 3, 4, dtype=torch.float64), torch.randn(1, 4, dtype=torch.float64)
        out = tan_modulate(x, x_f, x_t, layer)
        assert torch.allclose(out, x, atol=1e-20)

    def test_alpha_range(self):
        torch.manual_seed(8)
        layer = TanLayer(4, 4)
        with torch.no_grad():
            layer.gate.weight.normal_()
        alpha = layer.alpha(torch.randn(16, 4))
        assert alpha.shape == (16, 1, 1)
        assert bool(((alpha > 0) & (alpha < 1)).all())
        assert torch.equal(TanLayer(4, 4, time_adaptive=False).alpha(torch.randn(2, 4)), torch.tensor(1.0))

    def test_tan_dual_averages_sources(self):
        layer = TanLayer(1, 2, time_adaptive=False)
        layer.modulation = lambda x_f: (1 - x_f, 2 * x_f)
        x = torch.ones(1, 1, 1)
        out = tan_modulate_dual(x, torch.zeros(1, 1, 1), torch.ones(1, 1, 1), torch.zeros(1, 2), layer)
        assert out.item() == pytest.approx(2.5)

    def test_tan_dual_equal_sources(self):
        torch.manual_seed(9)
        layer = TanLayer(4, 4).double()
        with torch.no_grad():
            for p in layer.parameters():
                p.normal_()
        x, x_f, x_t = torch.randn(2, 3, 4, dtype=torch.float64), torch.randn(2, 3, 4, dtype=torch.float64), torch.randn(2, 4, dtype=torch.float64)
        assert torch.allclose(tan_modulate_dual(x, x_f, x_f, x_t, layer), tan_modulate(x, x_f, x_t, layer))

    def test_tan_width_mismatch(self):
        layer = TanLayer(4, 4)
        with pytest.raises(ValueError):
            tan_modulate(torch.randn(1, 2, 4), torch.randn(1, 2, 3), torch.randn(1, 4), layer)


class TestLora:
    def test_fresh_adapter_is_exact(self):
        torch.manual_seed(10)
        unit = LoraLinear(6, 4, rank=2)
        x = torch.randn(3, 6)
        assert torch.equal(unit(x), torch.nn.functional.linear(x, unit.base.weight, unit.base.bias))
        assert LoraLinear(6, 4, rank=0).lora is None

    def test_hand_delta(self):
        adapter = LoraAdapter(2, 2, rank=1)
        with torch.no_grad():
            adapter.A.copy_(torch.tensor([[1.0, 0.0]]))
            adapter.B.copy_(torch.tensor([[0.0], [1.0]]))
        out = lora_linear(torch.tensor([3.0, 4.0]), torch.zeros(2, 2), adapter)
        assert out.tolist() == [0.0, 3.0]

    def test_rank_bounds(self):
        with pytest.raises(ValueError):
            LoraAdapter(2, 3, rank=3)
        with pytest.raises(ValueError):
            LoraAdapter(2, 3, rank=0)
        with pytest.raises(ValueError):
            lora_linear(torch.randn(3), torch.zeros(2, 2), LoraAdapter(2, 2, 1))

    def test_only_adapter_gets_gradients(self):
        torch.manual_seed(11)
        unit = LoraLinear(4, 4, rank=2)
        unit.base.requires_grad_(False)
        with torch.no_grad():
            unit.lora.B.normal_()
        unit(torch.randn(5, 4)).sum().backward()
        assert unit.base.weight.grad is None
        assert unit.lora.A.grad is not None and unit.lora.B.grad is not None


class TestGradCheck:
    @pytest.mark.parametrize("unit", sorted(GRAD_UNITS))
    def test_units_pass(self, unit):
        report = grad_check(unit, seed=0, tol=1e-4)
        assert report.passed, report
        assert report.max_rel_error < 1e-4

    def test_zero_chain_through_fresh_lora(self):
        report = grad_check("lora_linear", fresh=True)
        assert report.passed
        assert report.max_abs_grad["lora.A"] == 0.0

    def test_unknown_unit(self):
        with pytest.raises(ValueError):
            grad_check("no_such_unit")


if __name__ == "__main__":
    TestGradCheck().test_units_pass("tan")
