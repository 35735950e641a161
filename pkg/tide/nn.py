"""Neural building blocks shared by every denoising branch.

All attention functions operate on batched tensors: features are (B, N, c),
text matrices (B, L, c) and layouts (B, H, N, L).
"""

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from loguru import logger
from more_itertools import unique_everseen
from torch import nn

from .datatypes import GradCheckError, GradCheckReport

# ============================================================================
# ===============                    TEXT                     ================
# ============================================================================


class Vocabulary:
    """Word to id table with BOS, EOS and UNK sentinels at ids 0, 1 and 2."""

    BOS = 0
    EOS = 1
    UNK = 2
    specials = ("<bos>", "<eos>", "<unk>")

    def __init__(self, words: Sequence[str]):
        words = [w.lower() for w in words if w.lower() not in self.specials]
        self.words = [*self.specials, *unique_everseen(words)]
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __getitem__(self, word: str) -> int:
        return self.index.get(word, self.UNK)

    def to_list(self) -> list[str]:
        return self.words[len(self.specials) :]


def tokenize(caption: str, vocab: Vocabulary) -> list[int]:
    return [vocab.BOS, *(vocab[w] for w in caption.lower().split()), vocab.EOS]


def pad_tokens(
    token_lists: Sequence[Sequence[int]], pad: int = Vocabulary.EOS
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack token lists into a (B, L) id tensor and a (B, L) mask of real tokens."""
    length = max(len(t) for t in token_lists)
    ids = torch.full((len(token_lists), length), pad, dtype=torch.long)
    mask = torch.zeros((len(token_lists), length), dtype=torch.bool)
    for row, tokens in enumerate(token_lists):
        ids[row, : len(tokens)] = torch.tensor(tokens, dtype=torch.long)
        mask[row, : len(tokens)] = True
    return ids, mask


@dataclass
class TextEmbedding:
    """Encoded caption(s).

    Attributes
    ----------
    tokens
        Token ids, shape (L,) or (B, L).
    matrix
        Rows of the text matrix, shape (L, c) or (B, L, c).
    mask
        True for real tokens, False for padding. None means no padding.
    """

    tokens: torch.Tensor
    matrix: torch.Tensor
    mask: torch.Tensor | None = None

    @property
    def width(self) -> int:
        return self.matrix.shape[-1]

    @property
    def length(self) -> int:
        return self.matrix.shape[-2]


class TextEncoder(nn.Module):
    """Token embedding plus learned absolute positions."""

    def __init__(self, vocab_size: int, width: int, max_tokens: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, width)
        self.position = nn.Parameter(torch.randn(max_tokens, width) * 0.02)

    def forward(
        self, tokens: torch.Tensor, mask: torch.Tensor | None = None
    ) -> TextEmbedding:
        return encode_text(tokens, self, mask)


def encode_text(
    tokens: torch.Tensor | Sequence[int],
    encoder: TextEncoder,
    mask: torch.Tensor | None = None,
) -> TextEmbedding:
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    vocab_size = encoder.embed.num_embeddings
    if tokens.numel() == 0:
        raise ValueError("Cannot encode an empty token sequence")
    if int(tokens.min()) < 0 or int(tokens.max()) >= vocab_size:
        raise ValueError(f"Token ids must lie in [0, {vocab_size}), got {tokens.tolist()}")
    length, limit = tokens.shape[-1], encoder.position.shape[0]
    if length > limit:
        logger.warning(f"Truncating {length} tokens to the encoder's {limit} positions")
        tokens = tokens[..., :limit]
        mask = mask[..., :limit] if mask is not None else None
        length = limit
    matrix = encoder.embed(tokens) + encoder.position[:length]
    return TextEmbedding(tokens=tokens, matrix=matrix, mask=mask)


# ============================================================================
# ===============                    LORA                     ================
# ============================================================================


class LoraAdapter(nn.Module):
    """Low-rank delta scale * B @ A; B starts at zero."""

    def __init__(self, in_features: int, out_features: int, rank: int, scale: float = 1.0):
        super().__init__()
        if not 0 < rank <= min(in_features, out_features):
            raise ValueError(
                f"LoRA rank {rank} must lie in [1, {min(in_features, out_features)}]"
            )
        self.rank = rank
        self.scale = scale
        self.A = nn.Parameter(torch.empty(rank, in_features))
        self.B = nn.Parameter(torch.zeros(out_features, rank))
        nn.init.kaiming_uniform_(self.A, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * F.linear(F.linear(x, self.A), self.B)


def lora_linear(
    x: torch.Tensor,
    W: torch.Tensor,
    adapter: LoraAdapter | None = None,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """x @ W.T + bias, plus the adapter's low-rank delta when one is attached."""
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != projection input {W.shape[1]}")
    out = F.linear(x, W, bias)
    if adapter is None:
        return out
    if adapter.A.shape[1] != W.shape[1] or adapter.B.shape[0] != W.shape[0]:
        raise ValueError(
            f"adapter {tuple(adapter.B.shape)}x{tuple(adapter.A.shape)} does not fit"
            f" projection {tuple(W.shape)}"
        )
    return out + adapter(x)


class LoraLinear(nn.Module):
    """A linear projection with an optional low-rank adapter."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rank: int = 0,
        scale: float = 1.0,
        bias: bool = True,
    ):
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=bias)
        self.lora: LoraAdapter | None = None
        self.attach(rank, scale)

    def attach(self, rank: int, scale: float = 1.0):
        """Replace the adapter with a fresh one of `rank` (0 removes it)."""
        if rank == 0:
            self.lora = None
            return
        self.lora = LoraAdapter(
            self.base.in_features, self.base.out_features, rank, scale
        ).to(self.base.weight.dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return lora_linear(x, self.base.weight, self.lora, self.base.bias)


# ============================================================================
# ===============                  ATTENTION                  ================
# ============================================================================


@dataclass
class ImplicitLayout:
    """Cross-attention probabilities, shape (B, H, N, L)."""

    probs: torch.Tensor

    def __post_init__(self):
        if self.probs.ndim != 4:
            raise ValueError(f"layout must be (B, H, N, L), got {tuple(self.probs.shape)}")

    @property
    def heads(self) -> int:
        return self.probs.shape[1]

    def is_stochastic(self, tol: float = 1e-6) -> bool:
        rows = self.probs.sum(dim=-1)
        return bool((self.probs >= 0).all()) and bool(
            ((rows - 1).abs() <= tol).all()
        )


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, s, c = x.shape
    return x.reshape(b, s, heads, c // heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, s, d = x.shape
    return x.transpose(1, 2).reshape(b, s, h * d)


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int = 1, rank: int = 0, scale: float = 1.0):
        super().__init__()
        self.heads = heads
        self.q = LoraLinear(width, width, rank, scale)
        self.k = LoraLinear(width, width, rank, scale)
        self.v = LoraLinear(width, width, rank, scale)
        self.o = LoraLinear(width, width, rank, scale)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = (_split_heads(f(x), self.heads) for f in (self.q, self.k, self.v))
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        return self.o(_merge_heads(torch.softmax(logits, dim=-1) @ v))


class CrossAttention(nn.Module):
    """Query projection from image-grid features, key and value projections from text."""

    def __init__(self, width: int, heads: int = 1, rank: int = 0, scale: float = 1.0):
        super().__init__()
        self.width = width
        self.heads = heads
        self.q = LoraLinear(width, width, rank, scale)
        self.k = LoraLinear(width, width, rank, scale)
        self.v = LoraLinear(width, width, rank, scale)
        self.o = LoraLinear(width, width, rank, scale)

    def layout(self, x: torch.Tensor, ctx: TextEmbedding) -> ImplicitLayout:
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(ctx.matrix), self.heads)
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if ctx.mask is not None:
            logits = logits.masked_fill(~ctx.mask[:, None, None, :], float("-inf"))
        return ImplicitLayout(torch.softmax(logits, dim=-1))

    def forward(
        self, x: torch.Tensor, ctx: TextEmbedding, layout: ImplicitLayout | None = None
    ) -> tuple[torch.Tensor, ImplicitLayout]:
        if layout is None:
            return cross_attention(x, ctx, self)
        return apply_shared_attention(layout, ctx, self), layout


def _attend(probs: torch.Tensor, ctx: TextEmbedding, p: CrossAttention) -> torch.Tensor:
    v = _split_heads(p.v(ctx.matrix), p.heads)
    return p.o(_merge_heads(probs @ v))


def cross_attention(
    x: torch.Tensor, ctx: TextEmbedding, p: CrossAttention
) -> tuple[torch.Tensor, ImplicitLayout]:
    """softmax(Q K^T / sqrt(d)) V, returning the output and the attention map."""
    if x.shape[-1] != p.width or ctx.width != p.width:
        raise ValueError(
            f"feature width {x.shape[-1]} / text width {ctx.width} != attention width {p.width}"
        )
    layout = p.layout(x, ctx)
    return _attend(layout.probs, ctx, p), layout


def apply_shared_attention(
    layout: ImplicitLayout, ctx: TextEmbedding, p: CrossAttention
) -> torch.Tensor:
    """layout @ V using this block's value and output projections only."""
    if layout.probs.shape[-1] != ctx.length:
        raise ValueError(
            f"layout has {layout.probs.shape[-1]} columns but the text has {ctx.length} tokens"
        )
    if layout.heads != p.heads:
        raise ValueError(f"layout has {layout.heads} heads, attention has {p.heads}")
    if ctx.width != p.width:
        raise ValueError(f"text width {ctx.width} != attention width {p.width}")
    return _attend(layout.probs, ctx, p)


# ============================================================================
# ===============             TIME AND MODULATION             ================
# ============================================================================


def time_embedding(
    t: int | torch.Tensor, width: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Sinusoidal features [sin(t f_k), cos(t f_k)] with f_k = 10000^(-k / half).

    Scalar `t` gives shape (width,), a (B,) tensor gives (B, width). Odd widths are
    padded with one zero.
    """
    t = torch.as_tensor(t)
    if bool((t < 0).any()):
        raise ValueError(f"timesteps must be non-negative, got {t.tolist()}")
    half = width // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1)
    )
    args = t.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if width % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(dtype)


def _zero_mlp(width: int, hidden: int) -> nn.Sequential:
    mlp = nn.Sequential(nn.Linear(width, hidden), nn.SiLU(), nn.Linear(hidden, width))
    nn.init.zeros_(mlp[2].weight)
    nn.init.zeros_(mlp[2].bias)
    return mlp


class TanLayer(nn.Module):
    """Produces (gamma, beta) from cross-modal features and a sigmoid time gate alpha.

    Parameters
    ----------
    width
        Feature width c.
    time_width
        Width of the sinusoidal time features feeding the gate.
    time_adaptive
        If False, alpha is fixed to 1.
    gate
        "scalar" for one alpha per sample, "channel" for one per channel.
    """

    def __init__(
        self,
        width: int,
        time_width: int,
        hidden: int | None = None,
        time_adaptive: bool = True,
        gate: str = "scalar",
    ):
        super().__init__()
        hidden = hidden or width
        self.width = width
        self.gamma_mlp = _zero_mlp(width, hidden)
        self.beta_mlp = _zero_mlp(width, hidden)
        self.gate = (
            nn.Linear(time_width, 1 if gate == "scalar" else width)
            if time_adaptive
            else None
        )

    def modulation(self, x_f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.gamma_mlp(x_f), self.beta_mlp(x_f)

    def alpha(self, x_t: torch.Tensor) -> torch.Tensor:
        """Gate broadcastable over (..., N, c)."""
        if self.gate is None:
            return torch.ones((), dtype=x_t.dtype)
        return torch.sigmoid(self.gate(x_t)).unsqueeze(-2)


def tan_combine(
    x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, alpha: torch.Tensor
) -> torch.Tensor:
    return x + (alpha * gamma * x + alpha * beta)


def _check_widths(layer: TanLayer, *features: torch.Tensor):
    for f in features:
        if f.shape[-1] != layer.width:
            raise ValueError(f"feature width {f.shape[-1]} != TAN width {layer.width}")
    if len({f.shape for f in features}) != 1:
        raise ValueError(f"feature shapes disagree: {[tuple(f.shape) for f in features]}")


def tan_modulate(
    x: torch.Tensor, x_f: torch.Tensor, x_t: torch.Tensor, layer: TanLayer
) -> torch.Tensor:
    _check_widths(layer, x, x_f)
    gamma, beta = layer.modulation(x_f)
    return tan_combine(x, gamma, beta, layer.alpha(x_t))


def tan_modulate_dual(
    x: torch.Tensor,
    x_f_depth: torch.Tensor,
    x_f_mask: torch.Tensor,
    x_t: torch.Tensor,
    layer: TanLayer,
) -> torch.Tensor:
    """TAN with (gamma, beta) averaged over the depth and mask sources."""
    _check_widths(layer, x, x_f_depth, x_f_mask)
    gamma_d, beta_d = layer.modulation(x_f_depth)
    gamma_m, beta_m = layer.modulation(x_f_mask)
    gamma = (gamma_d + gamma_m) / 2
    beta = (beta_d + beta_m) / 2
    return tan_combine(x, gamma, beta, layer.alpha(x_t))


# ============================================================================
# ===============               GRADIENT CHECK                ================
# ============================================================================

# A unit builder receives probe sizes and a generator, and returns a float64 module
# together with a closure evaluating its output from fixed inputs.
UnitBuilder = Callable[
    [dict[str, int], torch.Generator], tuple[nn.Module, Callable[[], torch.Tensor]]
]
GRAD_UNITS: dict[str, UnitBuilder] = {}

default_probe = {"batch": 2, "queries": 5, "tokens": 3, "width": 6, "heads": 1, "rank": 2}


def grad_unit(name: str) -> Callable[[UnitBuilder], UnitBuilder]:
    def register(builder: UnitBuilder) -> UnitBuilder:
        GRAD_UNITS[name] = builder
        return builder

    return register


def _randn(g: torch.Generator, *shape: int) -> torch.Tensor:
    return torch.randn(shape, generator=g, dtype=torch.float64)


@grad_unit("tan")
def _tan_unit(probe, g):
    b, n, c = probe["batch"], probe["queries"], probe["width"]
    layer = TanLayer(c, c).double()
    x, x_f, x_t = _randn(g, b, n, c), _randn(g, b, n, c), _randn(g, b, c)
    return layer, lambda: tan_modulate(x, x_f, x_t, layer)


@grad_unit("tan_dual")
def _tan_dual_unit(probe, g):
    b, n, c = probe["batch"], probe["queries"], probe["width"]
    layer = TanLayer(c, c).double()
    x, x_d, x_m, x_t = (
        _randn(g, b, n, c),
        _randn(g, b, n, c),
        _randn(g, b, n, c),
        _randn(g, b, c),
    )
    return layer, lambda: tan_modulate_dual(x, x_d, x_m, x_t, layer)


@grad_unit("lora_linear")
def _lora_unit(probe, g):
    b, c = probe["batch"], probe["width"]
    unit = LoraLinear(c, c, rank=probe["rank"]).double()
    unit.base.requires_grad_(False)
    x = _randn(g, b, c)
    return unit, lambda: lora_linear(x, unit.base.weight, unit.lora, unit.base.bias)


def _attention_inputs(probe, g) -> tuple[CrossAttention, torch.Tensor, TextEmbedding]:
    b, n, L, c = probe["batch"], probe["queries"], probe["tokens"], probe["width"]
    p = CrossAttention(c, heads=probe["heads"]).double()
    x = _randn(g, b, n, c)
    ctx = TextEmbedding(torch.zeros(b, L, dtype=torch.long), _randn(g, b, L, c))
    return p, x, ctx


@grad_unit("cross_attention")
def _cross_attention_unit(probe, g):
    p, x, ctx = _attention_inputs(probe, g)
    return p, lambda: cross_attention(x, ctx, p)[0]


@grad_unit("shared_attention")
def _shared_attention_unit(probe, g):
    p, x, ctx = _attention_inputs(probe, g)
    b, n, L, h = probe["batch"], probe["queries"], probe["tokens"], probe["heads"]
    layout = ImplicitLayout(torch.softmax(_randn(g, b, h, n, L), dim=-1))
    return p, lambda: apply_shared_attention(layout, ctx, p)


def grad_check(
    unit: str,
    probe: dict[str, int] | None = None,
    seed: int = 0,
    tol: float = 1e-4,
    fresh: bool = False,
    h: float = 1e-6,
    max_entries: int = 16,
) -> GradCheckReport:
    """Compare autograd parameter gradients with central finite differences.

    The scalar loss is sum(output * w) for a fixed random w. Unless `fresh`,
    trainable parameters are first re-drawn at random so that zero-initialized
    layers are exercised away from their pass-through point. At most
    `max_entries` entries per parameter tensor are probed.

    Parameters
    ----------
    unit
        Name of a registered unit, see `GRAD_UNITS`.
    probe
        Input sizes, merged over `default_probe`.
    seed
        Seeds parameters, inputs and the probed entries.
    tol
        Pass threshold on |a - n| / max(1, |a|, |n|).
    fresh
        Keep the unit's own initialization.

    Returns
    -------
    GradCheckReport
        Max relative error overall and per parameter.
    """
    if unit not in GRAD_UNITS:
        raise ValueError(f"Unknown unit {unit!r}, expected one of {sorted(GRAD_UNITS)}")
    probe = {**default_probe, **(probe or {})}
    g = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module, forward = GRAD_UNITS[unit](probe, g)

    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if not params:
        raise ValueError(f"Unit {unit!r} has no trainable parameters")
    if not fresh:
        with torch.no_grad():
            for _, p in params:
                p.copy_(_randn(g, *p.shape) * 0.5)

    out = forward()
    weights = _randn(g, *out.shape)

    def loss() -> torch.Tensor:
        return (forward() * weights).sum()

    value = loss()
    if not torch.isfinite(value):
        raise GradCheckError(f"{unit}: non-finite loss {value.item()}")
    grads = torch.autograd.grad(value, [p for _, p in params], allow_unused=True)

    per_parameter: dict[str, float] = {}
    max_abs_grad: dict[str, float] = {}
    with torch.no_grad():
        for (name, p), grad in zip(params, grads):
            grad = torch.zeros_like(p) if grad is None else grad
            if not bool(torch.isfinite(grad).all()):
                raise GradCheckError(f"{unit}: non-finite gradient for {name}")
            max_abs_grad[name] = float(grad.abs().max())
            flat, flat_grad = p.view(-1), grad.reshape(-1)
            picks = torch.randperm(flat.numel(), generator=g)[:max_entries]
            worst = 0.0
            for idx in picks.tolist():
                orig = flat[idx].item()
                flat[idx] = orig + h
                plus = loss().item()
                flat[idx] = orig - h
                minus = loss().item()
                flat[idx] = orig
                numeric = (plus - minus) / (2 * h)
                analytic = flat_grad[idx].item()
                if not math.isfinite(numeric):
                    raise GradCheckError(f"{unit}: non-finite difference for {name}")
                err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
                worst = max(worst, err)
            per_parameter[name] = worst

    max_err = max(per_parameter.values())
    logger.debug(f"grad_check {unit}: max relative error {max_err:.3e}")
    return GradCheckReport(
        unit=unit,
        max_rel_error=max_err,
        tol=tol,
        passed=max_err < tol,
        per_parameter=per_parameter,
        max_abs_grad=max_abs_grad,
    )
