"""The tri-branch denoiser: a full-depth image branch and two shallower annotation
branches (depth, mask), coupled by shared cross-attention layouts and cross-modal
time adaptive normalization.
"""

import copy
from dataclasses import dataclass, field, replace

import torch
from loguru import logger
from torch import nn

from . import codec, utils
from .datatypes import ModelConfig, Modality, Toggles
from .nn import (
    CrossAttention,
    ImplicitLayout,
    LoraAdapter,
    LoraLinear,
    SelfAttention,
    TanLayer,
    TextEmbedding,
    TextEncoder,
    apply_shared_attention,
    cross_attention,
    grad_unit,
    tan_modulate,
    tan_modulate_dual,
    time_embedding,
)


@dataclass(frozen=True)
class BranchSpec:
    layers: int
    width: int
    size: int
    patch: int
    lora_rank: int
    modality: Modality
    channels: int = 3
    heads: int = 1
    ff_mult: int = 2
    lora_scale: float = 1.0

    @property
    def tokens(self) -> int:
        return (self.size // self.patch) ** 2


def branch_spec(config: ModelConfig, modality: Modality, lora_rank: int = 0) -> BranchSpec:
    return BranchSpec(
        layers=config.image_layers if modality == Modality.image else config.mini_layers,
        width=config.width,
        size=config.size,
        patch=config.patch,
        lora_rank=lora_rank,
        modality=modality,
        channels=config.channels,
        heads=config.heads,
        ff_mult=config.ff_mult,
        lora_scale=config.lora_scale,
    )


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


class Block(nn.Module):
    """adaLN self-attention, then cross-attention (the layout site), then adaLN
    feedforward, each with a residual connection."""

    def __init__(self, spec: BranchSpec):
        super().__init__()
        c, r, s = spec.width, spec.lora_rank, spec.lora_scale
        self.norm1 = nn.LayerNorm(c, elementwise_affine=False)
        self.self_attn = SelfAttention(c, spec.heads, r, s)
        self.norm2 = nn.LayerNorm(c)
        self.cross_attn = CrossAttention(c, spec.heads, r, s)
        self.norm3 = nn.LayerNorm(c, elementwise_affine=False)
        self.ff = nn.Sequential(
            LoraLinear(c, c * spec.ff_mult, r, s),
            nn.GELU(approximate="tanh"),
            LoraLinear(c * spec.ff_mult, c, r, s),
        )
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(c, 4 * c))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)

    def attend(
        self,
        h: torch.Tensor,
        text: TextEmbedding,
        temb: torch.Tensor,
        layout: ImplicitLayout | None = None,
    ) -> tuple[torch.Tensor, ImplicitLayout]:
        """Self- and cross-attention sublayers. With `layout`, the block's own query
        and key projections are skipped and the given attention map is consumed."""
        shift, scale, _, _ = self.modulation(temb).unsqueeze(1).chunk(4, dim=-1)
        h = h + self.self_attn(_modulate(self.norm1(h), shift, scale))
        if layout is None:
            out, layout = cross_attention(self.norm2(h), text, self.cross_attn)
        else:
            out = apply_shared_attention(layout, text, self.cross_attn)
        return h + out, layout

    def feed_forward(self, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        _, _, shift, scale = self.modulation(temb).unsqueeze(1).chunk(4, dim=-1)
        return h + self.ff(_modulate(self.norm3(h), shift, scale))

    def forward(
        self,
        h: torch.Tensor,
        text: TextEmbedding,
        temb: torch.Tensor,
        layout: ImplicitLayout | None = None,
    ) -> tuple[torch.Tensor, ImplicitLayout]:
        h, layout = self.attend(h, text, temb, layout)
        return self.feed_forward(h, temb), layout


class DenoisingBranch(nn.Module):
    """One transformer stack predicting the noise of a single modality's latent."""

    def __init__(self, spec: BranchSpec):
        super().__init__()
        self.spec = spec
        c, p = spec.width, spec.patch
        self.patch_in = nn.Linear(spec.channels * p * p, c)
        self.position = nn.Parameter(torch.randn(spec.tokens, c) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(c, c), nn.SiLU(), nn.Linear(c, c))
        self.blocks = nn.ModuleList(Block(spec) for _ in range(spec.layers))
        self.head_norm = nn.LayerNorm(c, elementwise_affine=False)
        self.head = nn.Linear(c, spec.channels * p * p)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def embed(self, z: torch.Tensor) -> torch.Tensor:
        expected = (self.spec.channels, self.spec.size, self.spec.size)
        if tuple(z.shape[1:]) != expected:
            raise ValueError(
                f"{self.spec.modality.value} latent must be (B, {', '.join(map(str, expected))}),"
                f" got {tuple(z.shape)}"
            )
        return codec.patchify(z, self.spec.patch, self.patch_in) + self.position

    def time(self, t: int | torch.Tensor, batch: int) -> torch.Tensor:
        emb = time_embedding(t, self.spec.width, self.position.dtype)
        emb = self.time_mlp(emb)
        return emb.expand(batch, -1) if emb.ndim == 1 else emb

    def predict(self, h: torch.Tensor) -> torch.Tensor:
        size = self.spec.size
        return codec.unpatchify(
            self.head(self.head_norm(h)), self.spec.patch, size, size
        )

    def forward(
        self, z: torch.Tensor, t: int | torch.Tensor, text: TextEmbedding
    ) -> torch.Tensor:
        """Stand-alone text-to-latent denoising, computing its own attention everywhere."""
        h = self.embed(z)
        temb = self.time(t, z.shape[0])
        for block in self.blocks:
            h, _ = block(h, text, temb)
        return self.predict(h)

    def attach_lora(self, rank: int, scale: float = 1.0):
        for module in self.modules():
            if isinstance(module, LoraLinear):
                module.attach(rank, scale)
        self.spec = replace(self.spec, lora_rank=rank, lora_scale=scale)


def init_mini_from_image(
    image_branch: DenoisingBranch, k: int, modality: Modality = Modality.depth
) -> DenoisingBranch:
    """A deep copy of the image branch truncated to its first `k` blocks."""
    if not 1 <= k <= len(image_branch.blocks):
        raise ValueError(
            f"k must lie in [1, {len(image_branch.blocks)}] for this image branch, got {k}"
        )
    mini = copy.deepcopy(image_branch)
    mini.blocks = nn.ModuleList(list(mini.blocks)[:k])
    mini.spec = replace(image_branch.spec, layers=k, modality=modality)
    return mini


def build_share_map(
    image_layers: int, mini_layers: int, start: int, end: int, stride: int
) -> list[tuple[int, int]]:
    """Pairs (image layer start + j * stride, annotation layer j)."""
    if not 0 <= start <= end < image_layers:
        raise ValueError(
            f"share range must satisfy 0 <= start <= end < {image_layers}, got ({start}, {end})"
        )
    if stride < 1:
        raise ValueError(f"share stride must be at least 1, got {stride}")
    pairs = [
        (start + j * stride, j)
        for j in range(mini_layers)
        if start + j * stride <= end
    ]
    if not pairs:
        raise ValueError("share map is empty")
    return pairs


class PretrainedBase(nn.Module):
    """Stage-A weights: the text encoder, the full image branch and the truncated
    copy destined for the annotation branches. No adapters are attached."""

    def __init__(self, config: ModelConfig, vocab_size: int, seed: int = 0):
        super().__init__()
        with utils.seeded(seed):
            self.text = TextEncoder(vocab_size, config.width, config.max_tokens)
            self.image = DenoisingBranch(branch_spec(config, Modality.image))
        self.mini = init_mini_from_image(self.image, config.mini_layers)

    def refresh_mini(self):
        self.mini = init_mini_from_image(self.image, len(self.mini.blocks))


class TideModel(nn.Module):
    """Image, depth and mask branches with the share map and per-site TAN layers.

    Annotation branches start as copies of `base.mini`. Every branch gets fresh
    LoRA adapters of its configured rank; TAN layers hold one exchange per share
    map pair.
    """

    def __init__(
        self,
        config: ModelConfig,
        base: PretrainedBase,
        seed: int = 0,
        max_timestep: int = 100,
    ):
        super().__init__()
        self.config = config
        self.max_timestep = max_timestep
        self.share_map = build_share_map(
            config.image_layers,
            config.mini_layers,
            config.share_start,
            config.share_end,
            config.share_stride,
        )
        self.text = copy.deepcopy(base.text)
        self.image = copy.deepcopy(base.image)
        self.depth = copy.deepcopy(base.mini)
        self.mask = copy.deepcopy(base.mini)
        self.depth.spec = replace(self.depth.spec, modality=Modality.depth)
        self.mask.spec = replace(self.mask.spec, modality=Modality.mask)
        with utils.seeded(seed):
            self.image.attach_lora(config.lora_rank_image, config.lora_scale)
            self.depth.attach_lora(config.lora_rank_depth, config.lora_scale)
            self.mask.attach_lora(config.lora_rank_mask, config.lora_scale)
            self.tan = (
                nn.ModuleDict(
                    {
                        m.value: nn.ModuleList(
                            TanLayer(
                                config.width,
                                config.width,
                                time_adaptive=config.tan_time_adaptive,
                                gate=config.tan_gate,
                            )
                            for _ in self.share_map
                        )
                        for m in Modality
                    }
                )
                if config.with_tan
                else None
            )

    def branch(self, modality: Modality) -> DenoisingBranch:
        return {
            Modality.image: self.image,
            Modality.depth: self.depth,
            Modality.mask: self.mask,
        }[modality]


def build_model(
    config: ModelConfig, vocab_size: int, seed: int = 0, max_timestep: int = 100
) -> TideModel:
    return TideModel(config, PretrainedBase(config, vocab_size, seed), seed, max_timestep)


@dataclass
class JointTrace:
    """Optional record of one forward_joint call.

    Attributes
    ----------
    image_layouts
        Attention map computed by each image layer.
    consumed
        Attention map used by each annotation layer, keyed by (modality, layer).
    hidden
        Features after each block, before any TAN exchange, keyed by (modality, layer).
    """

    image_layouts: dict[int, ImplicitLayout] = field(default_factory=dict)
    consumed: dict[tuple[Modality, int], ImplicitLayout] = field(default_factory=dict)
    hidden: dict[tuple[Modality, int], torch.Tensor] = field(default_factory=dict)


def forward_joint(
    z_i: torch.Tensor,
    z_d: torch.Tensor,
    z_m: torch.Tensor,
    t: int | torch.Tensor,
    text: TextEmbedding,
    model: TideModel,
    toggles: Toggles,
    trace: JointTrace | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Predict the noise of all three latents at timestep `t`.

    The image branch runs every layer. After image layer i, annotation layers up
    to the one paired with i run; the paired layer consumes the image layer's
    attention map when `toggles.ils`. Each paired layer triple is followed (or,
    with `tan_site = "before_ff"`, split before its feedforward) by a TAN exchange
    when `toggles.tan`: depth is modulated by mask features, mask by depth
    features, and image by both. Unpaired annotation layers run in order.
    """
    if not z_i.shape == z_d.shape == z_m.shape:
        raise ValueError(
            f"latent shapes disagree: {tuple(z_i.shape)}, {tuple(z_d.shape)}, {tuple(z_m.shape)}"
        )
    t_tensor = torch.as_tensor(t)
    if int(t_tensor.min()) < 0 or int(t_tensor.max()) > model.max_timestep:
        raise ValueError(f"timestep {t_tensor.tolist()} outside [0, {model.max_timestep}]")
    if toggles.tan and model.tan is None:
        raise ValueError("TAN requested but the model was built without TAN layers")

    batch = z_i.shape[0]
    modalities = tuple(Modality)
    branches = {m: model.branch(m) for m in modalities}
    h = {
        m: branches[m].embed(z)
        for m, z in zip(modalities, (z_i, z_d, z_m))
    }
    temb = {m: branches[m].time(t, batch) for m in modalities}
    x_t = time_embedding(t, model.config.width, z_i.dtype)
    if x_t.ndim == 1:
        x_t = x_t.expand(batch, -1)
    site_before_ff = model.config.tan_site == "before_ff"
    pairs = {i: (k, j) for k, (i, j) in enumerate(model.share_map)}
    mini_layers = len(model.depth.blocks)

    def exchange(site: int):
        assert model.tan is not None
        h_i, h_d, h_m = h[Modality.image], h[Modality.depth], h[Modality.mask]
        h[Modality.depth] = tan_modulate(h_d, h_m, x_t, model.tan["depth"][site])
        h[Modality.mask] = tan_modulate(h_m, h_d, x_t, model.tan["mask"][site])
        h[Modality.image] = tan_modulate_dual(h_i, h_d, h_m, x_t, model.tan["image"][site])

    def record(m: Modality, layer: int):
        if trace is not None:
            trace.hidden[(m, layer)] = h[m]

    def run_unpaired(j: int):
        for m in Modality.annotations():
            h[m], layout = branches[m].blocks[j](h[m], text, temb[m])
            if trace is not None:
                trace.consumed[(m, j)] = layout
            record(m, j)

    next_mini = 0
    for i, block in enumerate(model.image.blocks):
        if i not in pairs:
            h[Modality.image], layout = block(h[Modality.image], text, temb[Modality.image])
            if trace is not None:
                trace.image_layouts[i] = layout
            record(Modality.image, i)
            continue

        site, j = pairs[i]
        while next_mini < j:
            run_unpaired(next_mini)
            next_mini += 1
        h[Modality.image], layout = block.attend(
            h[Modality.image], text, temb[Modality.image]
        )
        if trace is not None:
            trace.image_layouts[i] = layout
        mini_blocks = {m: branches[m].blocks[j] for m in Modality.annotations()}
        for m, mini_block in mini_blocks.items():
            h[m], consumed = mini_block.attend(
                h[m], text, temb[m], layout if toggles.ils else None
            )
            if trace is not None:
                trace.consumed[(m, j)] = consumed
        if toggles.tan and site_before_ff:
            exchange(site)
        h[Modality.image] = block.feed_forward(h[Modality.image], temb[Modality.image])
        for m, mini_block in mini_blocks.items():
            h[m] = mini_block.feed_forward(h[m], temb[m])
        record(Modality.image, i)
        for m in Modality.annotations():
            record(m, j)
        if toggles.tan and not site_before_ff:
            exchange(site)
        next_mini = j + 1

    while next_mini < mini_layers:
        run_unpaired(next_mini)
        next_mini += 1

    logger.opt(lazy=True).trace(
        "forward_joint t={t} toggles={tg}", t=lambda: t_tensor.tolist(), tg=lambda: toggles
    )
    eps_i, eps_d, eps_m = (branches[m].predict(h[m]) for m in modalities)
    return eps_i, eps_d, eps_m


def trainable_parameters(model: nn.Module) -> dict[str, nn.Parameter]:
    """Exactly the LoRA adapter and TAN layer tensors, by parameter name."""
    owned: set[int] = set()
    for module in model.modules():
        if isinstance(module, (LoraAdapter, TanLayer)):
            owned.update(id(p) for p in module.parameters())
    return {name: p for name, p in model.named_parameters() if id(p) in owned}


def freeze_for_finetune(model: nn.Module) -> dict[str, nn.Parameter]:
    """Mark exactly `trainable_parameters(model)` as requiring gradients."""
    trainable = trainable_parameters(model)
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
    return trainable


@grad_unit("patch_embed")
def _patch_embed_unit(probe, g):
    b, c, patch = probe["batch"], probe["width"], 2
    embed = nn.Linear(3 * patch * patch, c).double()
    x = torch.randn(b, 3, 2 * patch, 2 * patch, generator=g, dtype=torch.float64)
    return embed, lambda: codec.patchify(x, patch, embed)
