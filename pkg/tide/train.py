"""Two-stage training.

Stage A trains the text encoder and the full image branch on text-to-image
denoising, then copies the first blocks into a mini branch and trains that copy
on the same task. Stage B builds the tri-branch model from a stage-A checkpoint
and trains only LoRA adapters and TAN layers on the sum of the three branch
denoising losses.

A checkpoint is a directory::

    metadata.json              stage, step, configuration, vocabulary, grammar,
                               loss history and per-file crc32c checksums
    params/<name>.tide         one tensor file per model parameter
    optim/<index>.<key>.tide   optimizer moments and step counts
    rng_state.tide             noise generator state (uint8)

A training run writes a series of them as `<out>/step-XXXXXX/`.
"""

import json
import time
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np
import torch
from loguru import logger
from torch import nn
from tqdm import tqdm

from . import codec, utils
from .datatypes import (
    IntegrityError,
    LossReport,
    ModelConfig,
    NonFiniteLossError,
    Quadruple,
    RunConfig,
    SceneGrammar,
    Toggles,
)
from .model import (
    DenoisingBranch,
    PretrainedBase,
    TideModel,
    forward_joint,
    freeze_for_finetune,
)
from .nn import TextEncoder, Vocabulary, grad_unit, pad_tokens, tokenize
from .schedule import NoiseSchedule, from_config, q_sample
from .tensorfile import read_tensor, write_tensor

CHECKPOINT_FORMAT = 1

# Model keys fixed by stage A; stage B inherits them from its init checkpoint.
ARCHITECTURE_KEYS = (
    "size",
    "channels",
    "patch",
    "width",
    "heads",
    "ff_mult",
    "max_tokens",
    "image_layers",
    "mini_layers",
)

# Noise streams of the training phases.
_STREAMS = {"image": 1, "mini": 2, "joint": 3}


# ============================================================================
# ===============                    DATA                     ================
# ============================================================================


@dataclass
class Batch:
    image: torch.Tensor
    depth: torch.Tensor
    mask: torch.Tensor
    tokens: torch.Tensor
    token_mask: torch.Tensor

    @property
    def size(self) -> int:
        return self.image.shape[0]


class TrainingData:
    """A dataset encoded once into latents and token lists."""

    def __init__(self, records: list[Quadruple], vocab: Vocabulary, palette: codec.Palette):
        if not records:
            raise ValueError("Cannot train on an empty dataset")
        self.image = codec.image_latent(np.stack([q.image for q in records]))
        self.depth = codec.depth_latent(np.stack([q.depth for q in records]))
        self.mask = codec.mask_latent(np.stack([q.mask for q in records]), palette)
        self.tokens = [tokenize(q.caption, vocab) for q in records]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def grid(self) -> int:
        return self.image.shape[-1]

    def batch(self, indices: list[int]) -> Batch:
        tokens, token_mask = pad_tokens([self.tokens[i] for i in indices])
        index = torch.tensor(indices, dtype=torch.long)
        return Batch(
            image=self.image[index],
            depth=self.depth[index],
            mask=self.mask[index],
            tokens=tokens,
            token_mask=token_mask,
        )


@lru_cache(maxsize=8)
def _epoch_order(n: int, seed: int, epoch: int) -> tuple[int, ...]:
    return tuple(torch.randperm(n, generator=utils.generator(seed, epoch)).tolist())


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> list[int]:
    """Record indices of batch `step`: consecutive slices of per-epoch permutations,
    depending only on (step, n, batch_size, seed)."""
    indices = []
    for k in range(batch_size):
        epoch, offset = divmod(step * batch_size + k, n)
        indices.append(_epoch_order(n, seed, epoch)[offset])
    return indices


# ============================================================================
# ===============                    STEPS                    ================
# ============================================================================


def denoising_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if eps_hat.shape != eps.shape:
        raise ValueError(
            f"prediction shape {tuple(eps_hat.shape)} != target shape {tuple(eps.shape)}"
        )
    return ((eps_hat - eps) ** 2).mean()


def _draw(
    batch: int, schedule: NoiseSchedule, g: torch.Generator, shape: torch.Size, count: int
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    t = torch.randint(1, schedule.T + 1, (batch,), generator=g)
    return t, [torch.randn(shape, generator=g) for _ in range(count)]


def pretrain_step(
    batch: Batch,
    branch: DenoisingBranch,
    encoder: TextEncoder,
    schedule: NoiseSchedule,
    g: torch.Generator,
    optimizer: torch.optim.Optimizer,
    step: int = 0,
) -> float:
    """One text-to-image denoising step on the image latents of `batch`."""
    t, (eps,) = _draw(batch.size, schedule, g, batch.image.shape, 1)
    z_t = q_sample(batch.image, t, eps, schedule)
    text = encoder(batch.tokens, batch.token_mask)
    loss = denoising_loss(branch(z_t, t, text), eps)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"step {step}: non-finite text-to-image loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


def joint_losses(
    batch: Batch,
    model: TideModel,
    schedule: NoiseSchedule,
    g: torch.Generator,
    toggles: Toggles,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Branch losses with one timestep per sample shared by all three branches and
    independent noise per modality."""
    t, (eps_i, eps_d, eps_m) = _draw(batch.size, schedule, g, batch.image.shape, 3)
    z_i = q_sample(batch.image, t, eps_i, schedule)
    z_d = q_sample(batch.depth, t, eps_d, schedule)
    z_m = q_sample(batch.mask, t, eps_m, schedule)
    text = model.text(batch.tokens, batch.token_mask)
    out_i, out_d, out_m = forward_joint(z_i, z_d, z_m, t, text, model, toggles)
    return (
        denoising_loss(out_i, eps_i),
        denoising_loss(out_d, eps_d),
        denoising_loss(out_m, eps_m),
    )


def joint_step(
    batch: Batch,
    model: TideModel,
    schedule: NoiseSchedule,
    g: torch.Generator,
    optimizer: torch.optim.Optimizer,
    toggles: Toggles,
    step: int = 0,
) -> LossReport:
    """One stage-B step on L = L_image + L_depth + L_mask.

    Only parameters held by `optimizer` change; callers pass exactly the
    trainable LoRA and TAN tensors.
    """
    if batch.size == 0:
        raise ValueError("joint_step needs a non-empty batch")
    l_i, l_d, l_m = joint_losses(batch, model, schedule, g, toggles)
    total = l_i + l_d + l_m
    image, depth, mask = l_i.item(), l_d.item(), l_m.item()
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"step {step}: non-finite loss (image={image}, depth={depth}, mask={mask})"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return LossReport(step=step, image=image, depth=depth, mask=mask, total=image + depth + mask)


@grad_unit("joint_loss")
def _joint_loss_unit(probe, g):
    config = ModelConfig(
        size=4,
        patch=2,
        width=probe["width"] + probe["width"] % 2,
        heads=1,
        ff_mult=2,
        max_tokens=8,
        image_layers=2,
        mini_layers=2,
        share_start=0,
        share_end=1,
        share_stride=1,
        lora_rank_image=2,
        lora_rank_depth=2,
        lora_rank_mask=2,
    )
    model = TideModel(config, PretrainedBase(config, vocab_size=10), max_timestep=10)
    for branch in (model.image, model.depth, model.mask):
        nn.init.normal_(branch.head.weight, std=0.3)
        for block in branch.blocks:
            nn.init.normal_(block.modulation[1].weight, std=0.1)
    model = model.double()
    freeze_for_finetune(model)
    b = probe["batch"]
    shape = (b, 3, 4, 4)
    latents = [torch.randn(shape, generator=g, dtype=torch.float64) for _ in range(3)]
    targets = [torch.randn(shape, generator=g, dtype=torch.float64) for _ in range(3)]
    tokens = torch.randint(0, 10, (b, probe["tokens"]), generator=g)
    t = torch.randint(1, 11, (b,), generator=g)

    def loss() -> torch.Tensor:
        text = model.text(tokens)
        outs = forward_joint(*latents, t, text, model, Toggles(ils=True, tan=True))
        l_i, l_d, l_m = (denoising_loss(o, e) for o, e in zip(outs, targets))
        return l_i + l_d + l_m

    return model, loss


# ============================================================================
# ===============                 CHECKPOINTS                 ================
# ============================================================================


@dataclass
class Checkpoint:
    """A loaded checkpoint directory."""

    path: Path
    stage: str
    step: int
    config: RunConfig
    vocab: Vocabulary
    grammar: SceneGrammar
    module: nn.Module
    history: list[dict[str, Any]]
    optimizer_state: dict[str, Any] | None
    rng_state: torch.Tensor | None
    phase: str | None = None

    @property
    def palette(self) -> codec.Palette:
        return codec.Palette.default(self.grammar.category_names)

    @property
    def toggles(self) -> Toggles:
        return self.config.train.toggles

    @property
    def model(self) -> TideModel:
        if not isinstance(self.module, TideModel):
            raise ValueError(f"{self.path} is a stage-{self.stage} checkpoint, not a tri-branch model")
        return self.module

    def loss_reports(self) -> list[LossReport]:
        names = {f.name for f in fields(LossReport)}
        return [LossReport(**{k: v for k, v in h.items() if k in names}) for h in self.history]


def step_dir(out_dir: str | Path, step: int) -> Path:
    return Path(out_dir) / f"step-{step:06d}"


def resolve_checkpoint(path: str | Path) -> Path:
    """A checkpoint directory, or the latest `step-*` checkpoint inside a series."""
    path = Path(path)
    if (path / "metadata.json").is_file():
        return path
    steps = sorted(p for p in path.glob("step-*") if (p / "metadata.json").is_file())
    if not steps:
        raise IntegrityError(f"No checkpoint found at {path}")
    return steps[-1]


def save_checkpoint(
    directory: str | Path,
    module: nn.Module,
    *,
    stage: str,
    step: int,
    config: RunConfig,
    vocab: Vocabulary,
    grammar: SceneGrammar,
    history: list[dict[str, Any]],
    optimizer: torch.optim.Optimizer | None = None,
    rng: torch.Generator | None = None,
    phase: str | None = None,
) -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    checksums: dict[str, int] = {}
    for name, tensor in module.state_dict().items():
        rel = f"params/{name}.tide"
        checksums[rel] = write_tensor(directory / rel, tensor.detach().float())

    param_groups = None
    if optimizer is not None:
        (directory / "optim").mkdir(exist_ok=True)
        state = optimizer.state_dict()
        for index, entries in state["state"].items():
            for key, value in entries.items():
                rel = f"optim/{index}.{key}.tide"
                checksums[rel] = write_tensor(
                    directory / rel, torch.as_tensor(value, dtype=torch.float32)
                )
        param_groups = state["param_groups"]
    if rng is not None:
        checksums["rng_state.tide"] = write_tensor(directory / "rng_state.tide", rng.get_state())

    metadata = {
        "format_version": CHECKPOINT_FORMAT,
        "stage": stage,
        "phase": phase,
        "step": step,
        "config": config.to_dict(),
        "vocab": vocab.to_list(),
        "grammar": grammar.to_dict(),
        "param_groups": param_groups,
        "history": history,
        "checksums": checksums,
    }
    (directory / "metadata.json").write_text(json.dumps(metadata, indent=1), encoding="utf-8")
    logger.debug(f"Saved stage-{stage} checkpoint at step {step} to {directory}")
    return directory


def _build_module(stage: str, config: RunConfig, vocab_size: int) -> nn.Module:
    if stage == "A":
        return PretrainedBase(config.model, vocab_size)
    base = PretrainedBase(config.model, vocab_size)
    return TideModel(config.model, base, config.train.seed, config.schedule.T)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = resolve_checkpoint(path)
    try:
        metadata = json.loads((path / "metadata.json").read_text(encoding="utf-8"))
        if metadata["format_version"] != CHECKPOINT_FORMAT:
            raise IntegrityError(f"{path}: unsupported checkpoint format {metadata['format_version']}")
        stage = metadata["stage"]
        checksums = metadata["checksums"]
        config = RunConfig.from_dict(metadata["config"])
        vocab = Vocabulary(metadata["vocab"])
        grammar = SceneGrammar(metadata["grammar"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise IntegrityError(f"{path}: malformed checkpoint metadata: {e}") from e

    def load(rel: str) -> torch.Tensor:
        if rel not in checksums:
            raise IntegrityError(f"{path}: no checksum recorded for {rel}")
        return torch.from_numpy(read_tensor(path / rel, checksum=checksums[rel]))

    module = _build_module(stage, config, len(vocab))
    state = {name: load(f"params/{name}.tide") for name in module.state_dict()}
    module.load_state_dict(state)

    optimizer_state = None
    if metadata.get("param_groups") is not None:
        moments: dict[int, dict[str, torch.Tensor]] = {}
        for rel in checksums:
            if rel.startswith("optim/"):
                index, key = Path(rel).name.removesuffix(".tide").split(".", 1)
                moments.setdefault(int(index), {})[key] = load(rel)
        groups = metadata["param_groups"]
        for group in groups:
            if "betas" in group:
                group["betas"] = tuple(group["betas"])
        optimizer_state = {"state": moments, "param_groups": groups}
    rng_state = load("rng_state.tide") if "rng_state.tide" in checksums else None

    return Checkpoint(
        path=path,
        stage=stage,
        step=int(metadata["step"]),
        config=config,
        vocab=vocab,
        grammar=grammar,
        module=module,
        history=list(metadata["history"]),
        optimizer_state=optimizer_state,
        rng_state=rng_state,
        phase=metadata.get("phase"),
    )


# ============================================================================
# ===============                    LOOPS                    ================
# ============================================================================


def _noise(seed: int, stream: str) -> torch.Generator:
    return utils.generator(seed, _STREAMS[stream])


def _due(step: int, total: int, every: int) -> bool:
    return step % every == 0 or step == total


def _check_grid(data: TrainingData, config: ModelConfig):
    if data.grid != config.size:
        raise ValueError(f"dataset grid {data.grid} != model grid {config.size}")


def train_stage_a(
    config: RunConfig,
    records: list[Quadruple],
    grammar: SceneGrammar,
    out_dir: str | Path,
) -> Path:
    """Train the text encoder and image branch, then the truncated mini branch."""
    train_cfg = config.train
    vocab = Vocabulary(grammar.vocabulary_words())
    palette = codec.Palette.default(grammar.category_names)
    schedule = from_config(config.schedule)
    data = TrainingData(records, vocab, palette)
    _check_grid(data, config.model)
    base = PretrainedBase(config.model, len(vocab), train_cfg.seed)
    base.train()
    history: list[dict[str, Any]] = []
    total = train_cfg.iterations + train_cfg.mini_iterations
    generators = {phase: _noise(train_cfg.seed, phase) for phase in ("image", "mini")}

    def save(step: int, phase: str) -> Path:
        return save_checkpoint(
            step_dir(out_dir, step),
            base,
            stage="A",
            step=step,
            config=config,
            vocab=vocab,
            grammar=grammar,
            history=history,
            phase=phase,
            rng=generators[phase],
        )

    save(0, "image")
    offset = 0
    for phase, iterations in (
        ("image", train_cfg.iterations),
        ("mini", train_cfg.mini_iterations),
    ):
        if phase == "image":
            branch = base.image
            params = [*base.text.parameters(), *base.image.parameters()]
        else:
            base.refresh_mini()
            base.text.requires_grad_(False)
            branch = base.mini
            params = list(base.mini.parameters())
        optimizer = torch.optim.AdamW(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
        g = generators[phase]
        start = time.time()
        for step in tqdm(range(iterations), desc=f"stage A ({phase})", disable=iterations == 0):
            batch = data.batch(batch_indices(step, len(data), train_cfg.batch_size, train_cfg.seed))
            loss = pretrain_step(batch, branch, base.text, schedule, g, optimizer, offset + step)
            history.append({"phase": phase, "step": offset + step, "loss": loss})
            done = offset + step + 1
            if done < total and done % train_cfg.checkpoint_every == 0:
                save(done, phase)
        offset += iterations
        if iterations:
            logger.info(
                f"Stage A {phase}: {iterations} steps in {time.time() - start:.1f}s,"
                f" final loss {history[-1]['loss']:.4f}"
            )
    base.text.requires_grad_(True)
    last = save(total, "mini")
    logger.success(f"Stage A finished; checkpoint at {last}")
    return last


def stage_b_config(config: RunConfig, base: Checkpoint) -> RunConfig:
    """Take the architecture keys from the stage-A checkpoint."""
    inherited = {k: getattr(base.config.model, k) for k in ARCHITECTURE_KEYS}
    differing = {k: v for k, v in inherited.items() if getattr(config.model, k) != v}
    if differing:
        logger.warning(f"Using the stage-A architecture for {sorted(differing)}")
    return replace(config, model=replace(config.model, **inherited))


def train_stage_b(
    config: RunConfig,
    records: list[Quadruple],
    out_dir: str | Path,
    init: str | Path | None = None,
    resume: str | Path | None = None,
) -> Path:
    """Joint LoRA + TAN fine-tuning, from a stage-A checkpoint or resuming a stage-B one."""
    ckpt: Checkpoint | None = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.stage != "B":
            raise ValueError(f"Cannot resume stage B from a stage-{ckpt.stage} checkpoint")
        target = config.train.iterations
        config = replace(ckpt.config, train=replace(ckpt.config.train, iterations=target))
        model = ckpt.model
        vocab, grammar = ckpt.vocab, ckpt.grammar
        step0, history = ckpt.step, ckpt.history
        logger.info(f"Resuming stage B from {ckpt.path} at step {step0}")
    else:
        if init is None:
            raise ValueError("Stage B needs a stage-A checkpoint to start from")
        base = load_checkpoint(init)
        if base.stage != "A":
            raise ValueError(f"{base.path} is a stage-{base.stage} checkpoint, expected stage A")
        config = stage_b_config(config, base)
        config = replace(config, train=replace(config.train, stage="B"))
        vocab, grammar = base.vocab, base.grammar
        model = TideModel(config.model, base.module, config.train.seed, config.schedule.T)  # type: ignore[arg-type]
        step0, history = 0, []

    train_cfg = config.train
    toggles = train_cfg.toggles
    schedule = from_config(config.schedule)
    palette = codec.Palette.default(grammar.category_names)
    data = TrainingData(records, vocab, palette)
    _check_grid(data, config.model)

    trainable = freeze_for_finetune(model)
    if not trainable:
        raise ValueError("Model has no LoRA or TAN parameters to train")
    optimizer = torch.optim.AdamW(
        list(trainable.values()), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay
    )
    g = _noise(train_cfg.seed, "joint")
    if ckpt is not None:
        if ckpt.optimizer_state is None or ckpt.rng_state is None:
            raise IntegrityError(f"{ckpt.path} lacks optimizer or RNG state")
        optimizer.load_state_dict(ckpt.optimizer_state)
        g.set_state(ckpt.rng_state)
    model.train()
    logger.info(
        f"Stage B: {sum(p.numel() for p in trainable.values())} trainable values,"
        f" toggles {toggles}, share map {model.share_map}"
    )

    def save(step: int) -> Path:
        return save_checkpoint(
            step_dir(out_dir, step),
            model,
            stage="B",
            step=step,
            config=config,
            vocab=vocab,
            grammar=grammar,
            history=history,
            optimizer=optimizer,
            rng=g,
        )

    last = ckpt.path if ckpt is not None else save(0)
    start = time.time()
    iterations = train_cfg.iterations
    for step in tqdm(range(step0, iterations), desc="stage B", disable=iterations <= step0):
        batch = data.batch(batch_indices(step, len(data), train_cfg.batch_size, train_cfg.seed))
        report = joint_step(batch, model, schedule, g, optimizer, toggles, step)
        history.append(asdict(report))
        logger.opt(lazy=True).debug("{r}", r=lambda: report)
        if _due(step + 1, iterations, train_cfg.checkpoint_every):
            last = save(step + 1)
    if iterations > step0:
        logger.info(
            f"Stage B: {iterations - step0} steps in {time.time() - start:.1f}s,"
            f" final loss {history[-1]['total']:.4f}"
        )
    logger.success(f"Stage B finished; checkpoint at {last}")
    return last


def train(
    config: RunConfig,
    records: list[Quadruple],
    grammar: SceneGrammar,
    out_dir: str | Path,
    init: str | Path | None = None,
    resume: str | Path | None = None,
) -> Path:
    """Run the configured stage and return the last checkpoint written."""
    if config.train.stage == "A":
        if resume is not None:
            raise ValueError("Resuming is supported for stage B only")
        return train_stage_a(config, records, grammar, out_dir)
    return train_stage_b(config, records, out_dir, init=init, resume=resume)
