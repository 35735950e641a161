"""Lockstep reverse diffusion of the image, depth and mask branches."""

from collections.abc import Iterable
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch
from loguru import logger
from tqdm import tqdm

from . import codec, utils
from .datatypes import Modality, Quadruple, SynthesisJob, Toggles
from .model import TideModel, forward_joint
from .nn import Vocabulary, encode_text, tokenize
from .scenes import expand_captions, write_dataset
from .schedule import NoiseSchedule, ddpm_step, from_config, respace
from .train import Checkpoint, load_checkpoint

# Counter keys of the noise streams; the initial latent is step key 0.
_BRANCH_KEYS = {Modality.image: 0, Modality.depth: 1, Modality.mask: 2}


def _noise(seed: int, modality: Modality, step: int, shape: tuple[int, ...]) -> torch.Tensor:
    return torch.randn(shape, generator=utils.generator(seed, _BRANCH_KEYS[modality], step))


def sample_triple(
    caption: str,
    steps: int,
    seed: int,
    model: TideModel,
    schedule: NoiseSchedule,
    toggles: Toggles,
    vocab: Vocabulary,
    palette: codec.Palette,
) -> Quadruple:
    """Generate an aligned (image, depth, mask) triple for `caption`.

    All branches start from independent seeded noise and run the same timestep
    sequence, one joint forward pass per step. With fewer steps than the schedule
    length, an evenly spaced subset of timesteps is used with retimed
    coefficients. Reverse noise for branch b at step k comes from a generator
    keyed by (seed, b, k), so results do not depend on evaluation order.
    """
    if not 1 <= steps <= schedule.T:
        raise ValueError(f"steps must lie in [1, {schedule.T}], got {steps}")
    timesteps, retimed = respace(schedule, steps)
    size, channels = model.config.size, model.config.channels
    shape = (1, channels, size, size)
    modalities = tuple(Modality)

    model.eval()
    with torch.no_grad():
        text = encode_text(torch.tensor([tokenize(caption, vocab)]), model.text)
        z = {m: _noise(seed, m, 0, shape) for m in modalities}
        for k in range(steps, 0, -1):
            eps = forward_joint(
                z[Modality.image],
                z[Modality.depth],
                z[Modality.mask],
                timesteps[k - 1],
                text,
                model,
                toggles,
            )
            for m, eps_hat in zip(modalities, eps):
                noise = _noise(seed, m, k, shape) if k > 1 else None
                z[m] = ddpm_step(z[m], eps_hat, k, retimed, noise)

    image = codec.latent_image(z[Modality.image])[0]
    depth = codec.latent_depth(z[Modality.depth])[0]
    mask = codec.latent_mask(z[Modality.mask], palette)[0]
    return Quadruple(
        image=image.numpy().astype(np.float32),
        depth=depth.numpy().astype(np.float32),
        mask=mask.numpy().astype(np.uint8),
        caption=caption,
    )


def sample_from_checkpoint(
    checkpoint: Checkpoint, caption: str, steps: int, seed: int, toggles: Toggles | None = None
) -> Quadruple:
    return sample_triple(
        caption,
        steps,
        seed,
        checkpoint.model,
        from_config(checkpoint.config.schedule),
        toggles or checkpoint.toggles,
        checkpoint.vocab,
        checkpoint.palette,
    )


_worker_checkpoint: Checkpoint | None = None


def _init_worker(path: str):
    global _worker_checkpoint
    torch.set_num_threads(1)
    _worker_checkpoint = load_checkpoint(path)


def _run_job(job: SynthesisJob, steps: int) -> Quadruple:
    assert _worker_checkpoint is not None
    return sample_from_checkpoint(_worker_checkpoint, job.caption, steps, job.seed)


def batch_synthesize(
    captions: Iterable[str],
    n_per_caption: int,
    out_dir: str | Path,
    checkpoint: str | Path,
    steps: int,
    seed: int = 0,
    workers: int = 1,
) -> Path:
    """Sample `n_per_caption` triples per unique caption and write them as a dataset.

    Returns the manifest path. Records appear in job order regardless of `workers`.
    """
    jobs = expand_captions(captions, n_per_caption, seed)
    ckpt = load_checkpoint(checkpoint)
    logger.info(f"Synthesizing {len(jobs)} triples from {ckpt.path} with {steps} steps")
    if workers > 1:
        with ProcessPoolExecutor(
            workers, initializer=_init_worker, initargs=(str(ckpt.path),)
        ) as executor:
            futures = [executor.submit(_run_job, job, steps) for job in jobs]
            records = [f.result() for f in tqdm(futures, desc="synthesize")]
    else:
        records = [
            sample_from_checkpoint(ckpt, job.caption, steps, job.seed)
            for job in tqdm(jobs, desc="synthesize")
        ]
    manifest = write_dataset(records, out_dir, ckpt.grammar)
    logger.success(f"Wrote {len(records)} synthesized records to {manifest.parent}")
    return manifest
