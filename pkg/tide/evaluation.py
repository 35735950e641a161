"""Depth and segmentation metrics, cross-modal consistency scoring and ablation sweeps.

Tables produced here are pandas DataFrames; `report_csv` renders them as the
UTF-8 comma-separated text the CLI writes, with the columns listed in
`DEPTH_COLUMNS`, `CONSISTENCY_COLUMNS` and `ABLATION_COLUMNS`.
"""

import time
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
from loguru import logger
from more_itertools import unique_everseen
from tabulate import tabulate
from tqdm import tqdm

from .datatypes import (
    ConsistencyReport,
    DepthMetrics,
    Quadruple,
    RunConfig,
    SceneGrammar,
    SegmentationScore,
    Toggles,
)
from .sample import sample_from_checkpoint
from .scenes import caption_condition, classify_image, rule_depth
from .train import load_checkpoint, train

DEPTH_COLUMNS = [f.name for f in fields(DepthMetrics)]
CONSISTENCY_COLUMNS = ["id", "caption", "mask_image_miou", "depth_mask_spearman"]
ABLATION_COLUMNS = [
    "variant",
    "ils",
    "tan",
    "time_adaptive",
    "share",
    "n_samples",
    "mask_image_miou",
    "depth_mask_spearman",
    "depth_undefined",
]
TOGGLE_VARIANTS = ("ils_only", "tan_only", "both", "neither")
POSITION_VARIANTS = ("first_half", "second_half", "whole")
TIME_GATE_VARIANTS = ("time_adaptive", "constant_gate")


def report_csv(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, lineterminator="\n")


def log_table(df: pd.DataFrame, title: str):
    logger.info(
        f"{title}\n\n"
        + tabulate(df, headers="keys", showindex=False, floatfmt=".4f")
        + "\n"
    )


# ============================================================================
# ===============                    DEPTH                    ================
# ============================================================================


def depth_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    valid: np.ndarray | None = None,
    median_align: bool = False,
) -> DepthMetrics:
    """Standard monocular depth errors over the valid pixels.

    Parameters
    ----------
    pred, gt
        Depth grids of equal shape, strictly positive on valid pixels.
    valid
        Boolean grid selecting the pixels to score; all pixels if None.
    median_align
        Scale `pred` by median(gt) / median(pred) before scoring.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if valid is None:
        valid = np.ones(gt.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != gt.shape:
        raise ValueError(f"valid shape {valid.shape} != gt shape {gt.shape}")
    p, g = pred[valid], gt[valid]
    if p.size == 0:
        raise ValueError("No valid pixels to score")
    if not (np.all(p > 0) and np.all(g > 0)):
        raise ValueError("Depths must be strictly positive on valid pixels")
    if median_align:
        p = p * (np.median(g) / np.median(p))

    diff = g - p
    log_err = np.log(p) - np.log(g)
    ratio = np.maximum(g / p, p / g)
    return DepthMetrics(
        si_log=float(100.0 * np.sqrt(np.var(log_err))),
        a_rel=float(np.mean(np.abs(diff) / g)),
        log10=float(np.mean(np.abs(np.log10(g) - np.log10(p)))),
        rmse=float(np.sqrt(np.mean(diff**2))),
        s_rel=float(np.mean(diff**2 / g)),
        rmse_log=float(np.sqrt(np.mean(log_err**2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def depth_metrics_over(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    valids: Sequence[np.ndarray] | None = None,
    median_align: bool = False,
    pooled: bool = False,
) -> DepthMetrics:
    """Aggregate depth metrics over several images.

    By default every image is scored on its own and the metrics are averaged.
    With `pooled`, the valid pixels of all images are scored together (median
    alignment, if requested, still happens per image).
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if len(preds) == 0:
        raise ValueError("No images to score")
    if valids is None:
        valids = [np.ones(np.shape(g), dtype=bool) for g in gts]
    if not pooled:
        return DepthMetrics.mean(
            [depth_metrics(p, g, v, median_align) for p, g, v in zip(preds, gts, valids)]
        )
    flat_p, flat_g = [], []
    for p, g, v in zip(preds, gts, valids):
        p = np.asarray(p, dtype=np.float64)[np.asarray(v, dtype=bool)]
        g = np.asarray(g, dtype=np.float64)[np.asarray(v, dtype=bool)]
        if median_align and p.size:
            p = p * (np.median(g) / np.median(p))
        flat_p.append(p)
        flat_g.append(g)
    return depth_metrics(np.concatenate(flat_p), np.concatenate(flat_g))


# ============================================================================
# ===============                SEGMENTATION                 ================
# ============================================================================


def miou(pred: np.ndarray, gt: np.ndarray, num_categories: int) -> SegmentationScore:
    """Per-category intersection over union and their mean.

    Categories absent from both grids get NaN and are left out of the mean.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    k = num_categories
    for name, grid in (("pred", pred), ("gt", gt)):
        if grid.size and (grid.min() < 0 or grid.max() >= k):
            raise ValueError(f"{name} holds category ids outside [0, {k})")
    confusion = np.bincount(
        k * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel(), minlength=k * k
    ).reshape(k, k)
    intersection = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - intersection
    included = union > 0
    if not included.any():
        raise ValueError("No category occurs in either grid")
    iou = np.full(k, np.nan)
    iou[included] = intersection[included] / union[included]
    return SegmentationScore(iou=iou, mean=float(np.mean(iou[included])))


def miou_over(
    preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], num_categories: int, pooled: bool = False
) -> float:
    if len(preds) != len(gts) or len(preds) == 0:
        raise ValueError(f"Need matching, non-empty grid lists, got {len(preds)} and {len(gts)}")
    if pooled:
        return miou(
            np.concatenate([np.ravel(p) for p in preds]),
            np.concatenate([np.ravel(g) for g in gts]),
            num_categories,
        ).mean
    return float(np.mean([miou(p, g, num_categories).mean for p, g in zip(preds, gts)]))


def evaluate_prediction(
    preds: Iterable[Quadruple],
    gts: Iterable[Quadruple],
    num_categories: int,
    median_align: bool = False,
    pooled: bool = False,
) -> pd.DataFrame:
    """Score predicted depth and masks against ground-truth records, paired in order.

    Pixels where either depth is zero are excluded from the depth metrics.
    """
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predicted records for {len(gts)} ground-truth records")
    pairs = [(p, g) for p, g in zip(preds, gts) if np.any((p.depth > 0) & (g.depth > 0))]
    if len(pairs) < len(preds):
        logger.warning(f"Skipping {len(preds) - len(pairs)} records with no positive depth")
    if not pairs:
        raise ValueError("No record has positive depth to score")
    depth = depth_metrics_over(
        [p.depth for p, _ in pairs],
        [g.depth for _, g in pairs],
        [(p.depth > 0) & (g.depth > 0) for p, g in pairs],
        median_align=median_align,
        pooled=pooled,
    )
    row = {
        "n": len(preds),
        **asdict(depth),
        "miou": miou_over([p.mask for p in preds], [g.mask for g in gts], num_categories, pooled),
    }
    return pd.DataFrame([row])


# ============================================================================
# ===============                CONSISTENCY                  ================
# ============================================================================


def spearman(a: np.ndarray, b: np.ndarray) -> float | None:
    """Spearman rank correlation of two grids, None if either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    rho = pd.DataFrame({"a": a, "b": b}).corr(method="spearman").iloc[0, 1]
    return None if pd.isna(rho) else float(rho)


def consistency_report(triple: Quadruple, grammar: SceneGrammar) -> ConsistencyReport:
    """Agreement of a generated triple with itself.

    Mask-image agreement is the mIoU between the mask read off the image's
    colors and the generated mask, after undoing any condition the caption
    names. Depth-mask agreement is the Spearman correlation between the
    generated depth and the depth the grammar's rule implies for the generated
    mask; it is undefined (None) when the mask holds a single category or the
    depth is constant.
    """
    k = grammar.num_categories
    condition = caption_condition(triple.caption, grammar)
    agreement = miou(classify_image(triple.image, grammar, condition), triple.mask, k).mean
    rho = None
    if np.unique(triple.mask).size < 2:
        logger.debug(f"Single-category mask for {triple.caption!r}; depth agreement undefined")
    else:
        rho = spearman(triple.depth, rule_depth(triple.mask, grammar))
    return ConsistencyReport(mask_image_miou=agreement, depth_mask_spearman=rho)


def consistency_table(records: Iterable[Quadruple], grammar: SceneGrammar) -> pd.DataFrame:
    rows = []
    for index, q in enumerate(records):
        report = consistency_report(q, grammar)
        rows.append(
            {
                "id": f"{index:06d}",
                "caption": q.caption,
                "mask_image_miou": report.mask_image_miou,
                "depth_mask_spearman": report.depth_mask_spearman,
            }
        )
    return pd.DataFrame(rows, columns=CONSISTENCY_COLUMNS)


def summarize_consistency(df: pd.DataFrame) -> dict[str, Any]:
    spearmans = pd.to_numeric(df["depth_mask_spearman"], errors="coerce")
    return {
        "mask_image_miou": float(df["mask_image_miou"].mean()) if len(df) else float("nan"),
        "depth_mask_spearman": float(spearmans.mean()) if spearmans.notna().any() else float("nan"),
        "depth_undefined": int(spearmans.isna().sum()),
    }


# ============================================================================
# ===============                  ABLATIONS                  ================
# ============================================================================


def _score_checkpoint(
    path: str, captions: list[str], n_samples: int, steps: int, seed: int
) -> dict[str, Any]:
    ckpt = load_checkpoint(path)
    model_cfg = ckpt.config.model
    triples = [
        sample_from_checkpoint(ckpt, captions[i % len(captions)], steps, seed + i)
        for i in range(n_samples)
    ]
    summary = summarize_consistency(consistency_table(triples, ckpt.grammar))
    toggles = ckpt.toggles
    return {
        "ils": toggles.ils,
        "tan": toggles.tan,
        "time_adaptive": model_cfg.tan_time_adaptive,
        "share": f"{model_cfg.share_start}:{model_cfg.share_end}:{model_cfg.share_stride}",
        "n_samples": n_samples,
        **summary,
    }


def _init_worker():
    torch.set_num_threads(1)


def ablation_sweep(
    checkpoints: Mapping[str, str | Path],
    captions: Sequence[str],
    n_samples: int,
    steps: int,
    seed: int = 0,
    workers: int = 1,
) -> pd.DataFrame:
    """Mean consistency scores of sampled triples, one row per checkpoint.

    Every checkpoint samples the same `n_samples` (caption, seed) jobs with its
    own toggles. When the keys are the four toggle variants, rows come in the
    order ils_only, tan_only, both, neither; otherwise in mapping order.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be at least 1, got {n_samples}")
    captions = list(captions)
    if not captions:
        raise ValueError("No captions to sample")
    labels = list(checkpoints)
    if set(labels) & set(TOGGLE_VARIANTS):
        missing = [v for v in TOGGLE_VARIANTS if v not in checkpoints or checkpoints[v] is None]
        if missing:
            raise ValueError(f"Missing checkpoints for variants {missing}")
        labels = list(TOGGLE_VARIANTS)
    paths = [str(checkpoints[label]) for label in labels]
    args = (captions, n_samples, steps, seed)

    start = time.time()
    if workers > 1:
        with ProcessPoolExecutor(min(workers, len(paths)), initializer=_init_worker) as executor:
            futures = [executor.submit(_score_checkpoint, p, *args) for p in paths]
            scores = [f.result() for f in tqdm(futures, desc="ablation")]
    else:
        scores = [_score_checkpoint(p, *args) for p in tqdm(paths, desc="ablation")]
    df = pd.DataFrame(
        [{"variant": label, **s} for label, s in zip(labels, scores)], columns=ABLATION_COLUMNS
    )
    logger.info(f"Scored {len(labels)} checkpoints in {time.time() - start:.1f}s")
    log_table(df, "Ablation")
    return df


def variant_configs(config: RunConfig, kind: str) -> dict[str, RunConfig]:
    """Stage-B configurations for an ablation axis.

    "toggles" varies ILS and TAN; "positions" shares layouts from the first
    half, second half or the whole depth of the image branch; "time_gate" trains
    TAN with and without its timestep-dependent gate.
    """
    if kind == "toggles":
        return {
            name: replace(config, train=replace(config.train, ils=t.ils, tan=t.tan))
            for name, t in (
                ("ils_only", Toggles(ils=True, tan=False)),
                ("tan_only", Toggles(ils=False, tan=True)),
                ("both", Toggles(ils=True, tan=True)),
                ("neither", Toggles(ils=False, tan=False)),
            )
        }
    if kind == "positions":
        layers, mini = config.model.image_layers, config.model.mini_layers
        half = layers // 2
        if half < 1:
            raise ValueError("Position ablation needs at least two image layers")
        ranges = dict(
            zip(
                POSITION_VARIANTS,
                (
                    (0, half - 1, max(1, half // mini)),
                    (half, layers - 1, max(1, (layers - half) // mini)),
                    (0, layers - 1, max(1, layers // mini)),
                ),
            )
        )
        return {
            name: replace(
                config,
                model=replace(config.model, share_start=s, share_end=e, share_stride=k),
                train=replace(config.train, ils=True, tan=True),
            )
            for name, (s, e, k) in ranges.items()
        }
    if kind == "time_gate":
        return {
            name: replace(
                config,
                model=replace(config.model, tan_time_adaptive=adaptive),
                train=replace(config.train, ils=True, tan=True),
            )
            for name, adaptive in zip(TIME_GATE_VARIANTS, (True, False))
        }
    raise ValueError(f"Unknown ablation axis {kind!r}")


def run_ablation(
    config: RunConfig,
    records: list[Quadruple],
    grammar: SceneGrammar,
    out_dir: str | Path,
    kind: str = "toggles",
    budget: int = 1000,
    seeds: Sequence[int] = (0,),
    init: str | Path | None = None,
    n_samples: int = 32,
    workers: int = 1,
) -> pd.DataFrame:
    """Train every variant of an ablation axis under an equal stage-B budget and score it.

    A stage-A checkpoint is trained first unless `init` is given. Captions for
    sampling are the training captions. One block of rows is produced per seed.
    """
    out_dir = Path(out_dir)
    captions = list(unique_everseen(q.caption for q in records))
    if init is None:
        stage_a = replace(config, train=replace(config.train, stage="A"))
        init = train(stage_a, records, grammar, out_dir / "stage-a")
    tables = []
    for seed in seeds:
        checkpoints = {}
        for name, variant in variant_configs(config, kind).items():
            variant = replace(
                variant, train=replace(variant.train, stage="B", iterations=budget, seed=seed)
            )
            logger.info(f"Training variant {name} (seed {seed}, {budget} steps)")
            checkpoints[name] = train(
                variant, records, grammar, out_dir / f"seed-{seed}" / name, init=init
            )
        df = ablation_sweep(
            checkpoints, captions, n_samples, config.sample.steps, seed=seed, workers=workers
        )
        tables.append(df.assign(seed=seed))
    return pd.concat(tables, ignore_index=True)
