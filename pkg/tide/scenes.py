"""Procedural underwater-style scenes with exactly consistent image, depth, mask and
caption, and the on-disk dataset format.

A dataset directory holds, per record `{id}`, the tensor files `{id}.image.tide`,
`{id}.depth.tide` and `{id}.mask.tide`, plus `manifest.jsonl` (one JSON object
per record) and `header.json` (format version, grid size, grammar).
"""

import json
from collections.abc import Iterable, Iterator
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger
from more_itertools import unique_everseen
from tqdm import tqdm

from . import tensorfile
from .datatypes import (
    IntegrityError,
    Quadruple,
    SceneGrammar,
    SceneObject,
    SceneSpec,
    SynthesisJob,
)

FORMAT_VERSION = 1
MANIFEST = "manifest.jsonl"
HEADER = "header.json"
MODALITIES = ("image", "depth", "mask")

_MAX_ATTEMPTS = 1000


def caption_for(categories: Iterable[str], background: str, condition: str | None = None) -> str:
    """Fixed template: "a fish and a reef over a sandy seabed", followed by the
    condition words when there are any ("... seabed in murky water")."""
    named = " and ".join(f"a {c}" for c in unique_everseen(categories))
    caption = f"{named} over a {background} seabed"
    return f"{caption} {condition}" if condition else caption


def caption_condition(caption: str, grammar: SceneGrammar) -> str | None:
    """Name of the condition whose words end `caption`, if any."""
    text = " " + " ".join(caption.lower().split())
    for name, condition in grammar.conditions.items():
        if text.endswith(" " + " ".join(condition.words.lower().split())):
            return name
    return None


def _row_fraction(size: int) -> np.ndarray:
    rows = np.arange(size, dtype=np.float64)
    return rows / (size - 1) if size > 1 else np.zeros(size)


def background_depth(size: int, grammar: SceneGrammar) -> np.ndarray:
    near, span = grammar.background_depth
    column = near + span * _row_fraction(size)
    return np.repeat(column[:, None], size, axis=1)


def object_depth(radius: float, grammar: SceneGrammar, size: int) -> float:
    """Larger discs are nearer: near + span * (1 - r / r_max)."""
    near, span = grammar.object_depth
    r_max = grammar.radius_max * size
    return near + span * (1.0 - min(radius, r_max) / r_max)


def _draw_condition(seed: int, grammar: SceneGrammar) -> str | None:
    # separate stream; the object layout of a seed does not depend on conditions
    rng = np.random.default_rng([seed, 1])
    if not grammar.conditions or rng.random() >= grammar.condition_rate:
        return None
    return str(rng.choice(list(grammar.conditions)))


def _draw_spec(
    rng: np.random.Generator, seed: int, grammar: SceneGrammar, condition: str | None = None
) -> SceneSpec:
    size = grammar.size
    count = int(rng.integers(grammar.min_objects, grammar.max_objects + 1))
    count = max(count, len(grammar.forced_objects))
    drawn = rng.choice(grammar.categories, size=count - len(grammar.forced_objects))
    categories = [*grammar.forced_objects, *(str(c) for c in drawn)]
    objects = []
    for category in categories:
        radius = float(rng.uniform(grammar.radius_min, grammar.radius_max)) * size
        center = (
            float(rng.uniform(radius, size - radius)),
            float(rng.uniform(radius, size - radius)),
        )
        objects.append(
            SceneObject(category, center, radius, object_depth(radius, grammar, size))
        )
    background = str(rng.choice(list(grammar.backgrounds)))
    return SceneSpec(
        seed=seed,
        objects=tuple(objects),
        background=background,
        size=size,
        condition=condition,
    )


def render_scene(spec: SceneSpec, grammar: SceneGrammar) -> tuple[Quadruple, np.ndarray]:
    """Render back to front. Also returns the per-pixel object index (-1 for background)."""
    size = spec.size
    top, bottom = (np.asarray(c, dtype=np.float64) for c in grammar.backgrounds[spec.background])
    frac = _row_fraction(size)[:, None, None]
    image = np.broadcast_to((1 - frac) * top + frac * bottom, (size, size, 3)).copy()
    depth = background_depth(size, grammar)
    mask = np.zeros((size, size), dtype=np.uint8)
    owner = np.full((size, size), -1, dtype=np.int64)

    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    order = sorted(range(len(spec.objects)), key=lambda k: -spec.objects[k].depth)
    for k in order:
        obj = spec.objects[k]
        dist = np.hypot(rows - obj.center[0], cols - obj.center[1])
        inside = dist <= obj.radius
        shade = 1.0 - grammar.shading * np.clip(dist / obj.radius, 0.0, 1.0)
        color = np.asarray(grammar.colors[obj.category], dtype=np.float64)
        image[inside] = color * shade[inside][:, None]
        depth[inside] = obj.depth
        mask[inside] = grammar.category_id(obj.category)
        owner[inside] = k

    words = None
    if spec.condition is not None:
        condition = grammar.conditions[spec.condition]
        image = condition.apply(image)
        words = condition.words
    caption = caption_for((o.category for o in spec.objects), spec.background, words)
    record = Quadruple(
        image=image.astype(np.float32),
        depth=depth.astype(np.float32),
        mask=mask,
        caption=caption,
    )
    return record, owner


def draw_scene(seed: int, grammar: SceneGrammar) -> tuple[SceneSpec, Quadruple]:
    """Draw scenes from `seed` until every object keeps at least one visible pixel."""
    rng = np.random.default_rng(seed)
    condition = _draw_condition(seed, grammar)
    for _ in range(_MAX_ATTEMPTS):
        spec = _draw_spec(rng, seed, grammar, condition)
        record, owner = render_scene(spec, grammar)
        if len(np.unique(owner[owner >= 0])) == len(spec.objects):
            return spec, record
    raise ValueError(f"Could not place visible objects for seed {seed}")


def generate_scene(seed: int, grammar: SceneGrammar) -> Quadruple:
    return draw_scene(seed, grammar)[1]


def caption_categories(caption: str, grammar: SceneGrammar) -> set[str]:
    return {w for w in caption.lower().split() if w in grammar.categories}


def range_problems(q: Quadruple, num_categories: int) -> list[str]:
    """Shape and value-range violations of a record (no cross-modal checks)."""
    problems = []
    size = q.mask.shape[0] if q.mask.ndim == 2 else -1
    if q.mask.shape != (size, size) or q.depth.shape != (size, size):
        problems.append(f"mask {q.mask.shape} and depth {q.depth.shape} must be square and equal")
        return problems
    if q.image.shape != (size, size, 3):
        problems.append(f"image shape {q.image.shape} does not match grid {size}")
        return problems
    if not (np.isfinite(q.image).all() and q.image.min() >= 0 and q.image.max() <= 1):
        problems.append("image values outside [0, 1]")
    if not (np.isfinite(q.depth).all() and q.depth.min() >= 0 and q.depth.max() <= 1):
        problems.append("depth values outside [0, 1]")
    if q.mask.size and int(q.mask.max()) >= num_categories:
        problems.append(f"mask id {int(q.mask.max())} >= {num_categories}")
    return problems


def validate_quadruple(
    q: Quadruple, grammar: SceneGrammar, spec: SceneSpec | None = None
) -> list[str]:
    """Return the violated record invariants; an empty list means the record is valid."""
    problems = range_problems(q, grammar.num_categories)
    if problems:
        return problems
    size = q.mask.shape[0]

    present = {grammar.category_names[i] for i in np.unique(q.mask) if i != 0}
    named = caption_categories(q.caption, grammar)
    if present != named:
        problems.append(f"caption names {sorted(named)} but mask holds {sorted(present)}")

    condition = caption_condition(q.caption, grammar)
    if spec is not None and spec.condition != condition:
        problems.append(f"caption names condition {condition} but the scene has {spec.condition}")
    image = q.image if condition is None else grammar.conditions[condition].invert(q.image)
    bound = grammar.shading + 1e-5
    for name in present:
        pixels = image[q.mask == grammar.category_id(name)]
        gap = np.abs(pixels - np.asarray(grammar.colors[name])).max()
        if gap > bound:
            problems.append(f"{name} pixels deviate {gap:.3f} from the render color")

    objects = q.mask != 0
    if objects.any() and (~objects).any():
        if q.depth[objects].max() >= q.depth[~objects].min():
            problems.append("object pixels are not strictly nearer than background")

    if spec is not None:
        for a in spec.objects:
            for b in spec.objects:
                if a.radius > b.radius and a.depth > b.depth:
                    problems.append(
                        f"{a.category} (r={a.radius:.2f}) is farther than smaller {b.category}"
                    )
        for obj in spec.objects:
            r, c = obj.center
            if not (obj.radius <= r <= size - obj.radius and obj.radius <= c <= size - obj.radius):
                problems.append(f"{obj.category} leaves the frame")
            if not grammar.radius_min * size <= obj.radius <= grammar.radius_max * size:
                problems.append(f"{obj.category} radius {obj.radius:.2f} out of bounds")
        if not grammar.min_objects <= len(spec.objects) <= grammar.max_objects:
            problems.append(f"{len(spec.objects)} objects outside the configured count")
    return problems


def classify_image(
    image: np.ndarray, grammar: SceneGrammar, condition: str | None = None
) -> np.ndarray:
    """Read a mask off an image: the nearest render color within the grammar's
    tolerance (max-norm), else background. A named condition is undone first."""
    if condition is not None:
        image = grammar.conditions[condition].invert(image.astype(np.float64))
    colors = grammar.render_colors()
    gaps = np.abs(image[..., None, :].astype(np.float64) - colors).max(axis=-1)
    nearest = gaps.argmin(axis=-1)
    within = np.take_along_axis(gaps, nearest[..., None], axis=-1)[..., 0] <= grammar.tolerance
    return np.where(within, nearest + 1, 0).astype(np.uint8)


def rule_depth(mask: np.ndarray, grammar: SceneGrammar) -> np.ndarray:
    """Depth implied by a mask under the grammar's depth rule.

    Each category's pixels are treated as one disc of equal area.
    """
    size = mask.shape[0]
    depth = background_depth(size, grammar)
    for category_id in np.unique(mask):
        if category_id == 0:
            continue
        region = mask == category_id
        radius = float(np.sqrt(region.sum() / np.pi))
        depth[region] = object_depth(radius, grammar, size)
    return depth


# ============================================================================
# ===============                  DATASETS                   ================
# ============================================================================


def write_dataset(
    records: Iterable[Quadruple],
    directory: str | Path,
    grammar: SceneGrammar | None = None,
) -> Path:
    """Write records in stream order and return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / MANIFEST
    count = 0
    size = None
    with manifest.open("w", encoding="utf-8", newline="\n") as f:
        for index, q in enumerate(records):
            record_id = f"{index:06d}"
            arrays = {
                "image": np.asarray(q.image, dtype=np.float32),
                "depth": np.asarray(q.depth, dtype=np.float32),
                "mask": np.asarray(q.mask, dtype=np.uint8),
            }
            files = {m: f"{record_id}.{m}.tide" for m in MODALITIES}
            checksums = {
                m: tensorfile.write_tensor(directory / files[m], arrays[m]) for m in MODALITIES
            }
            line = {"id": record_id, "caption": q.caption, "files": files, "crc32c": checksums}
            f.write(json.dumps(line, ensure_ascii=False) + "\n")
            size = q.mask.shape[0]
            count += 1

    header: dict[str, Any] = {"format_version": FORMAT_VERSION, "count": count, "size": size}
    if grammar is not None:
        header["categories"] = grammar.category_names
        header["depth_rule"] = grammar.to_dict()["depth_rule"]
        header["grammar"] = grammar.to_dict()
    (directory / HEADER).write_text(json.dumps(header, indent=2), encoding="utf-8")
    logger.info(f"Wrote {count} records to {directory}")
    return manifest


def read_manifest(directory: str | Path) -> list[dict[str, Any]]:
    manifest = Path(directory) / MANIFEST
    if not manifest.is_file():
        raise IntegrityError(f"No {MANIFEST} in {directory}")
    entries = []
    with manifest.open(encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            try:
                entry = json.loads(line)
                if not isinstance(entry["id"], str) or not isinstance(entry["caption"], str):
                    raise TypeError("id and caption must be strings")
                for m in MODALITIES:
                    str(entry["files"][m])
                    int(entry["crc32c"][m])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise IntegrityError(f"{manifest}: malformed line {number}: {e}") from e
            entries.append(entry)
    return entries


def read_header(directory: str | Path) -> dict[str, Any]:
    path = Path(directory) / HEADER
    if not path.is_file():
        raise IntegrityError(f"No {HEADER} in {directory}")
    return json.loads(path.read_text(encoding="utf-8"))


def dataset_grammar(directory: str | Path) -> SceneGrammar:
    header = read_header(directory)
    if "grammar" not in header:
        return SceneGrammar.load()
    return SceneGrammar(header["grammar"])


def read_dataset(directory: str | Path) -> Iterator[Quadruple]:
    """Yield the records of a dataset in manifest order, verifying every checksum."""
    directory = Path(directory)
    for entry in read_manifest(directory):
        arrays = {}
        for m in MODALITIES:
            try:
                arrays[m] = tensorfile.read_tensor(
                    directory / entry["files"][m], checksum=int(entry["crc32c"][m])
                )
            except IntegrityError as e:
                raise IntegrityError(f"record {entry['id']}: {e}") from e
        yield Quadruple(
            image=arrays["image"],
            depth=arrays["depth"],
            mask=arrays["mask"],
            caption=entry["caption"],
        )


def generate_dataset(
    seeds: Iterable[int],
    grammar: SceneGrammar,
    directory: str | Path,
    workers: int = 1,
) -> Path:
    """Generate one scene per seed, in parallel, and write them in seed order."""
    seeds = list(seeds)
    make = partial(generate_scene, grammar=grammar)
    if workers > 1:
        with ProcessPoolExecutor(workers) as executor:
            records = list(
                tqdm(
                    executor.map(make, seeds, chunksize=max(1, len(seeds) // (4 * workers))),
                    total=len(seeds),
                    desc="scenes",
                )
            )
    else:
        records = [make(seed) for seed in tqdm(seeds, desc="scenes")]
    return write_dataset(records, directory, grammar)


def expand_captions(
    captions: Iterable[str], n: int, base_seed: int = 0
) -> list[SynthesisJob]:
    """Deduplicate captions (first occurrence wins) and fan each out to `n` jobs
    with distinct seeds."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    jobs = []
    for caption in unique_everseen(captions):
        for _ in range(n):
            index = len(jobs)
            jobs.append(SynthesisJob(index=index, caption=caption, seed=base_seed + index))
    return jobs


def default_grammar(size: int | None = None) -> SceneGrammar:
    grammar = SceneGrammar.load()
    return grammar if size is None else grammar.with_overrides(size=size)
