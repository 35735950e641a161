import itertools
import json
import tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger

# ============================================================================
# ===============                   ERRORS                    ================
# ============================================================================


class IntegrityError(OSError):
    """A dataset or checkpoint file is missing, corrupt, or malformed."""


class NonFiniteLossError(FloatingPointError):
    """A training step produced a NaN or infinite loss."""


class GradCheckError(ValueError):
    """Non-finite values were met while checking gradients."""


# ============================================================================
# ===============                   CLASSES                   ================
# ============================================================================


class Modality(str, Enum):
    """The three denoising branches, in their fixed evaluation order."""

    image = "image"
    depth = "depth"
    mask = "mask"

    @classmethod
    def annotations(cls) -> tuple["Modality", "Modality"]:
        return (cls.depth, cls.mask)


@dataclass(frozen=True)
class Toggles:
    """Switches for the two coupling mechanisms.

    Attributes
    ----------
    ils
        Annotation branches consume the image branch's cross-attention maps.
    tan
        Cross-modal time adaptive normalization runs after each coupled block.
    """

    ils: bool = True
    tan: bool = True

    @property
    def variant(self) -> str:
        return {
            (True, True): "both",
            (True, False): "ils_only",
            (False, True): "tan_only",
            (False, False): "neither",
        }[(self.ils, self.tan)]


@dataclass(frozen=True)
class SceneObject:
    category: str
    center: tuple[float, float]  # (row, col) in pixels
    radius: float
    depth: float


@dataclass(frozen=True)
class SceneSpec:
    """The random draw a scene is rendered from."""

    seed: int
    objects: tuple[SceneObject, ...]
    background: str
    size: int
    condition: str | None = None


@dataclass
class Quadruple:
    """One {image, depth, mask, caption} record.

    Attributes
    ----------
    image
        H x W x 3 float32 array in [0, 1].
    depth
        H x W float32 array in [0, 1], 0 is nearest.
    mask
        H x W uint8 array of category ids, 0 is background.
    caption
        Text description naming every non-background category in the mask.
    """

    image: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    caption: str

    def __eq__(self, o: object) -> bool:
        if not isinstance(o, Quadruple):
            return False
        return (
            self.caption == o.caption
            and np.array_equal(self.image, o.image)
            and np.array_equal(self.depth, o.depth)
            and np.array_equal(self.mask, o.mask)
        )

    @property
    def size(self) -> int:
        return self.mask.shape[0]


@dataclass(frozen=True)
class SynthesisJob:
    index: int
    caption: str
    seed: int


@dataclass(frozen=True)
class LossReport:
    """Branch losses of one training step; `total` is their literal sum."""

    step: int
    image: float
    depth: float
    mask: float
    total: float


@dataclass(frozen=True)
class GradCheckReport:
    unit: str
    max_rel_error: float
    tol: float
    passed: bool
    per_parameter: dict[str, float] = field(default_factory=dict)
    max_abs_grad: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class DepthMetrics:
    si_log: float
    a_rel: float
    log10: float
    rmse: float
    s_rel: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    @classmethod
    def mean(cls, items: list["DepthMetrics"]) -> "DepthMetrics":
        if len(items) == 0:
            raise ValueError("Cannot average an empty list of depth metrics")
        return cls(
            **{
                f.name: float(np.mean([getattr(m, f.name) for m in items]))
                for f in fields(cls)
            }
        )


@dataclass(frozen=True)
class SegmentationScore:
    """Per-category IoU (NaN where a category is absent from both grids) and mean."""

    iou: np.ndarray
    mean: float


@dataclass(frozen=True)
class ConsistencyReport:
    mask_image_miou: float
    depth_mask_spearman: float | None

    @property
    def depth_undefined(self) -> bool:
        return self.depth_mask_spearman is None


# ============================================================================
# ===============                CONFIGURATION                ================
# ============================================================================


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Geometry of the tri-branch denoiser.

    Attributes
    ----------
    size
        Side of the square pixel (and latent) grid.
    patch
        Patch side used by the patch embedding; must divide `size`.
    width
        Channel width c of every branch.
    share_start, share_end, share_stride
        Range of image layers whose layouts feed annotation layers 0, 1, ...
    tan_gate
        "scalar" for one gate per TAN layer, "channel" for one per channel.
    tan_site
        "after_block" or "before_ff": where the cross-modal exchange runs.
    """

    size: int = 16
    channels: int = 3
    patch: int = 2
    width: int = 64
    heads: int = 1
    ff_mult: int = 2
    max_tokens: int = 24
    image_layers: int = 8
    mini_layers: int = 4
    share_start: int = 0
    share_end: int = 7
    share_stride: int = 2
    lora_rank_image: int = 4
    lora_rank_depth: int = 8
    lora_rank_mask: int = 8
    lora_scale: float = 1.0
    with_tan: bool = True
    tan_time_adaptive: bool = True
    tan_gate: str = "scalar"
    tan_site: str = "after_block"

    def __post_init__(self):
        if self.size % self.patch != 0:
            raise ValueError(f"patch {self.patch} does not divide grid size {self.size}")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.mini_layers > self.image_layers:
            raise ValueError(
                f"annotation branches ({self.mini_layers} layers) cannot be deeper"
                f" than the image branch ({self.image_layers} layers)"
            )
        if self.tan_gate not in {"scalar", "channel"}:
            raise ValueError(f"Unknown tan_gate {self.tan_gate!r}")
        if self.tan_site not in {"after_block", "before_ff"}:
            raise ValueError(f"Unknown tan_site {self.tan_site!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Training-loop settings.

    The full-scale protocol (60K stage-A iterations, 200K stage-B iterations at
    batch size 4, LoRA ranks 32/64/64) is scaled down by the packaged defaults.
    """

    stage: str = "B"
    iterations: int = 1000
    mini_iterations: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    ils: bool = True
    tan: bool = True
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.stage not in {"A", "B"}:
            raise ValueError(f"Unknown training stage {self.stage!r}")
        if self.iterations < 0 or self.mini_iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")

    @property
    def toggles(self) -> Toggles:
        return Toggles(ils=self.ils, tan=self.tan)


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 100
    seed: int = 0
    n_per_caption: int = 10


_SECTIONS = {
    "schedule": ScheduleConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
}


@dataclass(frozen=True)
class RunConfig:
    """Encapsulates all configuration options for a run of the tool.

    Values come from the packaged `desk.toml`, then an optional user TOML file,
    then explicit overrides (CLI flags), later sources winning.
    """

    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    @classmethod
    def load(
        cls,
        path: str | Path | None = None,
        overrides: dict[str, dict[str, Any]] | None = None,
    ) -> "RunConfig":
        with resources.files("tide.config").joinpath("desk.toml").open("rb") as f:
            config = cls.from_dict(tomllib.load(f))
        if path is not None:
            with Path(path).open("rb") as f:
                config = config.updated(tomllib.load(f))
            logger.info(f"Loaded configuration from {path}")
        if overrides:
            config = config.updated(overrides)
        return config

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return cls().updated(data)

    def updated(self, data: dict[str, Any]) -> "RunConfig":
        unknown = set(data).difference(_SECTIONS)
        if unknown:
            raise ValueError(f"Unknown configuration sections: {sorted(unknown)}")
        sections = {}
        for name, section_cls in _SECTIONS.items():
            current = getattr(self, name)
            values = {k: v for k, v in data.get(name, {}).items() if v is not None}
            known = {f.name for f in fields(section_cls)}
            bad = set(values).difference(known)
            if bad:
                raise ValueError(f"Unknown keys in [{name}]: {sorted(bad)}")
            sections[name] = replace(current, **values)
        return RunConfig(**sections)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}


@dataclass(frozen=True)
class SceneCondition:
    """A lighting or water-quality variant: a per-pixel affine map of the image,
    named in the caption by `words`.

    The map darkens by `brightness` then blends toward `haze_color` by `haze`.
    """

    words: str
    brightness: float = 1.0
    haze: float = 0.0
    haze_color: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def gain(self) -> float:
        return self.brightness * (1.0 - self.haze)

    def apply(self, image: np.ndarray) -> np.ndarray:
        return image * self.gain + self.haze * np.asarray(self.haze_color)

    def invert(self, image: np.ndarray) -> np.ndarray:
        return (image - self.haze * np.asarray(self.haze_color)) / self.gain


class SceneGrammar:
    """The procedural scene family: categories, colors, backgrounds, depth rule and
    caption template words. Loaded from `scene-grammar.json`.

    Category id 0 is always the background; object categories follow in file
    order starting at 1.
    """

    categories: list[str]
    colors: dict[str, tuple[float, float, float]]
    backgrounds: dict[str, tuple[tuple[float, ...], tuple[float, ...]]]
    size: int
    min_objects: int
    max_objects: int
    radius_min: float
    radius_max: float
    shading: float
    tolerance: float
    background_depth: tuple[float, float]
    object_depth: tuple[float, float]
    forced_objects: list[str]
    conditions: dict[str, SceneCondition]
    condition_rate: float

    def __init__(self, data: dict[str, Any]):
        self.categories = list(data["categories"])
        self.colors = {k: tuple(v) for k, v in data["colors"].items()}
        self.backgrounds = {
            k: (tuple(v["top"]), tuple(v["bottom"]))
            for k, v in data["backgrounds"].items()
        }
        self.size = int(data.get("size", 16))
        self.min_objects = int(data.get("min_objects", 1))
        self.max_objects = int(data.get("max_objects", 4))
        self.radius_min = float(data["radius_min"])
        self.radius_max = float(data["radius_max"])
        self.shading = float(data.get("shading", 0.1))
        self.tolerance = float(data.get("tolerance", 0.2))
        rule = data["depth_rule"]
        self.background_depth = (float(rule["background"][0]), float(rule["background"][1]))
        self.object_depth = (float(rule["object"][0]), float(rule["object"][1]))
        self.forced_objects = list(data.get("forced_objects", []))
        self.conditions = {
            k: SceneCondition(
                words=str(v["words"]),
                brightness=float(v.get("brightness", 1.0)),
                haze=float(v.get("haze", 0.0)),
                haze_color=tuple(v.get("haze_color", (0.0, 0.0, 0.0))),  # type: ignore[arg-type]
            )
            for k, v in data.get("conditions", {}).items()
        }
        self.condition_rate = float(data.get("condition_rate", 0.0))
        self._validate()

    @classmethod
    def load(cls, path: str | Path | None = None) -> "SceneGrammar":
        if path is None:
            with resources.files("tide.config").joinpath("scene-grammar.json").open() as f:
                return cls(json.load(f))
        with Path(path).open() as f:
            return cls(json.load(f))

    def with_overrides(self, **kwargs) -> "SceneGrammar":
        data = self.to_dict()
        data.update(kwargs)
        return SceneGrammar(data)

    def to_dict(self) -> dict[str, Any]:
        return {
            "categories": list(self.categories),
            "colors": {k: list(v) for k, v in self.colors.items()},
            "backgrounds": {
                k: {"top": list(top), "bottom": list(bottom)}
                for k, (top, bottom) in self.backgrounds.items()
            },
            "size": self.size,
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "radius_min": self.radius_min,
            "radius_max": self.radius_max,
            "shading": self.shading,
            "tolerance": self.tolerance,
            "depth_rule": {
                "background": list(self.background_depth),
                "object": list(self.object_depth),
            },
            "forced_objects": list(self.forced_objects),
            "conditions": {
                k: {
                    "words": c.words,
                    "brightness": c.brightness,
                    "haze": c.haze,
                    "haze_color": list(c.haze_color),
                }
                for k, c in self.conditions.items()
            },
            "condition_rate": self.condition_rate,
        }

    @property
    def num_categories(self) -> int:
        """K, including the background category."""
        return len(self.categories) + 1

    @property
    def category_names(self) -> list[str]:
        return ["background", *self.categories]

    def category_id(self, name: str) -> int:
        return self.categories.index(name) + 1

    def render_colors(self) -> np.ndarray:
        """(K-1) x 3 array of object render colors, in category id order."""
        return np.array([self.colors[c] for c in self.categories], dtype=np.float64)

    def vocabulary_words(self) -> list[str]:
        template = ["a", "and", "over", "seabed"]
        words = template + self.categories + list(self.backgrounds)
        for condition in self.conditions.values():
            words += condition.words.split()
        return list(dict.fromkeys(w.lower() for w in words))

    def _validate(self):
        if len(self.categories) < 2:
            raise ValueError("A scene grammar needs at least 2 object categories")
        if self.num_categories > 8:
            raise ValueError(f"At most 7 object categories supported, got {len(self.categories)}")
        missing = set(self.categories).difference(self.colors)
        if missing:
            raise ValueError(f"No render color for categories {sorted(missing)}")
        if not self.backgrounds:
            raise ValueError("A scene grammar needs at least one background")
        if not 0 < self.radius_min <= self.radius_max <= 0.5:
            raise ValueError(
                f"Radius bounds must satisfy 0 < min <= max <= 0.5, got"
                f" ({self.radius_min}, {self.radius_max})"
            )
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("Object count bounds must satisfy 1 <= min <= max")
        unknown = set(self.forced_objects).difference(self.categories)
        if unknown:
            raise ValueError(f"Forced objects use unknown categories {sorted(unknown)}")
        if len(self.forced_objects) > self.max_objects:
            raise ValueError("More forced objects than max_objects")
        near, span = self.object_depth
        if not near + span < self.background_depth[0]:
            raise ValueError("Objects must be strictly nearer than the background")
        # Colors must stay separable under shading for image->mask decoding
        colors = self.render_colors()
        separation = 2 * self.tolerance
        for i in range(len(colors)):
            for j in range(i + 1, len(colors)):
                if np.abs(colors[i] - colors[j]).max() < separation:
                    raise ValueError(
                        f"Render colors of {self.categories[i]} and"
                        f" {self.categories[j]} are closer than {separation}"
                    )
        ramp = np.linspace(0.0, 1.0, 33)[:, None]
        for name, (top, bottom) in self.backgrounds.items():
            gradient = (1 - ramp) * np.array(top) + ramp * np.array(bottom)
            gaps = np.abs(gradient[:, None, :] - colors[None, :, :]).max(axis=-1)
            if gaps.min() < separation:
                raise ValueError(
                    f"Background {name} comes closer than {separation} to an object color"
                )
        self._validate_conditions()

    def _validate_conditions(self):
        if not 0.0 <= self.condition_rate <= 1.0:
            raise ValueError(f"condition_rate must lie in [0, 1], got {self.condition_rate}")
        if self.condition_rate > 0 and not self.conditions:
            raise ValueError("A positive condition_rate needs at least one condition")
        phrases = {}
        for name, c in self.conditions.items():
            words = c.words.lower().split()
            if not words:
                raise ValueError(f"Condition {name} has no caption words")
            clash = set(words).intersection(self.categories)
            if clash:
                raise ValueError(f"Condition {name} uses category words {sorted(clash)}")
            if not 0 < c.brightness <= 1 or not 0 <= c.haze < 1:
                raise ValueError(
                    f"Condition {name} needs 0 < brightness <= 1 and 0 <= haze < 1,"
                    f" got ({c.brightness}, {c.haze})"
                )
            if len(c.haze_color) != 3 or not all(0 <= x <= 1 for x in c.haze_color):
                raise ValueError(f"Condition {name} haze color must be 3 values in [0, 1]")
            phrases[name] = " " + " ".join(words)
        for a, b in itertools.permutations(phrases, 2):
            if phrases[a].endswith(phrases[b]):
                raise ValueError(f"Caption words of conditions {a} and {b} are ambiguous")
