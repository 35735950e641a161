"""Fixed maps between pixel-space modalities and the branch latent grids.

Latents are channels-first (B, 3, H, W) float tensors in roughly [-1, 1]. Pixel
records are numpy arrays as stored in datasets (H x W x 3 images, H x W depth and
masks).
"""

import itertools
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch

# Corners of [-1, 1]^3 in the fixed palette order.
CUBE_CORNERS: tuple[tuple[float, float, float], ...] = (
    (-1.0, -1.0, -1.0),
    (1.0, 1.0, 1.0),
    (1.0, -1.0, -1.0),
    (-1.0, 1.0, -1.0),
    (-1.0, -1.0, 1.0),
    (1.0, 1.0, -1.0),
    (1.0, -1.0, 1.0),
    (-1.0, 1.0, 1.0),
)

MIN_PALETTE_DISTANCE = 0.5


@dataclass(frozen=True)
class Palette:
    """K category colors in [-1, 1]^3, indexed by category id."""

    colors: tuple[tuple[float, float, float], ...]
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.colors) != len(self.names):
            raise ValueError(f"{len(self.colors)} colors for {len(self.names)} categories")
        if not 1 <= len(self.colors) <= len(CUBE_CORNERS):
            raise ValueError(f"Palettes hold 1 to 8 categories, got {len(self.colors)}")
        colors = np.asarray(self.colors, dtype=np.float64)
        if colors.shape[1] != 3 or np.abs(colors).max() > 1:
            raise ValueError("Palette colors must be 3-vectors in [-1, 1]")
        for i, j in itertools.combinations(range(len(colors)), 2):
            distance = np.linalg.norm(colors[i] - colors[j])
            if distance < MIN_PALETTE_DISTANCE:
                raise ValueError(
                    f"Colors of {self.names[i]} and {self.names[j]} are {distance:.3f}"
                    f" apart, below the {MIN_PALETTE_DISTANCE} margin"
                )

    @classmethod
    def default(cls, names: list[str] | tuple[str, ...]) -> "Palette":
        if len(names) > len(CUBE_CORNERS):
            raise ValueError(f"At most {len(CUBE_CORNERS)} categories, got {len(names)}")
        return cls(colors=CUBE_CORNERS[: len(names)], names=tuple(names))

    @property
    def K(self) -> int:
        return len(self.colors)

    def tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor(self.colors, dtype=dtype)


def _as_tensor(x: np.ndarray | torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(np.asarray(x)) if isinstance(x, np.ndarray) else x


def encode_mask(mask: np.ndarray | torch.Tensor, p: Palette) -> torch.Tensor:
    """(..., H, W) category ids -> (..., H, W, 3) palette colors."""
    ids = _as_tensor(mask).long()
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= p.K):
        raise ValueError(f"Category ids must lie in [0, {p.K}), got max {int(ids.max())}")
    return p.tensor()[ids]


def decode_mask(grid: np.ndarray | torch.Tensor, p: Palette) -> torch.Tensor:
    """Nearest palette color per pixel; ties go to the lowest category id."""
    grid = _as_tensor(grid)
    if not bool(torch.isfinite(grid).all()):
        raise ValueError("Cannot decode a mask from non-finite values")
    colors = p.tensor(grid.dtype)
    distances = ((grid[..., None, :] - colors) ** 2).sum(dim=-1)
    return distances.argmin(dim=-1)


def encode_depth(depth: np.ndarray | torch.Tensor) -> torch.Tensor:
    """[0, 1] -> [-1, 1]."""
    depth = _as_tensor(depth)
    if not bool(torch.isfinite(depth).all()) or bool(((depth < 0) | (depth > 1)).any()):
        raise ValueError("Depth values must lie in [0, 1]")
    return depth * 2 - 1


def decode_depth(z: torch.Tensor) -> torch.Tensor:
    """[-1, 1] -> [0, 1], clamping samples outside the range."""
    return ((_as_tensor(z) + 1) / 2).clamp(0, 1)


def encode_image(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    return _as_tensor(image) * 2 - 1


def decode_image(z: torch.Tensor) -> torch.Tensor:
    return ((_as_tensor(z) + 1) / 2).clamp(0, 1)


def patchify(
    x: torch.Tensor,
    patch: int,
    embed: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> torch.Tensor:
    """(B, C, H, W) -> (B, N, p * p * C) non-overlapping patches in row-major order.

    Each token lists its pixels row-major with channels innermost, so a single
    patch covering the whole grid equals the H x W x C image flattened.
    """
    b, c, height, width = x.shape
    if height % patch or width % patch:
        raise ValueError(f"patch {patch} does not divide grid {height}x{width}")
    tokens = (
        x.reshape(b, c, height // patch, patch, width // patch, patch)
        .permute(0, 2, 4, 3, 5, 1)
        .reshape(b, (height // patch) * (width // patch), patch * patch * c)
    )
    return tokens if embed is None else embed(tokens)


def unpatchify(tokens: torch.Tensor, patch: int, height: int, width: int) -> torch.Tensor:
    """Inverse of `patchify` without embedding: (B, N, p * p * C) -> (B, C, H, W)."""
    b, n, features = tokens.shape
    if height % patch or width % patch:
        raise ValueError(f"patch {patch} does not divide grid {height}x{width}")
    rows, cols = height // patch, width // patch
    if n != rows * cols or features % (patch * patch):
        raise ValueError(f"{n} tokens of width {features} do not tile {height}x{width}")
    c = features // (patch * patch)
    return (
        tokens.reshape(b, rows, cols, patch, patch, c)
        .permute(0, 5, 1, 3, 2, 4)
        .reshape(b, c, height, width)
    )


# Latent packing: every branch denoises a 3-channel grid.


def image_latent(images: np.ndarray | torch.Tensor) -> torch.Tensor:
    """(B, H, W, 3) images in [0, 1] -> (B, 3, H, W) latents."""
    return encode_image(images).permute(0, 3, 1, 2).contiguous()


def depth_latent(depths: np.ndarray | torch.Tensor) -> torch.Tensor:
    """(B, H, W) depth -> (B, 3, H, W), the encoded depth repeated on every channel."""
    return encode_depth(depths).unsqueeze(1).expand(-1, 3, -1, -1).contiguous()


def mask_latent(masks: np.ndarray | torch.Tensor, p: Palette) -> torch.Tensor:
    return encode_mask(masks, p).permute(0, 3, 1, 2).contiguous()


def latent_image(z: torch.Tensor) -> torch.Tensor:
    return decode_image(z.permute(0, 2, 3, 1))


def latent_depth(z: torch.Tensor) -> torch.Tensor:
    return decode_depth(z.mean(dim=1))


def latent_mask(z: torch.Tensor, p: Palette) -> torch.Tensor:
    return decode_mask(z.permute(0, 2, 3, 1), p)
