"""Data pipeline: ingestion, shifted square crops, and a procedural corpus.

Every training sample follows the same path: decode (or render), normalize
to [-1, 1], resize so the shorter edge equals the train size, build the
full position map at token resolution, take a square crop at a random
patch-aligned offset along the long axis, and slice the map at the same
indices. The map slice is taken from the full map, never rebuilt, so a
crop's coordinates tell the model where the crop sat inside the original
frame.

The pipeline is stateless between samples: each sample's randomness comes
from (stream seed, sample index), so streams are reproducible and
order-independent regardless of worker count, and nothing is cached.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .errors import CorpusError, InvalidImageError, ShapeError
from .geometry import CameraTransform, PositionMap, apply_camera, make_position_map
from .textcond import ToyTokenizer

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 200, 0),
    "blue": (40, 40, 255),
    "yellow": (255, 220, 0),
    "white": (255, 255, 255),
}
# shape-center anchors as (y, x) fractions of the canvas
POSITIONS = {
    "top": (0.25, 0.5),
    "bottom": (0.75, 0.5),
    "left": (0.5, 0.25),
    "right": (0.5, 0.75),
    "center": (0.5, 0.5),
}


def normalize_image(pixels: np.ndarray) -> np.ndarray:
    """uint8 [H, W, C] -> float32 [C, H, W] in [-1, 1]."""
    arr = np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def export_image(image: np.ndarray) -> np.ndarray:
    """float [C, H, W] in [-1, 1] -> uint8 [H, W, C]; inverse of normalize."""
    arr = (np.clip(image, -1.0, 1.0) + 1.0) * 127.5
    return np.rint(arr).astype(np.uint8).transpose(1, 2, 0)


def write_png(path, image: np.ndarray):
    Image.fromarray(export_image(image), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return normalize_image(np.asarray(img.convert("RGB")))


def resize_min_dim(image: Image.Image, target: int) -> Image.Image:
    """Scale so the shorter edge equals `target`; long edge floors.

    Idempotent when the shorter edge already matches.
    """
    w, h = image.size
    if w == 0 or h == 0 or target < 1:
        raise InvalidImageError(f"cannot resize {w}x{h} image to min dim {target}")
    if min(h, w) == target:
        return image
    scale = target / min(h, w)
    if h > w:
        return image.resize((target, int(h * scale)), Image.Resampling.BILINEAR)
    return image.resize((int(w * scale), target), Image.Resampling.BILINEAR)


def shifted_square_crop(
    image: np.ndarray,
    pos_map: PositionMap,
    rng: np.random.Generator,
    patch: int,
):
    """Square crop at a random patch-aligned offset along the long axis.

    Returns (cropped image, identically-sliced map, (y0, x0) pixel origin).
    Offsets are multiples of `patch` so the pixel crop and the token-map
    slice stay aligned; the offset range is inclusive of the flush-to-end
    position.
    """
    c, h, w = image.shape
    if (pos_map.height, pos_map.width) != (h // patch, w // patch):
        raise ShapeError(
            f"map grid {(pos_map.height, pos_map.width)} does not match "
            f"{h}x{w} image at patch {patch}"
        )
    size = min(h, w)
    if size % patch:
        raise ShapeError(f"crop size {size} not divisible by patch {patch}")
    size_tok = size // patch
    if h > w:
        max_tok = h // patch - size_tok
        y_tok = int(rng.integers(0, max_tok + 1))
        y0, x0 = y_tok * patch, 0
    else:
        max_tok = w // patch - size_tok
        x_tok = int(rng.integers(0, max_tok + 1))
        y0, x0 = 0, x_tok * patch
    cropped = image[:, y0 : y0 + size, x0 : x0 + size]
    pos = pos_map.slice_window(y0 // patch, x0 // patch, size_tok, size_tok)
    return np.ascontiguousarray(cropped), pos, (y0, x0)


def inference_position_map(
    target_h: int,
    target_w: int,
    patch: int,
    cam: CameraTransform = CameraTransform(),
) -> PositionMap:
    """Full uncropped map at token resolution with the camera applied."""
    if target_h < patch or target_w < patch or target_h % patch or target_w % patch:
        raise ShapeError(
            f"target {target_h}x{target_w} must be positive multiples of "
            f"patch {patch}"
        )
    return apply_camera((target_h // patch, target_w // patch), cam)


@dataclass(frozen=True)
class DatasetSpec:
    """Where samples come from and how they are prepared."""

    source: str  # "procedural:<seed>", a directory, or a manifest .json
    train_size: int = 32
    patch: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.train_size % self.patch:
            raise ShapeError(
                f"train size {self.train_size} not divisible by patch {self.patch}"
            )

    @property
    def procedural_seed(self) -> Optional[int]:
        if self.source.startswith("procedural:"):
            return int(self.source.split(":", 1)[1])
        if self.source == "procedural":
            return 0
        return None


@dataclass(frozen=True)
class CropSample:
    image: np.ndarray  # [C, X, X] float32 in [-1, 1]
    pos: PositionMap  # token-resolution slice of the full map
    caption: str
    caption_ids: tuple
    crop_origin: tuple  # (y0, x0) in resized-image pixels
    source_dims: tuple  # (H, W) of the resized image


def render_scene(shape: str, color: str, position: str, h: int, w: int) -> np.ndarray:
    """One colored shape on black, float32 [3, h, w] in [-1, 1]."""
    cy, cx = POSITIONS[position]
    cy, cx = cy * h, cx * w
    r = min(h, w) / 6.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    if shape == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif shape == "square":
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    elif shape == "triangle":
        # upward wedge: width grows linearly from apex to base
        rel = (yy - (cy - r)) / 2.0
        mask = (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= rel)
    else:
        raise InvalidImageError(f"unknown shape {shape!r}")
    canvas = np.full((3, h, w), -1.0, dtype=np.float32)
    rgb = np.asarray(COLORS[color], dtype=np.float32) / 127.5 - 1.0
    canvas[:, mask] = rgb[:, None]
    return canvas


def _scene_params(rng: np.random.Generator, x: int):
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = list(COLORS)[rng.integers(len(COLORS))]
    position = list(POSITIONS)[rng.integers(len(POSITIONS))]
    # half the renders are elongated so the square crop has work to do
    aspect = rng.integers(4)
    long_side = (x + x // 2) // 2 * 2  # 1.5x, rounded to even
    if aspect == 0:
        h, w = long_side, x
    elif aspect == 1:
        h, w = x, long_side
    else:
        h, w = x, x
    return shape, color, position, h, w


def procedural_dataset(spec: DatasetSpec) -> Iterator[tuple]:
    """Endless, reproducible stream of (image, caption) scene pairs."""
    seed = spec.procedural_seed
    if seed is None:
        raise CorpusError(f"{spec.source!r} is not a procedural source")
    index = 0
    while True:
        rng = np.random.default_rng([seed, index])
        shape, color, position, h, w = _scene_params(rng, spec.train_size)
        yield render_scene(shape, color, position, h, w), f"{color} {shape} {position}"
        index += 1


def _manifest_pairs(path: Path):
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise CorpusError(f"{path}: manifest must be a JSON list")
    for entry in entries:
        img = path.parent / entry["image"]
        caption = entry.get("caption")
        if caption is None:
            caption = img.with_suffix(".txt").read_text().strip()
        yield img, caption


def _directory_pairs(root: Path):
    images = sorted(
        p for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    for img in images:
        sidecar = img.with_suffix(".txt")
        yield img, sidecar.read_text().strip() if sidecar.exists() else ""


def scan_corpus(spec: DatasetSpec) -> list:
    """Validated (path, caption) pairs under the spec's source.

    Every file is decode-checked once; corrupt files are dropped with a
    warning. More than half failing, or nothing found at all, is a corpus
    error. Only paths are retained, so samples are re-decoded on demand
    and nothing is cached between samples.
    """
    root = Path(spec.source)
    pairs = list(
        _manifest_pairs(root) if root.suffix == ".json" else _directory_pairs(root)
    )
    if not pairs:
        raise CorpusError(f"no images found under {spec.source}")
    good, failures = [], 0
    for img_path, caption in pairs:
        try:
            with Image.open(img_path) as img:
                img.verify()
            good.append((img_path, caption))
        except (OSError, SyntaxError, ValueError):
            failures += 1
    if failures:
        warnings.warn(f"skipped {failures} unreadable file(s) under {spec.source}")
    if failures > len(pairs) // 2:
        raise CorpusError(
            f"{failures} of {len(pairs)} files under {spec.source} failed to decode"
        )
    return good


def _crop_and_pack(image: np.ndarray, caption: str, spec: DatasetSpec,
                   rng: np.random.Generator, tokenizer: ToyTokenizer) -> CropSample:
    """Normalized image -> full map -> aligned crop -> tokenized caption."""
    patch = spec.patch
    c, h, w = image.shape
    h, w = (h // patch) * patch, (w // patch) * patch
    image = image[:, :h, :w]
    full_map = make_position_map(h // patch, w // patch)
    cropped, pos, origin = shifted_square_crop(image, full_map, rng, patch)
    return CropSample(
        image=cropped,
        pos=pos,
        caption=caption,
        caption_ids=tuple(tokenizer.encode(caption)),
        crop_origin=origin,
        source_dims=(h, w),
    )


def sample_at(
    spec: DatasetSpec,
    index: int,
    tokenizer: Optional[ToyTokenizer] = None,
    pairs: Optional[list] = None,
) -> CropSample:
    """The index-th sample of the stream, computable out of order.

    Samples are a pure function of (spec, index), which is what makes
    training resumable mid-stream. File sources accept a pre-scanned
    `pairs` list so callers avoid re-validating the corpus per sample.
    """
    tokenizer = tokenizer or ToyTokenizer()
    rng = np.random.default_rng([spec.seed, 1, index])
    pseed = spec.procedural_seed
    if pseed is not None:
        scene_rng = np.random.default_rng([pseed, index])
        shape, color, position, h, w = _scene_params(scene_rng, spec.train_size)
        image = render_scene(shape, color, position, h, w)
        caption = f"{color} {shape} {position}"
    else:
        if pairs is None:
            pairs = scan_corpus(spec)
        img_path, caption = pairs[int(rng.integers(len(pairs)))]
        with Image.open(img_path) as img:
            resized = resize_min_dim(img.convert("RGB"), spec.train_size)
            image = normalize_image(np.asarray(resized))
    return _crop_and_pack(image, caption, spec, rng, tokenizer)


def load_corpus(
    spec: DatasetSpec, tokenizer: Optional[ToyTokenizer] = None
) -> Iterator[CropSample]:
    """Endless CropSample stream over an on-disk corpus.

    Each sample decodes its file afresh: decode -> resize to the train
    size -> normalize -> full map -> shifted crop -> tokenize.
    """
    tokenizer = tokenizer or ToyTokenizer()
    pairs = scan_corpus(spec)
    for index in itertools.count():
        yield sample_at(spec, index, tokenizer, pairs=pairs)


def corpus_stream(
    spec: DatasetSpec, tokenizer: Optional[ToyTokenizer] = None
) -> Iterator[CropSample]:
    """Unified endless CropSample stream for either source kind."""
    tokenizer = tokenizer or ToyTokenizer()
    pairs = None if spec.procedural_seed is not None else scan_corpus(spec)
    for index in itertools.count():
        yield sample_at(spec, index, tokenizer, pairs=pairs)
