"""Procedural scenes with exact ground-truth control maps.

A scene is 1..4 flat-colored shapes (circle / square / triangle) on a white
background.  Because the geometry is known, every control-map kind has an
exact ground truth, the deterministic pixel extractors can be checked against
it, and captions come from a closed grammar so text alignment is decidable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import vocab
from .errors import ConfigurationError, ContractError, DomainError

CONDITION_KINDS = ("edge", "softedge", "seg", "luma")
SHAPE_KINDS = ("circle", "square", "triangle")
CORRUPTION_MODES = ("gaussian_noise", "block_dropout", "affine_jitter", "swap_scene")

# 8 saturated shape colors; index order matches vocab.COLOR_WORDS.
PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],  # red
        [0.0, 1.0, 0.0],  # green
        [0.0, 0.0, 1.0],  # blue
        [1.0, 1.0, 0.0],  # yellow
        [1.0, 0.0, 1.0],  # magenta
        [0.0, 1.0, 1.0],  # cyan
        [1.0, 0.5, 0.0],  # orange
        [0.5, 0.0, 1.0],  # purple
    ]
)
BACKGROUND_CLASS = len(PALETTE)  # 8: white background
FULL_PALETTE = np.vstack([PALETTE, [[1.0, 1.0, 1.0]]])
NUM_SEG_CLASSES = len(FULL_PALETTE)  # 9

DEFAULT_RESOLUTION = 32
EDGE_THRESHOLD = 0.25
SOFTEDGE_SIGMA = 1.0
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_CONNECT4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])

# /8 makes the kernel a unit-weight smoothed central difference: a full-contrast
# step reads 0.5, a diagonal-only (corner) contact reads sqrt(2)/8 ~ 0.177,
# so the 0.25 threshold separates true 4-neighbour boundaries from corner touches.
_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
_SOBEL_Y = _SOBEL_X.T


def _gaussian3(sigma: float) -> np.ndarray:
    k = np.exp(-np.arange(-1, 2) ** 2 / (2.0 * sigma**2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


_GAUSS3 = _gaussian3(SOFTEDGE_SIGMA)


@dataclass(frozen=True)
class Shape:
    kind: str  # circle | square | triangle
    color_id: int  # palette index 0..7
    center: tuple[float, float]  # (x, y) in [0,1]^2, y grows downward
    size: float  # radius-like extent in [0.1, 0.4]
    layer: int  # occlusion rank, higher occludes


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple[Shape, ...]
    background_color_id: int
    caption_tokens: tuple[int, ...]
    seed: int

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "background_color_id": self.background_color_id,
            "caption_tokens": list(self.caption_tokens),
            "shapes": [
                {
                    "kind": s.kind,
                    "color_id": s.color_id,
                    "center": [s.center[0], s.center[1]],
                    "size": s.size,
                    "layer": s.layer,
                }
                for s in self.shapes
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        shapes = tuple(
            Shape(
                kind=s["kind"],
                color_id=int(s["color_id"]),
                center=(float(s["center"][0]), float(s["center"][1])),
                size=float(s["size"]),
                layer=int(s["layer"]),
            )
            for s in d["shapes"]
        )
        return SceneSpec(
            shapes=shapes,
            background_color_id=int(d["background_color_id"]),
            caption_tokens=tuple(int(t) for t in d["caption_tokens"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class ConditionMap:
    kind: str
    data: np.ndarray  # H x W; float for edge/softedge/luma, int for seg
    provenance: str = "ground_truth"  # ground_truth | extracted | corrupted

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise ContractError(f"unknown condition kind {self.kind!r}")
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise ContractError(f"condition map must be square 2-D, got {self.data.shape}")

    @property
    def resolution(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class CorruptionSpec:
    mode: str
    severity: float
    seed: int
    donor_scene_id: int | None = None


@dataclass(frozen=True)
class GenerationConfig:
    resolution: int = DEFAULT_RESOLUTION
    min_shapes: int = 1
    max_shapes: int = 4
    size_range: tuple[float, float] = (0.1, 0.35)
    center_range: tuple[float, float] = (0.2, 0.8)
    min_visible_pixels: int = 8

    def validate(self) -> None:
        if self.resolution < 16:
            raise ConfigurationError(f"resolution must be >= 16, got {self.resolution}")
        if self.resolution % 4 != 0:
            raise ConfigurationError("resolution must be divisible by 4")
        if len(PALETTE) != 8:
            raise ConfigurationError("palette must have 8 entries")
        if not 1 <= self.min_shapes <= self.max_shapes <= 4:
            raise ConfigurationError("shape count bounds must satisfy 1 <= min <= max <= 4")
        lo, hi = self.size_range
        if not 0.1 <= lo <= hi <= 0.4:
            raise ConfigurationError("size_range must lie within [0.1, 0.4]")


def caption_tokens_for_shapes(shapes: tuple[Shape, ...]) -> tuple[int, ...]:
    """Templated caption: 'a {color} {shape}' chained by spatial relations."""
    words: list[str] = ["a", vocab.COLOR_WORDS[shapes[0].color_id], shapes[0].kind]
    for prev, cur in zip(shapes, shapes[1:]):
        dx = cur.center[0] - prev.center[0]
        dy = cur.center[1] - prev.center[1]
        if abs(dx) >= abs(dy):
            words += ["left", "of"] if dx > 0 else ["right", "of"]
        else:
            words += ["above"] if dy > 0 else ["below"]
        words += ["a", vocab.COLOR_WORDS[cur.color_id], cur.kind]
    return tuple([vocab.BOS_ID] + vocab.encode(words) + [vocab.EOS_ID])


def _shape_mask(shape: Shape, resolution: int) -> np.ndarray:
    coords = (np.arange(resolution) + 0.5) / resolution
    x, y = np.meshgrid(coords, coords)  # x: columns, y: rows
    cx, cy = shape.center
    s = shape.size
    if shape.kind == "circle":
        return (x - cx) ** 2 + (y - cy) ** 2 <= s**2
    if shape.kind == "square":
        return np.maximum(np.abs(x - cx), np.abs(y - cy)) <= s
    if shape.kind == "triangle":
        # isoceles, apex up: A=(cx, cy-s), B=(cx-s, cy+s), C=(cx+s, cy+s)
        ax, ay = cx, cy - s
        bx, by = cx - s, cy + s
        cx2, cy2 = cx + s, cy + s
        d1 = (x - bx) * (ay - by) - (y - by) * (ax - bx)
        d2 = (x - cx2) * (by - cy2) - (y - cy2) * (bx - cx2)
        d3 = (x - ax) * (cy2 - ay) - (y - ay) * (cx2 - ax)
        neg = (d1 <= 0) & (d2 <= 0) & (d3 <= 0)
        pos = (d1 >= 0) & (d2 >= 0) & (d3 >= 0)
        return neg | pos
    raise ContractError(f"unknown shape kind {shape.kind!r}")


def seg_map_for_scene(scene: SceneSpec, resolution: int) -> np.ndarray:
    """Analytic class-id map: background everywhere, shapes painted in ascending layer order."""
    seg = np.full((resolution, resolution), BACKGROUND_CLASS, dtype=np.int64)
    for shape in sorted(scene.shapes, key=lambda s: s.layer):
        seg[_shape_mask(shape, resolution)] = shape.color_id
    return seg


def edge_from_seg(seg: np.ndarray) -> np.ndarray:
    """Boundary pixels: any 4-neighbour with a different class id."""
    edge = np.zeros(seg.shape, dtype=np.float64)
    edge[:-1, :][seg[:-1, :] != seg[1:, :]] = 1.0
    edge[1:, :][seg[1:, :] != seg[:-1, :]] = 1.0
    edge[:, :-1][seg[:, :-1] != seg[:, 1:]] = 1.0
    edge[:, 1:][seg[:, 1:] != seg[:, :-1]] = 1.0
    return edge


def luma_of(image: np.ndarray) -> np.ndarray:
    return image @ LUMA_WEIGHTS


def box_down_up(grid: np.ndarray) -> np.ndarray:
    """Box-downsample 2x then nearest-upsample back to the input resolution."""
    h, w = grid.shape
    if h % 2 or w % 2:
        raise ContractError("box downsample needs even resolution")
    down = grid.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return np.repeat(np.repeat(down, 2, axis=0), 2, axis=1)


def sobel_magnitude(image: np.ndarray) -> np.ndarray:
    """Per-channel Sobel gradient magnitude, max over channels; unit step -> 1.0."""
    if image.ndim == 2:
        image = image[:, :, None]
    mags = []
    for c in range(image.shape[2]):
        gx = ndimage.correlate(image[:, :, c], _SOBEL_X, mode="nearest")
        gy = ndimage.correlate(image[:, :, c], _SOBEL_Y, mode="nearest")
        mags.append(np.sqrt(gx**2 + gy**2))
    return np.max(mags, axis=0)


def _check_image_domain(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"expected H x W x 3 image, got shape {image.shape}")
    if image.min() < -1e-9 or image.max() > 1.0 + 1e-9:
        raise DomainError("image values must lie in [0, 1]")
    return np.clip(image, 0.0, 1.0)


def extract_condition(image: np.ndarray, kind: str) -> ConditionMap:
    """Deterministic condition extractor playing the discriminative-model role."""
    image = _check_image_domain(image)
    if kind == "edge":
        data = (sobel_magnitude(image) >= EDGE_THRESHOLD).astype(np.float64)
    elif kind == "softedge":
        mag = sobel_magnitude(image)
        data = np.clip(ndimage.correlate(mag, _GAUSS3, mode="nearest"), 0.0, 1.0)
    elif kind == "seg":
        dist = ((image[:, :, None, :] - FULL_PALETTE[None, None, :, :]) ** 2).sum(axis=3)
        data = np.argmin(dist, axis=2).astype(np.int64)
    elif kind == "luma":
        data = box_down_up(luma_of(image))
    else:
        raise ContractError(f"unknown condition kind {kind!r}")
    return ConditionMap(kind=kind, data=data, provenance="extracted")


@dataclass(frozen=True)
class RenderResult:
    image: np.ndarray
    conditions: dict[str, ConditionMap] = field(default_factory=dict)


def render(scene: SceneSpec, resolution: int = DEFAULT_RESOLUTION) -> RenderResult:
    """Rasterize a scene and compute all four ground-truth condition maps."""
    seg = seg_map_for_scene(scene, resolution)
    image = FULL_PALETTE[seg]
    softedge = extract_condition(image, "softedge")
    conditions = {
        "seg": ConditionMap("seg", seg, "ground_truth"),
        "edge": ConditionMap("edge", edge_from_seg(seg), "ground_truth"),
        "luma": ConditionMap("luma", box_down_up(luma_of(image)), "ground_truth"),
        "softedge": ConditionMap("softedge", softedge.data, "ground_truth"),
    }
    return RenderResult(image=image, conditions=conditions)


def gen_scene(seed: int, config: GenerationConfig | None = None) -> SceneSpec:
    """Deterministically sample a scene; rejects layouts with invisible shapes."""
    config = config or GenerationConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    for _ in range(64):
        n = int(rng.integers(config.min_shapes, config.max_shapes + 1))
        color_ids = rng.choice(len(PALETTE), size=n, replace=False)
        layers = rng.permutation(n)
        shapes = []
        for i in range(n):
            kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
            cx, cy = rng.uniform(*config.center_range, size=2)
            size = float(rng.uniform(*config.size_range))
            shapes.append(
                Shape(kind=kind, color_id=int(color_ids[i]), center=(float(cx), float(cy)),
                      size=size, layer=int(layers[i]))
            )
        shapes = tuple(shapes)
        scene = SceneSpec(
            shapes=shapes,
            background_color_id=BACKGROUND_CLASS,
            caption_tokens=caption_tokens_for_shapes(shapes),
            seed=seed,
        )
        seg = seg_map_for_scene(scene, config.resolution)
        if all(
            (seg == s.color_id).sum() >= config.min_visible_pixels for s in shapes
        ):
            return scene
    raise ConfigurationError(f"could not place visible shapes for seed {seed}")


def corrupt(cond: ConditionMap, spec: CorruptionSpec, donor: ConditionMap | None = None) -> ConditionMap:
    """Deterministic corruption producing a conflicting version of a condition map."""
    if not 0.0 < spec.severity <= 1.0:
        raise DomainError(f"severity must be in (0, 1], got {spec.severity}")
    if spec.mode not in CORRUPTION_MODES:
        raise DomainError(f"unknown corruption mode {spec.mode!r}")
    rng = np.random.default_rng(spec.seed)
    h, w = cond.data.shape
    if spec.mode == "gaussian_noise":
        noisy = cond.data.astype(np.float64) + rng.normal(0.0, spec.severity, size=(h, w))
        if cond.kind == "edge":
            data = (noisy >= 0.5).astype(np.float64)
        elif cond.kind == "seg":
            data = np.clip(np.rint(noisy), 0, NUM_SEG_CLASSES - 1).astype(np.int64)
        else:
            data = np.clip(noisy, 0.0, 1.0)
    elif spec.mode == "block_dropout":
        bh = max(1, int(round(spec.severity * h)))
        bw = max(1, int(round(spec.severity * w)))
        r0 = int(rng.integers(0, h - bh + 1))
        c0 = int(rng.integers(0, w - bw + 1))
        data = cond.data.copy()
        data[r0 : r0 + bh, c0 : c0 + bw] = 0
    elif spec.mode == "affine_jitter":
        m = math.ceil(spec.severity * h / 4)
        dy = m * int(rng.choice([-1, 1]))
        dx = m * int(rng.choice([-1, 1]))
        fill = {"edge": 0.0, "softedge": 0.0, "luma": 1.0, "seg": BACKGROUND_CLASS}[cond.kind]
        data = np.full_like(cond.data, fill)
        src_r = slice(max(0, -dy), min(h, h - dy))
        src_c = slice(max(0, -dx), min(w, w - dx))
        dst_r = slice(max(0, dy), min(h, h + dy))
        dst_c = slice(max(0, dx), min(w, w + dx))
        data[dst_r, dst_c] = cond.data[src_r, src_c]
    else:  # swap_scene
        if donor is None:
            raise DomainError("swap_scene corruption requires a donor condition map")
        if donor.kind != cond.kind:
            raise ContractError(f"donor kind {donor.kind!r} != condition kind {cond.kind!r}")
        data = donor.data.copy()
    return ConditionMap(kind=cond.kind, data=data, provenance="corrupted")


def _largest_component(mask: np.ndarray) -> tuple[int, tuple[float, float]]:
    """(area, normalized centroid) of the largest 4-connected component; (0, (nan, nan)) if empty."""
    labels, n = ndimage.label(mask, structure=_CONNECT4)
    if n == 0:
        return 0, (float("nan"), float("nan"))
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n + 1))
    best = int(np.argmax(areas)) + 1
    rows, cols = np.nonzero(labels == best)
    h, w = mask.shape
    centroid = ((cols.mean() + 0.5) / w, (rows.mean() + 0.5) / h)
    return int(areas[best - 1]), centroid


def alignment_check(scene: SceneSpec, image: np.ndarray) -> float:
    """Fraction of scene shapes recovered in the image's segmentation extraction.

    A shape passes when the extracted seg map contains a 4-connected component
    of its class with area >= 50% of the ground-truth visible region and
    centroid within 0.15 (normalized) of the ground-truth centroid.
    """
    image = _check_image_domain(image)
    resolution = image.shape[0]
    seg_gt = seg_map_for_scene(scene, resolution)
    seg_pred = extract_condition(image, "seg").data
    passed = 0
    for shape in scene.shapes:
        gt_area, gt_centroid = _largest_component(seg_gt == shape.color_id)
        if gt_area == 0:
            continue  # invisible shape cannot be verified: counts as fail
        labels, n = ndimage.label(seg_pred == shape.color_id, structure=_CONNECT4)
        ok = False
        for comp in range(1, n + 1):
            rows, cols = np.nonzero(labels == comp)
            if len(rows) < 0.5 * gt_area:
                continue
            cx = (cols.mean() + 0.5) / resolution
            cy = (rows.mean() + 0.5) / resolution
            if math.hypot(cx - gt_centroid[0], cy - gt_centroid[1]) <= 0.15:
                ok = True
                break
        passed += ok
    return passed / len(scene.shapes)


def drop_shape(scene: SceneSpec, index: int) -> SceneSpec:
    """Scene with one shape removed (layers re-ranked); used by checker tests."""
    kept = [s for i, s in enumerate(scene.shapes) if i != index]
    order = {s.layer: i for i, s in enumerate(sorted(kept, key=lambda s: s.layer))}
    shapes = tuple(replace(s, layer=order[s.layer]) for s in kept)
    return replace(scene, shapes=shapes, caption_tokens=caption_tokens_for_shapes(shapes))
