"""Procedural generator of aligned training scenes.

Each scene is a quadruple sharing one canvas: a remote-sensing style image
(noisy render of the environment), an environment class map (urban roads,
buildings, water, site mask), a park layout class map (design elements
inside the site rectangle), and a rendered scheme image. Scenes are pure
functions of (seed, params) using numpy's PCG64 generator, so corpora are
reproducible bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, StructureError
from .legend import (
    ENVIRONMENT_LEGEND,
    PARK_LEGEND,
    ClassMap,
    class_histogram,
    encode_classmap,
    load_classmap,
    load_raster,
    save_classmap,
    save_raster,
)

PRNG_ALGORITHM = "numpy-pcg64"
MANIFEST_VERSION = 1

# Smallest park side that still fits the ring path, its entrance stub and
# interior elements. Below this the road network cannot stay connected.
MIN_PARK_SIDE = 16
ROAD_WIDTH = 2
RING_INSET = 3

SIDES = ("top", "right", "bottom", "left")


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:  # exclusive
        return self.top + self.height

    @property
    def right(self) -> int:  # exclusive
        return self.left + self.width


@dataclass(frozen=True)
class SceneParams:
    canvas_size: int = 64
    road_grid_spacing: int = 16
    building_density: float = 0.5
    water_probability: float = 0.5
    park_rect: Rect = field(default_factory=lambda: Rect(12, 12, 40, 40))
    texture_noise: float = 0.2

    def __post_init__(self):
        if self.canvas_size < MIN_PARK_SIDE:
            raise StructureError(f"canvas_size must be >= {MIN_PARK_SIDE}")
        if self.road_grid_spacing < ROAD_WIDTH + 2:
            raise StructureError("road_grid_spacing too small for the road width")
        for name in ("building_density", "water_probability", "texture_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise StructureError(f"{name} must lie in [0, 1], got {v}")
        r = self.park_rect
        if r.top < 0 or r.left < 0 or r.bottom > self.canvas_size or r.right > self.canvas_size:
            raise StructureError(f"park_rect {r} not fully inside {self.canvas_size}px canvas")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SceneParams":
        d = dict(d)
        d["park_rect"] = Rect(**d["park_rect"])
        return SceneParams(**d)


@dataclass(eq=False)
class SceneQuad:
    remote: np.ndarray
    environment: ClassMap
    layout: ClassMap
    scheme: np.ndarray
    seed: int

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.round(self.remote * 255).astype(np.uint8).tobytes())
        h.update(self.environment.data.astype(np.uint8).tobytes())
        h.update(self.layout.data.astype(np.uint8).tobytes())
        h.update(np.round(self.scheme * 255).astype(np.uint8).tobytes())
        return h.hexdigest()


@dataclass
class Corpus:
    scenes: list[SceneQuad]
    manifest: dict


def _valid_entrance_sides(params: SceneParams) -> list[str]:
    r, n = params.park_rect, params.canvas_size
    sides = []
    if r.top >= ROAD_WIDTH:
        sides.append("top")
    if n - r.right >= ROAD_WIDTH:
        sides.append("right")
    if n - r.bottom >= ROAD_WIDTH:
        sides.append("bottom")
    if r.left >= ROAD_WIDTH:
        sides.append("left")
    return sides


def _grid_positions(phase: int, spacing: int, limit: int) -> list[int]:
    start = phase % spacing
    return [p for p in range(start - spacing, limit, spacing) if p + ROAD_WIDTH > 0 and p < limit]


def _draw_ellipse(mask_shape, cy, cx, ry, rx):
    yy, xx = np.ogrid[: mask_shape[0], : mask_shape[1]]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _build_environment(rng: np.random.Generator, params: SceneParams):
    n = params.canvas_size
    env = np.full((n, n), ENVIRONMENT_LEGEND.class_id("Bare ground"), dtype=np.int64)
    rect = params.park_rect

    sides = _valid_entrance_sides(params)
    if not sides:
        raise StructureError(
            "park_rect leaves no room for a flush urban road on any side"
        )
    entrance_side = sides[rng.integers(len(sides))]

    # Snap one grid line flush against the entrance side of the park; the
    # perpendicular phase is free. This is what couples layout entrances to
    # visible urban roads.
    if entrance_side in ("left", "right"):
        phase_v = (rect.left - ROAD_WIDTH) if entrance_side == "left" else rect.right
        phase_h = int(rng.integers(params.road_grid_spacing))
    else:
        phase_h = (rect.top - ROAD_WIDTH) if entrance_side == "top" else rect.bottom
        phase_v = int(rng.integers(params.road_grid_spacing))
    phase_v %= params.road_grid_spacing
    phase_h %= params.road_grid_spacing

    # Green patches over the bare base.
    for _ in range(int(rng.integers(2, 5))):
        t, l = rng.integers(0, n, size=2)
        h, w = rng.integers(6, max(7, n // 3), size=2)
        env[t : t + h, l : l + w] = ENVIRONMENT_LEGEND.class_id("Green land")

    # Optional water blob.
    if rng.random() < params.water_probability:
        cy, cx = rng.integers(0, n, size=2)
        ry, rx = rng.integers(4, max(5, n // 6), size=2)
        env[_draw_ellipse(env.shape, cy, cx, ry, rx)] = ENVIRONMENT_LEGEND.class_id("Water")

    # Urban road grid.
    road_id = ENVIRONMENT_LEGEND.class_id("Urban road")
    v_positions = _grid_positions(phase_v, params.road_grid_spacing, n)
    h_positions = _grid_positions(phase_h, params.road_grid_spacing, n)
    road_mask = np.zeros((n, n), dtype=bool)
    for x in v_positions:
        road_mask[:, max(x, 0) : x + ROAD_WIDTH] = True
    for y in h_positions:
        road_mask[max(y, 0) : y + ROAD_WIDTH, :] = True

    # Buildings inside grid cells that do not intersect the park.
    bld_id = ENVIRONMENT_LEGEND.class_id("Building")
    v_edges = sorted({0, n} | {max(p, 0) for p in v_positions} | {p + ROAD_WIDTH for p in v_positions if p + ROAD_WIDTH <= n})
    h_edges = sorted({0, n} | {max(p, 0) for p in h_positions} | {p + ROAD_WIDTH for p in h_positions if p + ROAD_WIDTH <= n})
    for i in range(len(h_edges) - 1):
        for j in range(len(v_edges) - 1):
            t, b = h_edges[i], h_edges[i + 1]
            l, r = v_edges[j], v_edges[j + 1]
            if road_mask[t:b, l:r].any() or b - t < 6 or r - l < 6:
                continue
            overlaps_park = not (b <= rect.top or t >= rect.bottom or r <= rect.left or l >= rect.right)
            if overlaps_park:
                continue
            if rng.random() < params.building_density:
                bh = int(rng.integers(3, b - t - 2))
                bw = int(rng.integers(3, r - l - 2))
                bt = t + 1 + int(rng.integers(max(1, b - t - bh - 1)))
                bl = l + 1 + int(rng.integers(max(1, r - l - bw - 1)))
                env[bt : bt + bh, bl : bl + bw] = bld_id

    env[road_mask] = road_id
    env[rect.top : rect.bottom, rect.left : rect.right] = ENVIRONMENT_LEGEND.mask_class_id()
    return env, entrance_side


def _stub_positions(rng: np.random.Generator, side_len: int, count: int) -> list[int]:
    # Keep stubs off the ring corners and apart from each other.
    lo, hi = RING_INSET + ROAD_WIDTH, side_len - RING_INSET - 2 * ROAD_WIDTH
    if hi <= lo:
        return [side_len // 2]
    positions = []
    for _ in range(count):
        for _ in range(8):  # rejection sampling with a deterministic cap
            p = int(rng.integers(lo, hi))
            if all(abs(p - q) > 2 * ROAD_WIDTH for q in positions):
                positions.append(p)
                break
    return positions


def _build_layout(rng: np.random.Generator, params: SceneParams, entrance_side: str):
    n = params.canvas_size
    rect = params.park_rect
    layout = np.full((n, n), PARK_LEGEND.class_id("Background"), dtype=np.int64)
    green = PARK_LEGEND.class_id("Green land")
    roads = PARK_LEGEND.class_id("Roads")
    layout[rect.top : rect.bottom, rect.left : rect.right] = green

    # Ring path inset from the site boundary.
    it, il = rect.top + RING_INSET, rect.left + RING_INSET
    ib, ir = rect.bottom - RING_INSET, rect.right - RING_INSET
    layout[it : it + ROAD_WIDTH, il:ir] = roads
    layout[ib - ROAD_WIDTH : ib, il:ir] = roads
    layout[it:ib, il : il + ROAD_WIDTH] = roads
    layout[it:ib, ir - ROAD_WIDTH : ir] = roads

    # Entrance stubs connect the ring to the flush urban road outside.
    n_stubs = 1 + int(rng.random() < 0.35)
    side_len = rect.width if entrance_side in ("top", "bottom") else rect.height
    for pos in _stub_positions(rng, side_len, n_stubs):
        if entrance_side == "top":
            layout[rect.top : it, rect.left + pos : rect.left + pos + ROAD_WIDTH] = roads
        elif entrance_side == "bottom":
            layout[ib : rect.bottom, rect.left + pos : rect.left + pos + ROAD_WIDTH] = roads
        elif entrance_side == "left":
            layout[rect.top + pos : rect.top + pos + ROAD_WIDTH, rect.left : il] = roads
        else:
            layout[rect.top + pos : rect.top + pos + ROAD_WIDTH, ir : rect.right] = roads

    def paint_on_green(mask, class_id):
        layout[mask & (layout == green)] = class_id

    # Paving squares tucked into the ring's inner corners.
    paving = PARK_LEGEND.class_id("Paving")
    corners = [
        (it + ROAD_WIDTH, il + ROAD_WIDTH),
        (it + ROAD_WIDTH, ir - ROAD_WIDTH - 5),
        (ib - ROAD_WIDTH - 5, il + ROAD_WIDTH),
        (ib - ROAD_WIDTH - 5, ir - ROAD_WIDTH - 5),
    ]
    order = rng.permutation(4)
    for k in range(int(rng.integers(1, 4))):
        cy, cx = corners[order[k]]
        size = int(rng.integers(3, 6))
        m = np.zeros_like(layout, dtype=bool)
        m[cy : cy + size, cx : cx + size] = True
        paint_on_green(m, paving)

    # Optional pond in the interior (skipped when the park is too tight).
    pond_fits = (ib - ROAD_WIDTH - 3 > it + ROAD_WIDTH + 3) and (ir - ROAD_WIDTH - 3 > il + ROAD_WIDTH + 3)
    if rng.random() < params.water_probability and pond_fits:
        cy = int(rng.integers(it + ROAD_WIDTH + 3, ib - ROAD_WIDTH - 3))
        cx = int(rng.integers(il + ROAD_WIDTH + 3, ir - ROAD_WIDTH - 3))
        ry, rx = rng.integers(3, 6, size=2)
        paint_on_green(_draw_ellipse(layout.shape, cy, cx, ry, rx), PARK_LEGEND.class_id("Water"))

    # One or two structures.
    structures = PARK_LEGEND.class_id("Structures")
    for _ in range(int(rng.integers(1, 3))):
        sh, sw = rng.integers(3, 6, size=2)
        sy = int(rng.integers(it + ROAD_WIDTH, max(it + ROAD_WIDTH + 1, ib - ROAD_WIDTH - sh)))
        sx = int(rng.integers(il + ROAD_WIDTH, max(il + ROAD_WIDTH + 1, ir - ROAD_WIDTH - sw)))
        m = np.zeros_like(layout, dtype=bool)
        m[sy : sy + sh, sx : sx + sw] = True
        paint_on_green(m, structures)

    # Plant discs scattered on remaining green.
    plant = PARK_LEGEND.class_id("Plant")
    discs = []
    for _ in range(int(rng.integers(6, 13))):
        r = int(rng.integers(1, 3))
        cy = int(rng.integers(rect.top + r, rect.bottom - r))
        cx = int(rng.integers(rect.left + r, rect.right - r))
        mask = _draw_ellipse(layout.shape, cy, cx, r + 0.5, r + 0.5)
        if (layout[mask] == green).all():
            layout[mask] = plant
            discs.append((cy, cx, r))
    return layout, discs


_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def _roads_connected_and_touching(layout: np.ndarray, env: np.ndarray) -> bool:
    road_mask = layout == PARK_LEGEND.class_id("Roads")
    labels, count = ndimage.label(road_mask, structure=_FOUR_CONNECTED)
    if count != 1:
        return False
    urban = env == ENVIRONMENT_LEGEND.class_id("Urban road")
    touching = ndimage.binary_dilation(road_mask, structure=_FOUR_CONNECTED) & urban
    return bool(touching.any())


def _render_remote(rng: np.random.Generator, env: np.ndarray, params: SceneParams) -> np.ndarray:
    base = encode_classmap(ClassMap(env, ENVIRONMENT_LEGEND))
    tn = params.texture_noise
    if tn == 0.0:
        return base
    # Scene-constant per-class tint plus per-pixel speckle, both bounded so
    # the label remains recoverable (the extraction task stays learnable).
    tint = rng.uniform(-1.0, 1.0, size=(len(ENVIRONMENT_LEGEND), 3))
    speckle = rng.uniform(-1.0, 1.0, size=base.shape)
    noisy = base * (1.0 + 0.9 * tn * tint[env]) + 0.75 * tn * speckle
    return np.clip(noisy, 0.0, 1.0)


def _render_scheme(
    rng: np.random.Generator, layout: np.ndarray, discs, params: SceneParams
) -> np.ndarray:
    base = encode_classmap(ClassMap(layout, PARK_LEGEND))
    tn = params.texture_noise
    field = rng.uniform(-1.0, 1.0, size=base.shape)
    img = base * (1.0 + 0.3 * tn * field)
    # Circular plant symbols: darker rim, lighter crown highlight.
    plant_rgb = np.array(PARK_LEGEND.colors()[PARK_LEGEND.class_id("Plant")]) / 255.0
    for cy, cx, r in discs:
        rim = _draw_ellipse(layout.shape, cy, cx, r + 0.5, r + 0.5) & ~_draw_ellipse(
            layout.shape, cy, cx, max(r - 0.5, 0.4), max(r - 0.5, 0.4)
        )
        crown = _draw_ellipse(layout.shape, cy - 0.3, cx - 0.3, max(r - 1.2, 0.4), max(r - 1.2, 0.4))
        img[rim] = plant_rgb * 0.6
        img[crown] = np.clip(plant_rgb * 1.25, 0, 1)
    return np.clip(img, 0.0, 1.0)


def generate_scene(seed: int, params: SceneParams | None = None) -> SceneQuad:
    """Build one deterministic scene quadruple for (seed, params)."""
    params = params or SceneParams()
    rect = params.park_rect
    if rect.height < MIN_PARK_SIDE or rect.width < MIN_PARK_SIDE:
        raise StructureError(
            f"park_rect sides must be >= {MIN_PARK_SIDE}px to host a connected "
            f"path network, got {rect.height}x{rect.width}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    env, entrance_side = _build_environment(rng, params)
    layout, discs = _build_layout(rng, params, entrance_side)
    if not _roads_connected_and_touching(layout, env):
        raise StructureError(f"scene grammar produced a disconnected road network (seed {seed})")
    remote = _render_remote(rng, env, params)
    scheme = _render_scheme(rng, layout, discs, params)
    return SceneQuad(
        remote=remote,
        environment=ClassMap(env, ENVIRONMENT_LEGEND),
        layout=ClassMap(layout, PARK_LEGEND),
        scheme=scheme,
        seed=seed,
    )


def generate_corpus(
    n: int,
    seed: int = 0,
    params: SceneParams | None = None,
    class_floor: float = 1e-3,
) -> Corpus:
    """Generate scenes for seeds seed..seed+n-1 plus a manifest."""
    if n < 1:
        raise StructureError(f"corpus size must be >= 1, got {n}")
    params = params or SceneParams()
    scenes = [generate_scene(seed + i, params) for i in range(n)]

    park_hist = np.mean([class_histogram(s.layout) for s in scenes], axis=0)
    env_hist = np.mean([class_histogram(s.environment) for s in scenes], axis=0)
    if n >= 50:
        park_ids = [e.class_id for e in PARK_LEGEND.entries if e.role == "park_element"]
        lacking = [PARK_LEGEND.entries[i].name for i in park_ids if park_hist[i] < class_floor]
        if lacking:
            raise StructureError(
                f"corpus under-represents park classes {lacking} (floor {class_floor})"
            )
    manifest = {
        "version": MANIFEST_VERSION,
        "prng": PRNG_ALGORITHM,
        "n": n,
        "seed_start": seed,
        "seeds": list(range(seed, seed + n)),
        "params": params.to_dict(),
        "class_floor": class_floor,
        "park_class_fractions": {
            e.name: float(park_hist[e.class_id]) for e in PARK_LEGEND.entries
        },
        "environment_class_fractions": {
            e.name: float(env_hist[e.class_id]) for e in ENVIRONMENT_LEGEND.entries
        },
    }
    return Corpus(scenes=scenes, manifest=manifest)


def split_corpus(corpus: Corpus, train_fraction: float) -> tuple[Corpus, Corpus]:
    """Deterministic seed-order split into train/test parts."""
    if not 0.0 < train_fraction < 1.0:
        raise StructureError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(corpus.scenes)
    n_train = int(np.floor(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise StructureError(
            f"train_fraction {train_fraction} leaves an empty side for {n} scenes"
        )
    scenes = sorted(corpus.scenes, key=lambda s: s.seed)
    base = dict(corpus.manifest)

    def part(subset, name):
        return Corpus(
            subset,
            {**base, "split": name, "n": len(subset), "seeds": [s.seed for s in subset]},
        )

    return part(scenes[:n_train], "train"), part(scenes[n_train:], "test")


def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(corpus.scenes):
        d = out / f"scene_{i:04d}"
        d.mkdir(exist_ok=True)
        save_raster(d / "remote.png", scene.remote)
        save_classmap(d / "environment.png", scene.environment)
        save_classmap(d / "layout.png", scene.layout)
        save_raster(d / "scheme.png", scene.scheme)
    (out / "manifest.json").write_text(json.dumps(corpus.manifest, indent=2) + "\n")


def load_corpus(corpus_dir: str | Path) -> Corpus:
    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    scenes = []
    for i, seed in enumerate(manifest["seeds"]):
        d = root / f"scene_{i:04d}"
        try:
            scenes.append(
                SceneQuad(
                    remote=load_raster(d / "remote.png"),
                    environment=load_classmap(d / "environment.png", ENVIRONMENT_LEGEND),
                    layout=load_classmap(d / "layout.png", PARK_LEGEND),
                    scheme=load_raster(d / "scheme.png"),
                    seed=seed,
                )
            )
        except DataError as exc:
            raise DataError(f"corpus scene {i} incomplete: {exc}") from None
    return Corpus(scenes=scenes, manifest=manifest)
