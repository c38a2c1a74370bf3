"""Land-use legends, class-map encoding/quantization, and raster tiling.

A Legend is an ordered list of (class_id, name, rgb, role) entries; a
ClassMap is an integer grid whose cells index into a Legend. Rasters are
(H, W, 3) float arrays in [0, 1]. All operations here are pure functions
on immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .errors import DataError, StructureError
from .validation import check_raster

ROLES = ("park_element", "environment_element", "mask")


@dataclass(frozen=True)
class LegendEntry:
    class_id: int
    name: str
    rgb: tuple[int, int, int]
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise StructureError(f"unknown legend role {self.role!r}")
        if len(self.rgb) != 3 or any(not (0 <= int(v) <= 255) for v in self.rgb):
            raise StructureError(f"rgb must be three 0..255 integers, got {self.rgb!r}")


@dataclass(frozen=True)
class Legend:
    """Ordered class_id -> (name, rgb, role) mapping.

    class_ids must be contiguous from 0 and colors pairwise distinct, so
    quantization of exact legend colors is exact.
    """

    entries: tuple[LegendEntry, ...]

    def __post_init__(self):
        ids = [e.class_id for e in self.entries]
        if not self.entries:
            raise StructureError("legend has no entries")
        if ids != list(range(len(ids))):
            raise StructureError(f"class_ids must be contiguous from 0, got {ids}")
        colors = [e.rgb for e in self.entries]
        if len(set(colors)) != len(colors):
            raise StructureError("legend rgb triples must be pairwise distinct")

    def __len__(self) -> int:
        return len(self.entries)

    def colors(self) -> np.ndarray:
        """(K, 3) uint8 array of legend colors in class_id order."""
        return np.array([e.rgb for e in self.entries], dtype=np.uint8)

    def class_id(self, name: str) -> int:
        for e in self.entries:
            if e.name == name:
                return e.class_id
        raise StructureError(f"legend has no class named {name!r}")

    def mask_class_id(self) -> int:
        """class_id of the (single) mask-role entry, e.g. the site boundary."""
        ids = [e.class_id for e in self.entries if e.role == "mask"]
        if not ids:
            raise StructureError("legend has no mask-role entry")
        return ids[0]


def _park_entries() -> tuple[LegendEntry, ...]:
    # The six park element classes use the project's fixed color code table;
    # Background is an internal addition so layouts can mark non-park area.
    return (
        LegendEntry(0, "Green land", (0, 255, 0), "park_element"),
        LegendEntry(1, "Water", (0, 255, 255), "park_element"),
        LegendEntry(2, "Roads", (241, 145, 73), "park_element"),
        LegendEntry(3, "Paving", (255, 255, 0), "park_element"),
        LegendEntry(4, "Structures", (255, 0, 255), "park_element"),
        LegendEntry(5, "Plant", (0, 152, 67), "park_element"),
        LegendEntry(6, "Background", (255, 255, 255), "environment_element"),
    )


def _environment_entries() -> tuple[LegendEntry, ...]:
    # Environment-side classes are project configuration, not a published
    # standard; Building intentionally shares the Structures color so both
    # domains render built mass identically.
    return (
        LegendEntry(0, "Background", (255, 255, 255), "environment_element"),
        LegendEntry(1, "Urban road", (128, 128, 128), "environment_element"),
        LegendEntry(2, "Building", (255, 0, 255), "environment_element"),
        LegendEntry(3, "Bare ground", (200, 200, 200), "environment_element"),
        LegendEntry(4, "Green land", (0, 255, 0), "environment_element"),
        LegendEntry(5, "Water", (0, 255, 255), "environment_element"),
        LegendEntry(6, "Site", (255, 0, 0), "mask"),
    )


PARK_LEGEND = Legend(_park_entries())
ENVIRONMENT_LEGEND = Legend(_environment_entries())


@dataclass(eq=False)
class ClassMap:
    """Row-major grid of class ids tied to a Legend."""

    data: np.ndarray
    legend: Legend

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise StructureError(f"class map must be 2-D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= len(self.legend)):
            bad = np.argwhere((arr < 0) | (arr >= len(self.legend)))[0]
            raise StructureError(
                f"class id {int(arr[tuple(bad)])} at (row={bad[0]}, col={bad[1]}) "
                f"not in legend of size {len(self.legend)}"
            )
        self.data = arr.astype(np.int64, copy=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClassMap):
            return NotImplemented
        return self.legend == other.legend and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class TileSpec:
    """Square tiling with a fixed stride; 1 <= stride <= tile_size."""

    tile_size: int
    stride: int

    def __post_init__(self):
        if self.tile_size < 1:
            raise StructureError(f"tile_size must be >= 1, got {self.tile_size}")
        if not 1 <= self.stride <= self.tile_size:
            raise StructureError(
                f"stride must satisfy 1 <= stride <= tile_size, got {self.stride}"
            )


def encode_classmap(cmap: ClassMap) -> np.ndarray:
    """Render a ClassMap to an (H, W, 3) raster using its legend colors."""
    data = cmap.data
    if data.size and (data.min() < 0 or data.max() >= len(cmap.legend)):
        bad = np.argwhere((data < 0) | (data >= len(cmap.legend)))[0]
        raise StructureError(
            f"class id {int(data[tuple(bad)])} at (row={bad[0]}, col={bad[1]}) "
            f"not in legend of size {len(cmap.legend)}"
        )
    colors = cmap.legend.colors().astype(np.float64) / 255.0
    return colors[data]


def quantize_to_classes(img: np.ndarray, legend: Legend) -> ClassMap:
    """Map every pixel to the legend entry with the nearest RGB color.

    Distances are Euclidean in RGB; ties resolve to the lowest class_id.
    """
    img = check_raster(img)
    colors = legend.colors().astype(np.float64) / 255.0
    # (H, W, K) squared distances; argmin returns the first (lowest id) minimum.
    d2 = ((img[:, :, None, :] - colors[None, None, :, :]) ** 2).sum(axis=-1)
    return ClassMap(np.argmin(d2, axis=2), legend)


def _axis_offsets(dim: int, tile: int, stride: int) -> list[int]:
    offsets = list(range(0, dim - tile + 1, stride))
    if offsets[-1] != dim - tile:  # edge-anchored final tile on remainders
        offsets.append(dim - tile)
    return offsets


def tile(img: np.ndarray, spec: TileSpec) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Cut an image into tile_size squares at stride intervals, row-major.

    Non-divisible dimensions get a final tile anchored to the edge, so every
    pixel is covered. Returns (tile, (row, col) origin) pairs.
    """
    img = check_raster(img)
    h, w = img.shape[:2]
    if h < spec.tile_size or w < spec.tile_size:
        raise StructureError(
            f"image {h}x{w} smaller than tile_size {spec.tile_size}"
        )
    tiles = []
    for r in _axis_offsets(h, spec.tile_size, spec.stride):
        for c in _axis_offsets(w, spec.tile_size, spec.stride):
            tiles.append((img[r : r + spec.tile_size, c : c + spec.tile_size].copy(), (r, c)))
    return tiles


def class_histogram(cmap: ClassMap) -> np.ndarray:
    """Per-class pixel fractions (length = legend size, summing to 1)."""
    if cmap.data.size == 0:
        raise StructureError("class map has zero area")
    counts = np.bincount(cmap.data.ravel(), minlength=len(cmap.legend))
    return counts / cmap.data.size


# ---------------------------------------------------------------------------
# Persistence: 8-bit RGB PNG for rasters, indexed PNG for class maps, and a
# plain-text key-value document for legends.
# ---------------------------------------------------------------------------

def save_raster(path: str | Path, img: np.ndarray, meters_per_pixel: float | None = None) -> None:
    img = check_raster(img)
    data = np.round(img * 255.0).astype(np.uint8)
    info = PngInfo()
    if meters_per_pixel is not None:
        info.add_text("meters_per_pixel", repr(float(meters_per_pixel)))
    Image.fromarray(data, mode="RGB").save(str(path), format="PNG", pnginfo=info)


def load_raster(path: str | Path, with_metadata: bool = False):
    try:
        im = Image.open(str(path))
    except FileNotFoundError:
        raise DataError(f"raster file not found: {path}") from None
    arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if not with_metadata:
        return arr
    mpp = im.info.get("meters_per_pixel")
    return arr, (float(mpp) if mpp is not None else None)


def save_classmap(path: str | Path, cmap: ClassMap) -> None:
    """Persist as an indexed PNG whose palette equals the legend colors."""
    if len(cmap.legend) > 256:
        raise StructureError("indexed PNG supports at most 256 classes")
    im = Image.fromarray(cmap.data.astype(np.uint8), mode="P")
    palette = np.zeros((256, 3), dtype=np.uint8)
    palette[: len(cmap.legend)] = cmap.legend.colors()
    im.putpalette(palette.ravel().tolist())
    im.save(str(path), format="PNG")


def load_classmap(path: str | Path, legend: Legend) -> ClassMap:
    try:
        im = Image.open(str(path))
    except FileNotFoundError:
        raise DataError(f"class map file not found: {path}") from None
    if im.mode != "P":
        raise DataError(f"{path} is not an indexed (palette) PNG")
    return ClassMap(np.asarray(im, dtype=np.int64), legend)


def save_legend(path: str | Path, legend: Legend) -> None:
    lines = []
    for e in legend.entries:
        r, g, b = e.rgb
        lines.append(f"class_id={e.class_id}\tname={e.name}\tr={r}\tg={g}\tb={b}\trole={e.role}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_legend(path: str | Path) -> Legend:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise DataError(f"legend file not found: {path}") from None
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields: dict[str, str] = {}
        for part in line.split("\t"):
            key, _, value = part.partition("=")
            fields[key.strip()] = value
        try:
            entries.append(
                LegendEntry(
                    class_id=int(fields["class_id"]),
                    name=fields["name"],
                    rgb=(int(fields["r"]), int(fields["g"]), int(fields["b"])),
                    role=fields["role"],
                )
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed legend line: {exc}") from None
    return Legend(tuple(entries))
