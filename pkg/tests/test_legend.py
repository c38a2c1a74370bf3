import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parkgen.errors import DataError, StructureError
from parkgen.legend import (
    ENVIRONMENT_LEGEND,
    PARK_LEGEND,
    ClassMap,
    Legend,
    LegendEntry,
    TileSpec,
    class_histogram,
    encode_classmap,
    load_classmap,
    load_legend,
    load_raster,
    quantize_to_classes,
    save_classmap,
    save_legend,
    save_raster,
    tile,
)

PARK_COLORS = {
    "Green land": (0, 255, 0),
    "Water": (0, 255, 255),
    "Roads": (241, 145, 73),
    "Paving": (255, 255, 0),
    "Structures": (255, 0, 255),
    "Plant": (0, 152, 67),
}


def brute_force_nearest(pixel, legend):
    """Independent oracle: linear scan over legend colors, lowest id on ties."""
    best_id, best_d = None, None
    for entry in legend.entries:
        d = sum((p - c / 255.0) ** 2 for p, c in zip(pixel, entry.rgb))
        if best_d is None or d < best_d:  # strict: keeps lowest id on ties
            best_id, best_d = entry.class_id, d
    return best_id


def expected_offsets(dim, tile_size, stride):
    """Independent oracle: enumerate stride offsets, then edge-anchor."""
    offs = []
    pos = 0
    while pos + tile_size <= dim:
        offs.append(pos)
        pos += stride
    if offs[-1] + tile_size < dim:
        offs.append(dim - tile_size)
    return offs


class TestLegendInvariants:
    def test_park_legend_matches_code_table(self):
        for name, rgb in PARK_COLORS.items():
            entry = PARK_LEGEND.entries[PARK_LEGEND.class_id(name)]
            assert entry.rgb == rgb
            assert entry.role == "park_element"
        park_roles = [e for e in PARK_LEGEND.entries if e.role == "park_element"]
        assert len(park_roles) == 6

    def test_contiguous_ids_enforced(self):
        with pytest.raises(StructureError):
            Legend((LegendEntry(1, "a", (0, 0, 0), "mask"),))

    def test_distinct_colors_enforced(self):
        with pytest.raises(StructureError):
            Legend(
                (
                    LegendEntry(0, "a", (1, 2, 3), "mask"),
                    LegendEntry(1, "b", (1, 2, 3), "mask"),
                )
            )

    def test_environment_legend_has_mask(self):
        mid = ENVIRONMENT_LEGEND.mask_class_id()
        assert ENVIRONMENT_LEGEND.entries[mid].name == "Site"

    def test_park_legend_has_no_mask(self):
        with pytest.raises(StructureError):
            PARK_LEGEND.mask_class_id()


class TestEncode:
    def test_all_water_map(self):
        m = ClassMap(np.full((4, 4), PARK_LEGEND.class_id("Water")), PARK_LEGEND)
        img = encode_classmap(m)
        assert img.shape == (4, 4, 3)
        assert np.allclose(img, np.array([0, 255, 255]) / 255.0)

    def test_single_green_pixel(self):
        m = ClassMap(np.array([[PARK_LEGEND.class_id("Green land")]]), PARK_LEGEND)
        assert np.allclose(encode_classmap(m), np.array([[[0.0, 1.0, 0.0]]]))

    def test_unknown_id_named_in_error(self):
        m = ClassMap(np.zeros((2, 2), dtype=int), PARK_LEGEND)
        m.data[1, 0] = 99  # simulate corruption after construction
        with pytest.raises(StructureError, match=r"99.*row=1.*col=0"):
            encode_classmap(m)


class TestQuantize:
    def test_noisy_green_pixel(self):
        pixel = (0 / 255.0, 250 / 255.0, 5 / 255.0)
        img = np.array([[pixel]])
        cm = quantize_to_classes(img, PARK_LEGEND)
        assert cm.data[0, 0] == brute_force_nearest(pixel, PARK_LEGEND)
        assert cm.data[0, 0] == PARK_LEGEND.class_id("Green land")

    def test_exact_roads_color(self):
        img = np.array([[[241, 145, 73]]]) / 255.0
        cm = quantize_to_classes(img, PARK_LEGEND)
        assert cm.data[0, 0] == PARK_LEGEND.class_id("Roads")

    def test_tie_breaks_to_lower_id(self):
        legend = Legend(
            (
                LegendEntry(0, "lo", (0, 0, 0), "mask"),
                LegendEntry(1, "hi", (0, 0, 100), "mask"),
            )
        )
        img = np.array([[[0, 0, 50]]]) / 255.0  # equidistant
        assert quantize_to_classes(img, legend).data[0, 0] == 0

    @given(
        data=st.integers(0, len(PARK_LEGEND) - 1),
        noise=st.floats(0, 0.05),
    )
    @settings(max_examples=30, deadline=None)
    def test_matches_brute_force_oracle(self, data, noise):
        pixel = np.clip(PARK_LEGEND.colors()[data] / 255.0 + noise, 0, 1)
        cm = quantize_to_classes(np.array([[pixel]]), PARK_LEGEND)
        assert cm.data[0, 0] == brute_force_nearest(tuple(pixel), PARK_LEGEND)


class TestRoundTrip:
    @given(
        h=st.integers(1, 12),
        w=st.integers(1, 12),
        seed=st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=50, deadline=None)
    def test_encode_quantize_round_trip(self, h, w, seed):
        rng = np.random.default_rng(seed)
        m = ClassMap(rng.integers(0, len(PARK_LEGEND), size=(h, w)), PARK_LEGEND)
        assert quantize_to_classes(encode_classmap(m), PARK_LEGEND) == m

    def test_quantize_idempotent(self):
        rng = np.random.default_rng(7)
        img = rng.random((16, 16, 3))
        once = quantize_to_classes(img, PARK_LEGEND)
        twice = quantize_to_classes(encode_classmap(once), PARK_LEGEND)
        assert once == twice


class TestTile:
    def test_exact_division(self):
        img = np.zeros((1024, 1024, 3))
        tiles = tile(img, TileSpec(512, 512))
        assert len(tiles) == 4
        assert [origin for _, origin in tiles] == [(0, 0), (0, 512), (512, 0), (512, 512)]

    def test_edge_anchored_remainder(self):
        img = np.zeros((700, 700, 3))
        tiles = tile(img, TileSpec(512, 512))
        assert expected_offsets(700, 512, 512) == [0, 188]
        assert [origin for _, origin in tiles] == [(0, 0), (0, 188), (188, 0), (188, 188)]

    def test_identity_case(self):
        img = np.zeros((512, 512, 3))
        tiles = tile(img, TileSpec(512, 512))
        assert len(tiles) == 1 and tiles[0][1] == (0, 0)

    def test_too_small_image(self):
        with pytest.raises(StructureError):
            tile(np.zeros((100, 700, 3)), TileSpec(512, 512))

    def test_bad_stride(self):
        with pytest.raises(StructureError):
            TileSpec(512, 513)

    @given(
        h=st.integers(8, 40),
        w=st.integers(8, 40),
        t=st.integers(1, 8),
        s=st.integers(1, 8),
    )
    @settings(max_examples=60, deadline=None)
    def test_coverage_and_bounds(self, h, w, t, s):
        if s > t or t > min(h, w):
            return
        img = np.zeros((h, w, 3))
        tiles = tile(img, TileSpec(t, s))
        covered = np.zeros((h, w), dtype=bool)
        for patch, (r, c) in tiles:
            assert patch.shape == (t, t, 3)
            assert 0 <= r <= h - t and 0 <= c <= w - t
            covered[r : r + t, c : c + t] = True
        assert covered.all()
        # row-major enumeration and oracle-predicted origins
        rows = expected_offsets(h, t, s)
        cols = expected_offsets(w, t, s)
        assert [o for _, o in tiles] == [(r, c) for r in rows for c in cols]


class TestHistogram:
    def test_uniform_map(self):
        m = ClassMap(np.full((5, 5), 3), PARK_LEGEND)
        h = class_histogram(m)
        assert h[3] == 1.0 and h.sum() == pytest.approx(1.0, abs=1e-9)

    def test_direct_count(self):
        m = ClassMap(np.array([[0, 0], [1, 2]]), PARK_LEGEND)
        h = class_histogram(m)
        assert np.allclose(h[:3], [0.5, 0.25, 0.25])
        assert np.allclose(h[3:], 0)

    def test_round_trip_preserves_histogram(self):
        rng = np.random.default_rng(3)
        m = ClassMap(rng.integers(0, 7, size=(9, 9)), PARK_LEGEND)
        again = quantize_to_classes(encode_classmap(m), PARK_LEGEND)
        assert np.allclose(class_histogram(m), class_histogram(again))

    def test_zero_area_error(self):
        m = ClassMap(np.zeros((2, 2), dtype=int), PARK_LEGEND)
        m.data = np.zeros((0, 0), dtype=int)
        with pytest.raises(StructureError):
            class_histogram(m)


class TestPersistence:
    def test_raster_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        m = ClassMap(rng.integers(0, 7, size=(8, 8)), PARK_LEGEND)
        img = encode_classmap(m)
        p = tmp_path / "img.png"
        save_raster(p, img, meters_per_pixel=5.0)
        loaded, mpp = load_raster(p, with_metadata=True)
        assert mpp == 5.0
        assert quantize_to_classes(loaded, PARK_LEGEND) == m

    def test_classmap_indexed_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        m = ClassMap(rng.integers(0, 7, size=(10, 6)), ENVIRONMENT_LEGEND)
        p = tmp_path / "map.png"
        save_classmap(p, m)
        assert load_classmap(p, ENVIRONMENT_LEGEND) == m

    def test_classmap_palette_matches_legend(self, tmp_path):
        from PIL import Image

        m = ClassMap(np.arange(7).reshape(1, 7), PARK_LEGEND)
        p = tmp_path / "map.png"
        save_classmap(p, m)
        pal = np.array(Image.open(p).getpalette()).reshape(-1, 3)[:7]
        assert np.array_equal(pal, PARK_LEGEND.colors())

    def test_legend_text_round_trip(self, tmp_path):
        p = tmp_path / "legend.txt"
        save_legend(p, ENVIRONMENT_LEGEND)
        assert load_legend(p) == ENVIRONMENT_LEGEND

    def test_missing_files(self, tmp_path):
        with pytest.raises(DataError):
            load_raster(tmp_path / "nope.png")
        with pytest.raises(DataError):
            load_legend(tmp_path / "nope.txt")
