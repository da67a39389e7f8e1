"""World generation, scene rendering, and closed-form ground truth."""

import numpy as np
import pytest

from irrseg.compositing import build_stack
from irrseg.geodata import CLASS_CODES, VectorLayer, rasterize
from irrseg.synthgen import (
    SynthConfig,
    gen_scenes,
    gen_world,
    true_county_acres,
)


def bbox_of(feature):
    xs = [p[0] for p in feature.coordinates[0]]
    ys = [p[1] for p in feature.coordinates[0]]
    return min(xs), min(ys), max(xs), max(ys)


class TestGenWorld:
    def test_deterministic(self):
        cfg = SynthConfig(seed=4)
        l1, r1, c1 = gen_world(cfg)
        l2, r2, c2 = gen_world(cfg)
        assert [f.coordinates for f in l1.features] == [f.coordinates for f in l2.features]
        assert [f.coordinates for f in r1.features] == [f.coordinates for f in r2.features]
        assert [f.properties for f in c1.features] == [f.properties for f in c2.features]

    def test_zero_fields(self):
        cfg = SynthConfig(n_irrigated=0, n_unirrigated=0, n_uncultivated=0)
        labels, roads, counties = gen_world(cfg)
        assert not labels.features
        assert roads.features and counties.features

    def test_field_counts_and_classes(self):
        cfg = SynthConfig(seed=7)
        labels, _, _ = gen_world(cfg)
        by_class = {}
        for f in labels.features:
            by_class.setdefault(f.properties["class"], []).append(f)
        assert len(by_class["irrigated"]) == cfg.n_irrigated
        assert len(by_class["unirrigated"]) == cfg.n_unirrigated
        assert len(by_class["uncultivated"]) == cfg.n_uncultivated

    def test_fields_pairwise_disjoint(self):
        cfg = SynthConfig(seed=11)
        labels, _, _ = gen_world(cfg)
        boxes = [bbox_of(f) for f in labels.features]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                overlap = not (a[2] <= b[0] or a[0] >= b[2] or a[3] <= b[1] or a[1] >= b[3])
                assert not overlap, (i, j)

    def test_extent_too_small(self):
        cfg = SynthConfig(extent_px=24, n_irrigated=40)
        with pytest.raises(ValueError, match="too small"):
            gen_world(cfg)

    def test_roads_clear_of_fields(self):
        cfg = SynthConfig(seed=13)
        labels, roads, _ = gen_world(cfg)
        for road in roads.polylines():
            (x1, y1), (x2, y2) = road.coordinates
            vertical = x1 == x2
            for f in labels.features:
                bx0, by0, bx1, by1 = bbox_of(f)
                if vertical:
                    assert not (bx0 < x1 < bx1)
                else:
                    assert not (by0 < y1 < by1)


class TestGenScenes:
    def test_noiseless_matches_trajectories(self):
        cfg = SynthConfig(seed=3, cloud_fraction=0.0, scanline_fraction=0.0, noise_level=0.0,
                          extent_px=96, n_irrigated=2, n_unirrigated=2, n_uncultivated=2,
                          spectral_mix={"irrigated": 0, "unirrigated": 0, "uncultivated": 0})
        world = gen_world(cfg)
        scenes = gen_scenes(world, cfg, 2015)
        assert len(scenes) == cfg.n_dates
        mat = rasterize(world[0], cfg.grid()).data
        code_names = {v: k for k, v in CLASS_CODES.items()}
        for scene in scenes[:3]:
            window = (scene.date - scenes[0].date).days // 32
            assert scene.valid.all()
            for code, name in code_names.items():
                mask = mat == code
                if not mask.any():
                    continue
                for b in range(6):
                    expect = cfg.trajectories[name][window][b]
                    assert np.allclose(scene.bands[b][mask], expect, atol=1e-6)

    def test_scanline_fraction(self):
        cfg = SynthConfig(seed=5, cloud_fraction=0.0, scanline_fraction=0.2, extent_px=100,
                          n_irrigated=2, n_unirrigated=2, n_uncultivated=2)
        scenes = gen_scenes(gen_world(cfg), cfg, 2015)
        affected = [s for s in scenes if not s.valid.all()]
        assert affected
        for s in affected:
            frac = 1.0 - s.valid.mean()
            assert abs(frac - 0.2) < 0.02

    def test_clouds_stay_valid(self):
        cfg = SynthConfig(seed=9, cloud_fraction=0.3, scanline_fraction=0.0, noise_level=0.0,
                          extent_px=64, n_irrigated=2, n_unirrigated=2, n_uncultivated=2)
        scenes = gen_scenes(gen_world(cfg), cfg, 2015)
        for s in scenes:
            assert s.valid.all()
            # clouds visibly brighten the blue band somewhere
            assert (s.bands[0] > 0.5).mean() > 0.15

    def test_scenes_feed_compositing(self):
        cfg = SynthConfig(seed=15, extent_px=64, n_irrigated=2, n_unirrigated=2,
                          n_uncultivated=2)
        scenes = gen_scenes(gen_world(cfg), cfg, 2015)
        stack = build_stack(scenes, scenes[0].date)
        assert stack.data.shape == (36, 64, 64)
        assert (stack.counts > 0).all()  # every window saw at least one scene

    def test_deterministic(self):
        cfg = SynthConfig(seed=21, extent_px=64, n_irrigated=2, n_unirrigated=2,
                          n_uncultivated=2)
        w = gen_world(cfg)
        s1 = gen_scenes(w, cfg, 2015)
        s2 = gen_scenes(w, cfg, 2015)
        for a, b in zip(s1, s2):
            assert a.date == b.date
            assert np.array_equal(a.bands, b.bands)
            assert np.array_equal(a.valid, b.valid)


class TestStaleLabels:
    def test_stale_fields_render_irrigated_like(self):
        cfg = SynthConfig(seed=31, extent_px=128, n_irrigated=3, n_unirrigated=3,
                          n_uncultivated=3, n_stale_unirrigated=2,
                          cloud_fraction=0.0, scanline_fraction=0.0, noise_level=0.0)
        labels, _, _ = gen_world(cfg)
        stale = [f for f in labels.polygons() if f.properties.get("stale")]
        assert len(stale) == 2
        for f in stale:
            assert f.properties["class"] == "unirrigated"
            assert 0.7 <= f.properties["mix"] <= 0.85
        # spectra of a stale field sit closer to the irrigated trajectory
        scenes = gen_scenes((labels, None, None), cfg, 2015)
        grid = cfg.grid()
        mask = rasterize(VectorLayer(stale), grid).data > 0
        scene = scenes[6]  # mid-season, peak separation
        window = (scene.date - scenes[0].date).days // 32
        nir = scene.bands[3][mask].mean()
        irr_nir = cfg.trajectories["irrigated"][window][3]
        unirr_nir = cfg.trajectories["unirrigated"][window][3]
        assert abs(nir - irr_nir) < abs(nir - unirr_nir)

    def test_stale_disabled_by_default(self):
        cfg = SynthConfig(seed=31, extent_px=96, n_irrigated=2, n_unirrigated=2,
                          n_uncultivated=2)
        labels, _, _ = gen_world(cfg)
        assert not [f for f in labels.polygons() if f.properties.get("stale")]


class TestTrueAcres:
    def test_matches_rasterized_within_perimeter(self):
        cfg = SynthConfig(seed=17)
        labels, _, counties = gen_world(cfg)
        truth = true_county_acres(labels, counties)
        grid = cfg.grid()
        label_raster = rasterize(labels, grid)
        pixel_acres = grid.pixel_size ** 2 / 4046.8564224
        from irrseg.geodata import county_area
        rasterized = county_area(label_raster, counties)
        for county, acres in truth.items():
            # tolerance: one pixel band around each field's perimeter
            per_field = 4 * cfg.field_px_max * pixel_acres
            tol = max(per_field * cfg.n_irrigated, pixel_acres)
            assert abs(acres - rasterized[county]) <= tol, county

    def test_total_area_positive(self):
        cfg = SynthConfig(seed=19)
        labels, _, counties = gen_world(cfg)
        truth = true_county_acres(labels, counties)
        assert sum(truth.values()) > 0
        assert len(truth) == cfg.counties_per_side ** 2
