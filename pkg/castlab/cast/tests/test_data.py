import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from PIL import Image

from cast.data import (INDEX_FILE, NUM_FG_CLASSES, SceneSpec, ScenePool, ShapePlacement, Variant, biased_bg_class,
                       compose_variant, fg_class_parts, gen_dataset, gen_scene, load_scene, read_dataset, read_index,
                       sample_scene_spec, shape_membership, tile_background, write_dataset)
from cast.exceptions import DatasetError, PoolCoverageError, SceneFormatError


class GeneratorTests(SimpleTestCase):
    def test_deterministic_per_seed_and_index(self):
        a = gen_dataset(5, seed=1, canvas_size=32)
        b = gen_dataset(4, seed=1, canvas_size=32)
        c = gen_dataset(4, seed=2, canvas_size=32)
        for i in range(4):
            np.testing.assert_array_equal(a[i].image, b[i].image)
            self.assertEqual(a[i].mask, b[i].mask)
        self.assertFalse(all(np.array_equal(a[i].image, c[i].image) for i in range(4)))
        self.assertEqual(a[3].name, 'scene_000003')

    def test_full_bias_ties_background_to_foreground(self):
        for scene in gen_dataset(30, seed=0, canvas_size=32, bias=1.0):
            self.assertEqual(scene.bg_class, biased_bg_class(scene.fg_class))

    def test_masks_are_exact(self):
        for scene in gen_dataset(10, seed=3, canvas_size=32):
            self.assertGreater(scene.mask.area, 0)
            _, color = fg_class_parts(scene.fg_class)
            inside = scene.image[:, scene.mask.bits == 1]
            np.testing.assert_allclose(inside, np.round(np.array(color) * 255)[:, None] / 255, atol=1e-6)

    def test_class_balance_over_many_seeds(self):
        n = 10000
        counts = np.bincount([sample_scene_spec(np.random.default_rng([seed, 0]), 32).fg_class for seed in range(n)],
                             minlength=NUM_FG_CLASSES)
        p = 1.0 / NUM_FG_CLASSES
        sigma = np.sqrt(n * p * (1 - p))
        self.assertTrue(np.all(np.abs(counts - n * p) <= 3 * sigma), counts)

    def test_single_object_area_matches_the_analytic_count(self):
        def row_count(half_width):
            # half-integer offsets with |dx| <= half_width
            return 2 * int(np.floor(half_width + 0.5)) if half_width >= 0.5 else 0

        for size in (2, 3, 5, 7):
            offsets = np.arange(-size, size) + 0.5
            expected = {
                'square': (2 * size) ** 2,
                'circle': sum(row_count(np.sqrt(size * size - dy * dy)) for dy in offsets),
                'triangle': sum(row_count((dy + size) / 2.0) for dy in offsets),
            }
            for fg_class in range(0, NUM_FG_CLASSES, NUM_FG_CLASSES // 3):
                shape, _ = fg_class_parts(fg_class)
                with self.subTest(shape=shape, size=size):
                    scene = gen_scene(SceneSpec(32, fg_class, 0, (ShapePlacement(16, 16, size),), seed=1))
                    self.assertEqual(scene.mask.area, expected[shape])

    def test_masks_match_recomputed_membership(self):
        for i, scene in enumerate(gen_dataset(200, seed=7, canvas_size=32, bias=0.5)):
            spec = sample_scene_spec(np.random.default_rng([7, i]), 32, 0.5)
            shape, _ = fg_class_parts(spec.fg_class)
            union = np.zeros((32, 32), dtype=bool)
            for placement in spec.objects:
                union |= shape_membership(shape, placement, 32, 32)
            np.testing.assert_array_equal(scene.mask.bits, union.astype(np.uint8))

    def test_shape_membership_uses_pixel_centers(self):
        square = shape_membership('square', ShapePlacement(cx=8, cy=8, size=2), 16, 16)
        self.assertEqual(int(square.sum()), 16)
        self.assertTrue(square[6:10, 6:10].all())
        circle = shape_membership('circle', ShapePlacement(cx=8, cy=8, size=1), 16, 16)
        self.assertEqual(int(circle.sum()), 4)
        triangle = shape_membership('triangle', ShapePlacement(cx=8, cy=8, size=4), 16, 16)
        rows = triangle.sum(axis=1)
        self.assertTrue(np.all(np.diff(rows[4:12]) >= 0))

    def test_spec_validation(self):
        with self.assertRaises(ValueError):
            SceneSpec(16, 0, 0, (), seed=0)
        with self.assertRaises(ValueError):
            SceneSpec(16, NUM_FG_CLASSES, 0, (ShapePlacement(8, 8, 2),), seed=0)

    def test_empty_dataset(self):
        self.assertEqual(gen_dataset(0, seed=0), [])


class DatasetFileTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        scenes = gen_dataset(3, seed=4, canvas_size=32)
        write_dataset(self.dir, scenes)
        self.assertEqual(read_index(self.dir), [(s.name, s.fg_class, s.bg_class) for s in scenes])
        loaded = read_dataset(self.dir)
        for original, copy in zip(scenes, loaded):
            np.testing.assert_array_equal(original.pixels, copy.pixels)
            self.assertEqual(original.mask, copy.mask)
            self.assertEqual((original.fg_class, original.bg_class), (copy.fg_class, copy.bg_class))
        self.assertEqual(len(read_dataset(self.dir, limit=2)), 2)

    def test_files_are_binary_pnm(self):
        write_dataset(self.dir, gen_dataset(1, seed=0, canvas_size=16))
        self.assertEqual((self.dir / 'scene_000000.ppm').read_bytes()[:2], b'P6')
        self.assertEqual((self.dir / 'scene_000000.pgm').read_bytes()[:2], b'P5')

    def test_non_binary_mask(self):
        write_dataset(self.dir, gen_dataset(1, seed=0, canvas_size=16))
        Image.fromarray(np.full((16, 16), 128, dtype=np.uint8)).save(self.dir / 'scene_000000.pgm')
        with self.assertRaises(SceneFormatError):
            load_scene(self.dir, 'scene_000000')

    def test_size_mismatch(self):
        write_dataset(self.dir, gen_dataset(1, seed=0, canvas_size=16))
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(self.dir / 'scene_000000.pgm')
        with self.assertRaises(SceneFormatError):
            load_scene(self.dir, 'scene_000000')

    def test_malformed_header(self):
        write_dataset(self.dir, gen_dataset(1, seed=0, canvas_size=16))
        (self.dir / 'scene_000000.ppm').write_bytes(b'P6\nnot a header\n')
        with self.assertRaises(SceneFormatError):
            load_scene(self.dir, 'scene_000000')

    def test_bad_index(self):
        (self.dir / INDEX_FILE).write_text('scene_000000 1\n')
        with self.assertRaises(SceneFormatError):
            read_index(self.dir)
        (self.dir / INDEX_FILE).unlink()
        with self.assertRaises(DatasetError):
            read_dataset(self.dir)


class VariantTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.scenes = gen_dataset(60, seed=5, canvas_size=32)
        cls.pool = ScenePool(cls.scenes)
        cls.scene = cls.scenes[0]
        cls.fg = cls.scene.mask.bits.astype(bool)

    def compose(self, variant):
        return compose_variant(self.scene, self.pool, variant, np.random.default_rng(0))

    def test_original_and_only_fg(self):
        np.testing.assert_array_equal(self.compose(Variant.ORIGINAL).image, self.scene.image)
        only_fg = self.compose(Variant.ONLY_FG).image
        self.assertTrue(np.all(only_fg[:, ~self.fg] == 0))
        np.testing.assert_array_equal(only_fg[:, self.fg], self.scene.image[:, self.fg])

    def test_no_fg_and_only_bg(self):
        no_fg = self.compose(Variant.NO_FG).image
        self.assertTrue(np.all(no_fg[:, self.fg] == 0))
        np.testing.assert_array_equal(no_fg[:, ~self.fg], self.scene.image[:, ~self.fg])
        top, left, h, w = self.scene.mask.bounding_box()
        black = self.compose(Variant.ONLY_BG_B).image
        box = np.zeros(self.fg.shape, dtype=bool)
        box[top:top + h, left:left + w] = True
        self.assertTrue(np.all(black[:, box] == 0))
        np.testing.assert_array_equal(black[:, ~box], self.scene.image[:, ~box])
        tiled = self.compose(Variant.ONLY_BG_T).image
        np.testing.assert_array_equal(tiled[:, ~box], self.scene.image[:, ~box])
        self.assertFalse(np.array_equal(tiled[:, self.fg], self.scene.image[:, self.fg]))
        self.assertTrue(np.all(tiled >= 0))

    def test_mixed_variants_keep_the_foreground(self):
        for variant in (Variant.MIXED_SAME, Variant.MIXED_RAND, Variant.MIXED_NEXT):
            with self.subTest(variant=variant.value):
                mixed = self.compose(variant)
                np.testing.assert_array_equal(mixed.image[:, self.fg], self.scene.image[:, self.fg])
                self.assertEqual(mixed.fg_class, self.scene.fg_class)

    def test_mixed_next_takes_the_next_class_background(self):
        mixed = self.compose(Variant.MIXED_NEXT)
        donors = self.pool.require((self.scene.fg_class + 1) % NUM_FG_CLASSES)
        self.assertIn(mixed.bg_class, {d.bg_class for d in donors})

    def test_pool_coverage(self):
        pool = ScenePool(self.scenes[:1])
        with self.assertRaises(PoolCoverageError):
            pool.require((self.scenes[0].fg_class + 1) % NUM_FG_CLASSES)
        with self.assertRaises(PoolCoverageError):
            ScenePool([])

    def test_tiling_fills_the_region_from_outside(self):
        image = np.zeros((1, 8, 8), dtype=np.float32)
        image[:, :, 4:] = 1.0
        region = np.zeros((8, 8), dtype=bool)
        region[2:4, 0:2] = True
        out = tile_background(image, region)
        self.assertTrue(np.all(out[:, 2:4, 0:2] == 0.0))
        image[:, 2:4, 0:2] = 0.5
        out = tile_background(image, region)
        self.assertTrue(np.all(np.isin(out[:, region], (0.0, 1.0))))

    def test_scene_rendering_is_reproducible_from_the_spec(self):
        spec = SceneSpec(32, 4, 7, (ShapePlacement(10, 12, 4),), seed=99)
        np.testing.assert_array_equal(gen_scene(spec).image, gen_scene(spec).image)
