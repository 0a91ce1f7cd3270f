import numpy as np
from django.test import SimpleTestCase

from cast.cast_loss import mask_key
from cast.crop_sampler import SaliencyMask
from cast.encoder import denormalize_pixels, normalize_pixels
from cast.visualize import masked_key_pixels, overlay, sample_paths, to_bytes, upsample_cam


class OverlayTests(SimpleTestCase):
    def test_overlay_blends_half_and_half(self):
        image = np.zeros((3, 2, 2), dtype=np.float32)
        image[0] = 1.0
        heat = np.array([[0.0, 1.0], [0.5, 0.0]], dtype=np.float32)
        out = overlay(image, heat)
        self.assertEqual(out.dtype, np.uint8)
        self.assertEqual(out.shape, (2, 2, 3))
        # jet(0) is dark blue (0, 0, 0.5), jet(1) dark red (0.5, 0, 0)
        np.testing.assert_array_equal(out[0, 0], [128, 0, 64])
        np.testing.assert_array_equal(out[0, 1], [191, 0, 0])

    def test_to_bytes_clips(self):
        image = np.array([[[-1.0, 0.5]], [[1.0, 2.0]], [[0.0, 0.0]]], dtype=np.float32)
        np.testing.assert_array_equal(to_bytes(image), [[[0, 255, 0], [128, 255, 0]]])

    def test_upsampled_cam_is_normalized(self):
        heat = upsample_cam(np.array([[0.0, 2.0], [0.0, 0.0]]), 8)
        self.assertEqual(heat.shape, (8, 8))
        self.assertLessEqual(heat.max(), 1.0)
        self.assertGreater(heat.max(), 0.5)
        self.assertFalse(upsample_cam(np.zeros((2, 2)), 4).any())

    def test_sample_paths(self):
        names = [p.name for p in sample_paths('out', 3)]
        self.assertEqual(names, ['sample_0003_query.ppm', 'sample_0003_key.ppm', 'sample_0003_masked_key.ppm',
                                 'sample_0003_gradcam.ppm', 'sample_0003_saliency.pgm'])

    def test_masked_key_matches_the_key_encoder_input(self):
        rng = np.random.default_rng(0)
        image = rng.random((3, 6, 6)).astype(np.float32)
        bits = np.zeros((6, 6), dtype=np.uint8)
        bits[1:4, 2:5] = 1
        mask = SaliencyMask(bits)
        x_k = normalize_pixels(image)
        pixels = masked_key_pixels(x_k, mask)
        np.testing.assert_array_equal(pixels, denormalize_pixels(mask_key(x_k, mask)))
        np.testing.assert_allclose(pixels[:, bits == 1], image[:, bits == 1], atol=1e-6)
        np.testing.assert_array_equal(to_bytes(pixels)[bits == 0], 128)
