"""Tests for patch counting, convolutional embedding and positional tables."""

import numpy as np
import pytest

from fpvt import ConfigError, ConfigWarning, IpeConfig, ShapeError, Tensor, TokenSequence, add_positional, embed, patch_count
from fpvt.patch_embed import PatchEmbed, resample_table, valid_strides


class TestPatchCount:
    """Test the sliding-window patch count."""

    def test_patch_16_overlap_8(self):
        """112 x 112 with patch 16 and overlap 8 gives 13 x 13 windows."""
        assert patch_count(112, 112, 16, 8) == 169

    def test_patch_8_overlap_4(self):
        """112 x 112 with patch 8 and overlap 4 gives 27 x 27 windows."""
        assert patch_count(112, 112, 8, 4) == 729

    def test_zero_overlap_warns(self):
        """Zero overlap is legal but flagged."""
        with pytest.warns(ConfigWarning, match="non-overlapping"):
            assert patch_count(112, 112, 16, 0) == 36

    def test_non_divisible_lists_valid_strides(self):
        """A step that does not tile the image names the valid strides."""
        with pytest.raises(ConfigError, match=r"valid strides: \[1, 2, 4, 5\]"):
            patch_count(100, 100, 7, 4)

    def test_overlap_out_of_range(self):
        """Overlap must be below the patch size."""
        with pytest.raises(ConfigError, match="patch > overlap"):
            patch_count(112, 112, 8, 8)

    def test_valid_strides(self):
        """Valid strides divide both sides."""
        assert valid_strides(112, 112, 8) == [1, 2, 4, 7, 8]


class TestIpeConfig:
    """Test embedding geometry."""

    def test_overlapping_kernel(self):
        """Kernel is 2f+1 with padding f."""
        cfg = IpeConfig(stride=4, pad=3, out_channels=64)
        assert (cfg.kernel, cfg.padding, cfg.overlaps) == (7, 3, True)

    def test_non_overlapping_kernel(self):
        """Without overlap the kernel equals the stride."""
        cfg = IpeConfig(stride=4, pad=3, out_channels=64, overlap=False)
        assert (cfg.kernel, cfg.padding, cfg.overlaps) == (4, 0, False)

    def test_invalid_stride(self):
        """Stride must be positive."""
        with pytest.raises(ConfigError, match="stride"):
            IpeConfig(stride=0, pad=1, out_channels=8)

    def test_dict_round_trip(self):
        """to_dict and from_dict are inverse."""
        cfg = IpeConfig(stride=2, pad=1, out_channels=128)
        assert IpeConfig.from_dict(cfg.to_dict()) == cfg


class TestEmbed:
    """Test the convolutional tokenizer."""

    def test_first_stage_grid(self, rng, float64):
        """112 x 112 with f=3, s=4, p=64 gives a 28 x 28 grid of 64-wide tokens."""
        cfg = IpeConfig(stride=4, pad=3, out_channels=64)
        seq = embed(Tensor(rng.random((1, 3, 112, 112))), cfg, PatchEmbed(cfg, 3, rng))
        assert (seq.grid_h, seq.grid_w, seq.length, seq.channels) == (28, 28, 784, 64)

    def test_second_stage_grid(self, rng, float64):
        """28 x 28 with f=1, s=2, p=128 gives a 14 x 14 grid."""
        cfg = IpeConfig(stride=2, pad=1, out_channels=128)
        seq = embed(Tensor(rng.random((1, 64, 28, 28))), cfg, PatchEmbed(cfg, 64, rng))
        assert (seq.grid_h, seq.grid_w, seq.length) == (14, 14, 196)

    def test_identity_kernels(self, rng, float64):
        """1 x 1 identity kernels pass the pixels through to the norm."""
        cfg = IpeConfig(stride=1, pad=0, out_channels=3)
        weights = PatchEmbed(cfg, 3, rng)
        weights.weight.data[...] = np.eye(3).reshape(3, 3, 1, 1)
        image = Tensor(rng.random((2, 3, 4, 4)))
        seq = embed(image, cfg, weights)
        pixels = image.data.reshape(2, 3, 16).transpose(0, 2, 1)
        np.testing.assert_allclose(seq.tokens.data, weights.norm(Tensor(pixels)).data)

    def test_overlap_shares_pixels(self, rng, float64):
        """A pixel on a patch border reaches two tokens with overlap and one without."""
        image = rng.random((1, 1, 8, 8))
        changed = image.copy()
        changed[0, 0, 0, 3] += 1.0

        def touched(overlap):
            cfg = IpeConfig(stride=4, pad=3, out_channels=4, overlap=overlap)
            weights = PatchEmbed(cfg, 1, np.random.default_rng(0))
            before = embed(Tensor(image), cfg, weights).tokens.data
            after = embed(Tensor(changed), cfg, weights).tokens.data
            return int(np.any(np.abs(before - after) > 1e-9, axis=2).sum())

        assert touched(True) == 2
        assert touched(False) == 1

    def test_stride_must_divide(self, rng, float64):
        """Strict mode rejects a side the stride does not divide."""
        cfg = IpeConfig(stride=4, pad=3, out_channels=8)
        with pytest.raises(ShapeError, match="does not divide"):
            embed(Tensor(rng.random((1, 3, 30, 30))), cfg, PatchEmbed(cfg, 3, rng))

    def test_ceil_mode(self, rng, float64):
        """Ceil mode turns a 7 x 7 map into a 4 x 4 grid."""
        cfg = IpeConfig(stride=2, pad=1, out_channels=8)
        seq = embed(Tensor(rng.random((1, 4, 7, 7))), cfg, PatchEmbed(cfg, 4, rng), ceil_mode=True)
        assert (seq.grid_h, seq.grid_w) == (4, 4)

    def test_channel_mismatch(self, rng, float64):
        """Input channels must match the kernels."""
        cfg = IpeConfig(stride=2, pad=1, out_channels=8)
        with pytest.raises(ShapeError, match="input channels"):
            embed(Tensor(rng.random((1, 2, 8, 8))), cfg, PatchEmbed(cfg, 3, rng))


class TestTokenSequence:
    """Test token grids."""

    def test_map_round_trip(self, rng):
        """Tokens survive a trip through the spatial layout."""
        seq = TokenSequence(Tensor(rng.random((2, 6, 5))), 2, 3)
        back = TokenSequence.from_map(seq.to_map())
        np.testing.assert_array_equal(back.tokens.data, seq.tokens.data)
        assert (back.grid_h, back.grid_w) == (2, 3)

    def test_grid_must_match_length(self, rng):
        """The grid has to account for every token."""
        with pytest.raises(ShapeError, match="do not fill"):
            TokenSequence(Tensor(rng.random((1, 7, 4))), 2, 3)


class TestAddPositional:
    """Test positional tables."""

    def test_zero_table(self, rng, float64):
        """A zero table leaves the sequence unchanged."""
        seq = TokenSequence(Tensor(rng.random((2, 9, 4))), 3, 3)
        out = add_positional(seq, Tensor(np.zeros((9, 4))))
        np.testing.assert_array_equal(out.tokens.data, seq.tokens.data)

    def test_matching_length(self, rng, float64):
        """An equal-length table is added elementwise."""
        seq = TokenSequence(Tensor(rng.random((2, 9, 4))), 3, 3)
        table = rng.random((9, 4))
        out = add_positional(seq, Tensor(table))
        np.testing.assert_allclose(out.tokens.data, seq.tokens.data + table[None])

    def test_resampled_corners(self, rng, float64):
        """Resampling keeps the corner entries of the table."""
        table = rng.random((4, 3))
        resampled = resample_table(Tensor(table), 3, 3).data.reshape(3, 3, 3)
        grid = table.reshape(2, 2, 3)
        np.testing.assert_allclose(resampled[0, 0], grid[0, 0])
        np.testing.assert_allclose(resampled[2, 2], grid[1, 1])
        np.testing.assert_allclose(resampled[1, 1], grid.mean(axis=(0, 1)))

    def test_non_square_grid_same_count(self, float64):
        """A 6x6 table on a 4x9 grid is resampled even though both hold 36 tokens."""
        rows = np.repeat(np.arange(6.0), 6)
        table = np.stack([rows, rows], axis=1)
        seq = TokenSequence(Tensor(np.zeros((1, 36, 2))), 4, 9)
        out = add_positional(seq, Tensor(table)).tokens.data.reshape(4, 9, 2)
        expected = np.arange(4)[:, None] * 5.0 / 3.0
        np.testing.assert_allclose(out[..., 0], np.broadcast_to(expected, (4, 9)), atol=1e-12)

    def test_channel_mismatch(self, rng, float64):
        """Table and tokens must share their width."""
        seq = TokenSequence(Tensor(rng.random((1, 4, 4))), 2, 2)
        with pytest.raises(ShapeError, match="channels"):
            add_positional(seq, Tensor(np.zeros((4, 5))))
