import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperdit import PatchGrid, patchify, unpatchify


def test_grid_counts():
    grid = PatchGrid.for_image(256, 256, 16)
    assert (grid.rows, grid.cols, grid.num_patches) == (16, 16, 256)
    assert PatchGrid.for_image(32, 32, 8).num_patches == 16
    assert PatchGrid.for_image(32, 64, 8).num_patches == 32


def test_single_pixel_identity():
    image = torch.tensor([[[2.5]]])
    seq = patchify(image, 1)
    assert seq.tokens.shape == (1, 1)
    assert seq.tokens[0, 0] == 2.5
    assert torch.equal(unpatchify(seq), image)


def test_whole_image_single_token():
    image = torch.arange(2 * 4 * 4, dtype=torch.float32).reshape(2, 4, 4)
    seq = patchify(image, 4)
    assert seq.tokens.shape == (1, 2 * 16)
    # channel-major within the token
    assert torch.equal(seq.tokens[0, :16], image[0].flatten())
    assert torch.equal(unpatchify(seq), image)


def test_raster_order_brute_force():
    # encode (i, j) into the image so token order is directly observable
    patch = 8
    rows, cols = 4, 4
    image = torch.zeros(1, rows * patch, cols * patch)
    for i in range(rows):
        for j in range(cols):
            image[0, i * patch : (i + 1) * patch, j * patch : (j + 1) * patch] = i * cols + j
    seq = patchify(image, patch)
    expected = torch.arange(rows * cols, dtype=torch.float32)
    assert torch.equal(seq.tokens[:, 0], expected)
    positions = seq.positions
    assert torch.equal(positions[:, 0], torch.arange(rows).repeat_interleave(cols))
    assert torch.equal(positions[:, 1], torch.arange(cols).repeat(rows))


def test_round_trip_exact_both_scales():
    rng = torch.Generator().manual_seed(0)
    image = torch.randn(3, 16, 16, generator=rng)
    for patch in (1, 2, 4, 8, 16):
        assert torch.equal(unpatchify(patchify(image, patch)), image)


def test_round_trip_batched_and_rectangular():
    rng = torch.Generator().manual_seed(1)
    image = torch.randn(5, 3, 8, 24, generator=rng)
    seq = patchify(image, 4)
    assert seq.tokens.shape == (5, 2 * 6, 48)
    assert torch.equal(unpatchify(seq), image)


def test_patch_permutation_is_local():
    rng = torch.Generator().manual_seed(2)
    image = torch.randn(3, 16, 16, generator=rng)
    altered = image.clone()
    altered[:, 4:8, 8:12] += 1.0  # patch (1, 2) at p = 4
    a = patchify(image, 4).tokens
    b = patchify(altered, 4).tokens
    changed = (a != b).any(dim=-1)
    target = 1 * 4 + 2
    assert changed[target]
    assert changed.sum() == 1


def test_divisibility_errors():
    image = torch.zeros(3, 30, 32)
    with pytest.raises(ValueError, match="does not divide"):
        patchify(image, 8)
    with pytest.raises(ValueError, match="positive"):
        patchify(torch.zeros(3, 8, 8), 0)


def test_unpatchify_count_mismatch():
    grid = PatchGrid.for_image(16, 16, 4)
    with pytest.raises(ValueError, match="token count"):
        unpatchify(torch.zeros(10, 48), grid)
    with pytest.raises(ValueError, match="multiple of patch area"):
        unpatchify(torch.zeros(16, 47), grid)


def test_embed_and_project_hooks():
    image = torch.ones(3, 8, 8)
    double = lambda t: t * 2
    halve = lambda t: t / 2
    seq = patchify(image, 4, embed=double)
    assert torch.equal(seq.tokens, torch.full((4, 48), 2.0))
    assert torch.equal(unpatchify(seq, project=halve), image)


@settings(max_examples=50, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    patch=st.sampled_from([1, 2, 3, 4]),
    channels=st.integers(1, 3),
    seed=st.integers(0, 2**16),
)
def test_round_trip_property(rows, cols, patch, channels, seed):
    rng = torch.Generator().manual_seed(seed)
    image = torch.randn(channels, rows * patch, cols * patch, generator=rng)
    seq = patchify(image, patch)
    assert seq.tokens.shape == (rows * cols, channels * patch * patch)
    assert torch.equal(unpatchify(seq), image)
