import numpy as np
import pytest

from sami.autodiff import Tensor, precision
from sami.errors import ConfigError, ContractError
from sami.vit import (
    PRESETS,
    ViTConfig,
    ViTEncoder,
    encoder_param_count,
    extract_patches,
    grid_positions,
    preset,
    unpatchify,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.mark.parametrize("size,patch,n", [(32, 8, 16), (64, 8, 64)])
def test_token_count(rng, size, patch, n):
    cfg = ViTConfig(image_size=size, patch_size=patch, embed_dim=16, depth=1)
    enc = ViTEncoder(cfg, rng)
    tb = enc.patchify(rng.random((size, size, 3)))
    assert tb.tokens.shape == (1, n, 16)
    assert tb.positions.tolist() == [list(range(n))]


def test_indivisible_size_is_config_error():
    with pytest.raises(ConfigError):
        ViTConfig(image_size=30, patch_size=8)


def test_heads_must_divide_dim():
    with pytest.raises(ConfigError):
        ViTConfig(embed_dim=48, num_heads=5)


def test_zero_image_gives_positional_embedding(rng):
    cfg = ViTConfig(image_size=32, patch_size=8, embed_dim=16, depth=1)
    enc = ViTEncoder(cfg, rng)
    tb = enc.patchify(np.zeros((32, 32, 3)))
    np.testing.assert_allclose(tb.tokens.data[0], grid_positions(4, 16).astype(np.float32))


def test_patch_order_is_row_major():
    img = np.arange(16 * 16 * 1, dtype=float).reshape(1, 16, 16, 1)
    patches = extract_patches(img, 8)
    assert patches[0, 1, 0] == img[0, 0, 8, 0]
    assert patches[0, 2, 0] == img[0, 8, 0, 0]
    np.testing.assert_array_equal(unpatchify(patches, 8, 1), img)


def test_wrong_image_size_rejected(rng):
    enc = ViTEncoder(ViTConfig(image_size=32, patch_size=8, embed_dim=16, depth=1), rng)
    with pytest.raises(ConfigError):
        enc.patchify(np.zeros((64, 64, 3)))


def test_depth_zero_is_final_norm_of_tokens(rng):
    cfg = ViTConfig(image_size=32, patch_size=8, embed_dim=16, depth=0)
    enc = ViTEncoder(cfg, rng)
    tb = enc.patchify(rng.random((2, 32, 32, 3)))
    out = enc.encode(tb)
    np.testing.assert_allclose(out.data, enc.norm(tb.tokens).data)


def test_encode_shape_contract(rng):
    enc = ViTEncoder(ViTConfig(image_size=32, patch_size=8, embed_dim=16, depth=2), rng)
    tb = enc.patchify(rng.random((3, 32, 32, 3)))
    sub = tb.subset(np.array([[0, 5, 7]] * 3))
    assert enc.encode(sub).shape == (3, 3, 16)


def test_encode_empty_subset_is_contract_error(rng):
    enc = ViTEncoder(ViTConfig(image_size=32, patch_size=8, embed_dim=16, depth=1), rng)
    tb = enc.patchify(rng.random((1, 32, 32, 3)))
    with pytest.raises(ContractError):
        enc.encode(tb.subset(np.zeros((1, 0), dtype=int)))


def test_permutation_equivariance(rng):
    with precision(np.float64):
        enc = ViTEncoder(ViTConfig(image_size=32, patch_size=8, embed_dim=16, depth=2), rng)
        tb = enc.patchify(rng.random((1, 32, 32, 3)))
    keep = np.array([[1, 4, 9, 12, 15]])
    perm = np.array([3, 0, 4, 2, 1])
    a = enc.encode(tb.subset(keep)).data[0]
    b = enc.encode(tb.subset(keep[:, perm])).data[0]
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_param_count_matches_closed_form(rng, name):
    cfg = preset(name)
    assert ViTEncoder(cfg, rng).num_parameters() == encoder_param_count(cfg)


def test_preset_lookup():
    assert preset("S-Tiny").embed_dim == 48
    with pytest.raises(ConfigError):
        preset("vit-h")


def test_forward_is_finite_for_bounded_inputs(rng):
    enc = ViTEncoder(preset("s-tiny"), rng)
    out = enc(rng.uniform(-10, 10, (2, 64, 64, 3)))
    assert np.all(np.isfinite(out.data))
