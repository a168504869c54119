import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from rtpt.augment import AugmentConfig, augment_views, identity_config, sample_seed
from rtpt.errors import ConfigurationError, InputError


@pytest.fixture(scope="module")
def image(small_dataset):
    return small_dataset.samples[3][1]


def test_zero_views_is_original_only(image):
    vb = augment_views(image, AugmentConfig(n_views=0), seed=1)
    assert len(vb) == 1 and torch.equal(vb.views[0], image)


def test_same_seed_same_views(image):
    a = augment_views(image, AugmentConfig(n_views=8), seed=5)
    b = augment_views(image, AugmentConfig(n_views=8), seed=5)
    assert torch.equal(a.views, b.views)


def test_63_views_in_range(image):
    vb = augment_views(image, AugmentConfig(), seed=0)
    assert vb.views.shape == (64, *image.shape)
    assert float(vb.views.min()) >= 0.0 and float(vb.views.max()) <= 1.0
    assert torch.equal(vb.views[0], image)


def test_input_is_not_mutated(image):
    before = image.clone()
    augment_views(image, AugmentConfig(n_views=4), seed=2)
    assert torch.equal(image, before)


def test_distinct_seeds_differ(image):
    cfg = AugmentConfig(n_views=2)
    differing = sum(
        not torch.equal(augment_views(image, cfg, 2 * s).views, augment_views(image, cfg, 2 * s + 1).views)
        for s in range(100)
    )
    assert differing == 100


def test_errors(image):
    with pytest.raises(ConfigurationError):
        augment_views(image, AugmentConfig(n_views=-1))
    with pytest.raises(ConfigurationError):
        augment_views(image, AugmentConfig(n_views=2, operations=("teleport",)))
    with pytest.raises(InputError):
        augment_views(image * 2, AugmentConfig(n_views=2))


def test_identity_config_copies(image):
    vb = augment_views(image, identity_config(5), seed=9)
    assert all(torch.equal(v, image) for v in vb.views)


def test_sample_seed_is_xor_of_index():
    assert sample_seed(0, 17) == 17
    assert sample_seed(5, 3) == 5 ^ 3
    assert sample_seed(1, "a/b.png") == sample_seed(1, "a/b.png")


@given(st.integers(0, 2**31), st.integers(0, 6))
def test_views_always_in_unit_range(seed, n):
    g = torch.Generator().manual_seed(seed % 1000)
    img = torch.rand(3, 16, 16, generator=g, dtype=torch.float64)
    vb = augment_views(img, AugmentConfig(n_views=n), seed=seed)
    assert vb.views.shape[0] == n + 1
    assert float(vb.views.min()) >= 0 and float(vb.views.max()) <= 1
    assert torch.equal(vb.views[0], img)
