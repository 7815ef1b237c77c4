import numpy as np
import pytest
from scipy.ndimage import label as nd_label
from skimage.color import rgb2lab

from salrefine.slic import SlicSegmenter, SuperpixelLabeling, adjacency_pairs, slic_segment, superpixel_features


def assert_valid_partition(labeling):
    labels = labeling.labels
    sizes = np.bincount(labels.ravel(), minlength=labeling.count)
    assert sizes.shape[0] == labeling.count and np.all(sizes > 0)
    four = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    for k in range(labeling.count):
        _, n = nd_label(labels == k, structure=four)
        assert n == 1, f"superpixel {k} has {n} pieces"


def test_constant_image_grid():
    lab = slic_segment(np.full((16, 16, 3), 0.4), target_count=4)
    assert lab.count == 4
    np.testing.assert_array_equal(lab.sizes(), [64] * 4)
    expected = np.zeros((16, 16), int)
    expected[:8, 8:] = 1
    expected[8:, :8] = 2
    expected[8:, 8:] = 3
    np.testing.assert_array_equal(lab.labels, expected)


def test_two_tone_split():
    image = np.zeros((16, 16, 3))
    image[:, :8] = [0, 0, 1]
    image[:, 8:] = [1, 0, 0]
    lab = slic_segment(image, target_count=2)
    assert lab.count == 2
    assert len(set(lab.labels[:, :8].ravel())) == 1
    assert len(set(lab.labels[:, 8:].ravel())) == 1
    assert lab.labels[0, 0] != lab.labels[0, 15]


def test_one_superpixel_per_pixel_target(rng):
    image = rng.random((6, 7, 3))
    lab = slic_segment(image, target_count=42)
    assert 1 <= lab.count <= 42
    assert_valid_partition(lab)


def test_target_count_validation():
    with pytest.raises(ValueError):
        slic_segment(np.zeros((3, 3, 3)), target_count=10)
    with pytest.raises(ValueError):
        slic_segment(np.zeros((3, 3, 3)), target_count=0)


@pytest.mark.parametrize("seed", range(5))
def test_random_images_partition(seed):
    image = np.random.default_rng(seed).random((40, 48, 3))
    a = slic_segment(image, target_count=60)
    b = slic_segment(image, target_count=60)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert_valid_partition(a)


def test_features_white_and_black():
    lab = SuperpixelLabeling(np.zeros((4, 6), int), 1)
    f = superpixel_features(np.ones((4, 6, 3)), lab).features[0]
    np.testing.assert_allclose(f[:3], [1.0, 0.0, 0.0], atol=1e-3)
    np.testing.assert_allclose(f[3:], [2.5 / 6, 1.5 / 4])
    f = superpixel_features(np.zeros((4, 6, 3)), lab).features[0]
    np.testing.assert_allclose(f[:3], 0.0, atol=1e-12)


def test_feature_centroids_of_halves():
    labels = np.zeros((8, 16), int)
    labels[:, 8:] = 1
    f = superpixel_features(np.full((8, 16, 3), 0.5), SuperpixelLabeling(labels, 2)).features
    np.testing.assert_allclose(f[:, 3], [0.25, 0.75], atol=0.5 / 16)
    assert np.all((f[:, 3:] >= 0) & (f[:, 3:] <= 1))


def test_features_weighted_mean_is_global_mean(rng):
    image = rng.random((20, 24, 3))
    lab = slic_segment(image, target_count=30)
    feats = superpixel_features(image, lab)
    weighted = (feats.features[:, :3] * feats.sizes[:, None]).sum(axis=0) / feats.sizes.sum()
    global_mean = (rgb2lab(image) / [100, 128, 128]).reshape(-1, 3).mean(axis=0)
    np.testing.assert_allclose(weighted, global_mean, atol=1e-9)


def test_features_reject_label_gaps():
    labels = np.zeros((2, 2), int)
    labels[1, 1] = 2
    with pytest.raises(ValueError):
        superpixel_features(np.zeros((2, 2, 3)), SuperpixelLabeling(labels, 3))


def test_adjacency_examples():
    grid = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    assert adjacency_pairs(SuperpixelLabeling(grid, 4)) == {(0, 1), (0, 2), (1, 3), (2, 3)}
    assert adjacency_pairs(SuperpixelLabeling(np.zeros((3, 3), int), 1)) == set()
    split = np.zeros((3, 4), int)
    split[:, 2:] = 1
    assert adjacency_pairs(SuperpixelLabeling(split, 2)) == {(0, 1)}


def test_adjacency_symmetric_irreflexive(rng):
    lab = slic_segment(rng.random((30, 30, 3)), target_count=20)
    pairs = adjacency_pairs(lab)
    assert all(i < j for i, j in pairs)
    # brute force over 4-neighbours
    brute = set()
    L = lab.labels
    for y in range(L.shape[0]):
        for x in range(L.shape[1]):
            for dy, dx in ((0, 1), (1, 0)):
                if y + dy < L.shape[0] and x + dx < L.shape[1] and L[y, x] != L[y + dy, x + dx]:
                    brute.add(tuple(sorted((int(L[y, x]), int(L[y + dy, x + dx])))))
    assert pairs == brute


def test_segmenter_transformer(rng):
    out = SlicSegmenter(n_segments=10).fit_transform([rng.random((16, 16, 3))])
    assert isinstance(out[0], SuperpixelLabeling)
