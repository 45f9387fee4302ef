import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_graph
from svgs_dsgat.dataio import ImageBuffer
from svgs_dsgat.graph import (
    FeatureGraph,
    RngStream,
    batch_graphs,
    from_edges,
    from_image_grid,
    grid_neighbors,
    mix64,
    sample_neighbors,
)


# -- rng -------------------------------------------------------------------


def test_splitmix_reference_values():
    # first outputs of SplitMix64 seeded with 0 (published reference sequence)
    r = RngStream(0)
    assert [r.next_u64() for _ in range(3)] == [
        0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F,
    ]


def test_rng_position_and_reproducibility():
    a, b = RngStream(42), RngStream(42)
    xs = [a.random() for _ in range(50)]
    assert xs == [b.random() for _ in range(50)]
    assert a.position == 50
    assert all(0.0 <= x < 1.0 for x in xs)


def test_substream_depends_on_seed_and_keys_only():
    a = RngStream(7)
    s1 = a.substream(1, 2).next_u64()
    a.next_u64()
    assert a.substream(1, 2).next_u64() == s1
    assert RngStream(7).substream(2, 1).next_u64() != s1


def test_randbelow_range_and_permutation():
    r = RngStream(3)
    assert all(0 <= r.randbelow(7) < 7 for _ in range(500))
    assert sorted(r.permutation(10)) == list(range(10))
    with pytest.raises(ValueError):
        r.randbelow(0)


def test_mix64_stays_in_64_bits():
    assert 0 <= mix64(2**70 + 5) < 2**64


# -- grid construction -----------------------------------------------------


def test_small_grayscale_grid():
    g = from_image_grid(ImageBuffer.from_array(np.zeros((8, 8))), 4)
    assert g.num_nodes == 4
    assert list(g.neighbors[0]) == [1, 2]
    g.validate()


def test_constant_image_features():
    g = from_image_grid(ImageBuffer.from_array(np.full((8, 12), 0.5)), 4)
    rows, cols = 2, 3
    for v in range(g.num_nodes):
        r, c = divmod(v, cols)
        np.testing.assert_allclose(g.features[v], [0.5, 0.0, r / (rows - 1), c / (cols - 1)])


def test_checkerboard_patch_means():
    block = np.kron(np.array([[0.0, 1.0], [1.0, 0.0]]), np.ones((2, 2)))
    g = from_image_grid(ImageBuffer.from_array(block), 2)
    np.testing.assert_array_equal(g.features[:, 0], [0.0, 1.0, 1.0, 0.0])
    np.testing.assert_array_equal(g.intensities, [0.0, 1.0, 1.0, 0.0])


def test_rgb_feature_layout():
    img = np.zeros((4, 4, 3))
    img[:, :, 1] = 1.0
    g = from_image_grid(ImageBuffer.from_array(img), 4)
    assert g.num_features == 8
    np.testing.assert_allclose(g.features[0], [0, 1, 0, 0, 0, 0, 0, 0])
    assert g.intensities[0] == pytest.approx(1 / 3)


def test_non_divisible_image_is_rejected():
    with pytest.raises(ValueError, match="divisible"):
        from_image_grid(ImageBuffer.from_array(np.zeros((9, 8))), 4)


def test_construction_is_deterministic():
    img = ImageBuffer.from_array(np.random.default_rng(0).uniform(size=(16, 16, 3)))
    a, b = from_image_grid(img, 4), from_image_grid(img, 4)
    np.testing.assert_array_equal(a.features, b.features)
    assert all(np.array_equal(x, y) for x, y in zip(a.neighbors, b.neighbors))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6))
def test_grid_graph_invariants(rows, cols):
    g = from_image_grid(ImageBuffer.from_array(np.zeros((rows * 2, cols * 2))), 2)
    g.validate()
    assert g.num_nodes == rows * cols
    dst, _ = g.edges
    # one edge per neighbor, plus a self edge for each isolated node
    assert len(dst) == int(g.degrees.sum()) + int((g.degrees == 0).sum())


def test_validate_catches_broken_graphs():
    feats = np.zeros((2, 1))
    with pytest.raises(ValueError, match="asymmetric"):
        FeatureGraph(feats, (np.array([1]), np.array([], dtype=np.intp)), np.zeros(2)).validate()
    with pytest.raises(ValueError, match="self-loop"):
        FeatureGraph(feats, (np.array([0]), np.array([], dtype=np.intp)), np.zeros(2)).validate()
    with pytest.raises(ValueError, match="labels"):
        FeatureGraph(feats, (np.array([1]), np.array([0])), np.zeros(2), labels=np.array([[0.5], [1.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32))
def test_random_edge_graphs_are_symmetric(seed):
    random_graph(np.random.default_rng(seed)).validate()


def test_stencils_on_ramp():
    rows, cols = 3, 4
    g = from_image_grid(ImageBuffer.from_array(np.zeros((rows, cols))), 1)
    ramp = np.tile(np.arange(cols, dtype=float), rows)
    gx, gy, lap = g.stencils
    grad_x = (gx @ ramp).reshape(rows, cols)
    np.testing.assert_allclose(grad_x[:, 1:-1], 1.0)
    np.testing.assert_allclose(grad_x[:, 0], 0.5)  # replicate padding
    np.testing.assert_allclose(gy @ ramp, 0.0)
    np.testing.assert_allclose((lap @ ramp).reshape(rows, cols)[:, 1:-1], 0.0)


def test_batch_is_a_disjoint_union():
    g1 = from_image_grid(ImageBuffer.from_array(np.zeros((4, 4))), 2, labels=np.zeros((4, 2)), image_id="a")
    g2 = from_image_grid(ImageBuffer.from_array(np.ones((4, 6))), 2, labels=np.ones((6, 2)), image_id="b")
    b = batch_graphs([g1, g2])
    b.validate()
    assert b.offsets == (0, 4, 10)
    assert b.image_ids == ("a", "b")
    assert list(b.segment_ids) == [0] * 4 + [1] * 6
    assert list(b.neighbors[4]) == [5, 7]
    assert b.stencils[2].shape == (10, 10)


# -- neighbor sampling -----------------------------------------------------


def _star(n_leaves):
    return from_edges(np.zeros((n_leaves + 1, 1)), [(0, i) for i in range(1, n_leaves + 1)])


def test_low_degree_returns_all_neighbors():
    g = from_edges(np.zeros((3, 1)), [(0, 1), (0, 2)])
    assert sample_neighbors(g, 0, 4, RngStream(0)) == [1, 2]


def test_high_degree_returns_distinct_members():
    g = _star(5)
    s = sample_neighbors(g, 0, 2, RngStream(1))
    assert len(s) == 2 and len(set(s)) == 2 and set(s) <= {1, 2, 3, 4, 5}


def test_isolated_node_repeats_itself():
    g = from_edges(np.zeros((2, 1)), [])
    assert sample_neighbors(g, 1, 3, RngStream(0)) == [1, 1, 1]


def test_sampling_errors():
    g = _star(2)
    with pytest.raises(IndexError):
        sample_neighbors(g, 9, 2, RngStream(0))
    with pytest.raises(ValueError):
        sample_neighbors(g, 0, 0, RngStream(0))


def test_sampling_is_reproducible():
    g = _star(8)
    assert sample_neighbors(g, 0, 3, RngStream(9)) == sample_neighbors(g, 0, 3, RngStream(9))


def test_sampling_frequencies_are_uniform():
    g = _star(5)
    rng = RngStream(2024)
    counts = np.zeros(6)
    draws = 10_000
    for _ in range(draws):
        for u in sample_neighbors(g, 0, 2, rng):
            counts[u] += 1
    p = 2 / 5
    sd = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts[1:] - draws * p) <= 3 * sd)


def test_grid_neighbors_matches_four_neighborhood():
    nb = grid_neighbors(2, 3)
    assert [list(x) for x in nb] == [[1, 3], [0, 2, 4], [1, 5], [0, 4], [1, 3, 5], [2, 4]]
