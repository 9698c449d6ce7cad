import itertools
import math

import numpy as np
import pytest

from datasetkit import SynthConfig, read_manifest, read_mask, synth_generate, synth_sample
from segmenter import (
    FlowNetwork, SeedSet, SegmenterParams, build_graph, max_flow, mask_iou, nlink_capacity,
    sample_center_seeds, segment, segment_manifest, segment_with_seeds,
)


def brute_force_min_cut(net: FlowNetwork) -> int:
    inner = [v for v in range(net.n) if v not in (net.source, net.sink)]
    best = None
    for bits in itertools.product((False, True), repeat=len(inner)):
        side = {net.source} | {v for v, keep in zip(inner, bits) if keep}
        capacity = net.cut_capacity(side)
        best = capacity if best is None else min(best, capacity)
    return best


def random_network(rng) -> FlowNetwork:
    inner = int(rng.integers(0, 9))
    n = inner + 2
    net = FlowNetwork(n, 0, n - 1)
    for _ in range(int(rng.integers(0, 3 * n))):
        u, v = (int(x) for x in rng.integers(0, n, size=2))
        if u != v:
            net.add_edge(u, v, int(rng.integers(0, 21)))
    return net


def assert_conservation(net: FlowNetwork) -> None:
    balance = [0] * net.n
    for e in range(0, len(net.to), 2):
        f = net.edge_flow(e)
        assert 0 <= f <= net.cap[e]
        balance[net.head[e]] -= f
        balance[net.to[e]] += f
    for v in range(net.n):
        if v not in (net.source, net.sink):
            assert balance[v] == 0


def test_single_edge():
    net = FlowNetwork(2, 0, 1)
    net.add_edge(0, 1, 7)
    assert max_flow(net) == (7, {0})


def test_disconnected_sink():
    net = FlowNetwork(4, 0, 3)
    net.add_edge(0, 1, 5)
    net.add_edge(1, 2, 4)
    assert max_flow(net) == (0, {0, 1, 2})
    assert net.source_maximal_side() == {0, 1, 2}


def test_four_node_network():
    s, a, b, t = range(4)
    net = FlowNetwork(4, s, t)
    for u, v, c in [(s, a, 3), (s, b, 2), (a, b, 1), (a, t, 2), (b, t, 3)]:
        net.add_edge(u, v, c)
    value, side = max_flow(net)
    assert value == 5
    # both {s} and {s, a, b} cut 5 units; residual reachability picks {s}
    assert side == {s}
    assert net.source_maximal_side() == {s, a, b}
    assert net.sink_side() == {t}
    assert net.cut_capacity(side) == 5
    assert net.cut_capacity({s, a, b}) == 5
    assert_conservation(net)


def test_invalid_networks_are_rejected():
    with pytest.raises(ValueError):
        FlowNetwork(3, 1, 1)
    net = FlowNetwork(3, 0, 2)
    with pytest.raises(ValueError):
        net.add_edge(0, 3, 1)
    with pytest.raises(ValueError):
        net.add_edge(0, 1, -1)


def test_max_flow_matches_exhaustive_min_cut():
    rng = np.random.default_rng(2024)
    for _ in range(500):
        net = random_network(rng)
        value, side = max_flow(net)
        assert value == brute_force_min_cut(net)
        assert net.cut_capacity(side) == value
        assert net.source in side and net.sink not in side
        maximal = net.source_maximal_side()
        assert side <= maximal and net.sink not in maximal
        assert net.cut_capacity(maximal) == value
        assert_conservation(net)


def test_solving_twice_gives_the_same_answer():
    net = random_network(np.random.default_rng(5))
    assert max_flow(net) == max_flow(net)


def test_center_seed_on_3x3():
    seeds = sample_center_seeds(3, 3, SegmenterParams(radius_fraction=0.2, seed_count=1), rng_seed=0)
    assert seeds.foreground == [(1, 1)]
    assert len(seeds.background) == 8 and (1, 1) not in seeds.background


def test_center_seeds_are_deterministic_and_in_disk():
    params = SegmenterParams(radius_fraction=0.45, seed_count=5)
    seeds = sample_center_seeds(9, 9, params, rng_seed=11)
    assert seeds == sample_center_seeds(9, 9, params, rng_seed=11)
    assert len(set(seeds.foreground)) == 5
    radius = 0.45 * 9
    for r, c in seeds.foreground:
        assert (r - 4) ** 2 + (c - 4) ** 2 <= radius ** 2
        assert 0 < r < 8 and 0 < c < 8


def test_too_many_seeds_is_rejected():
    with pytest.raises(ValueError, match="seeds required"):
        sample_center_seeds(8, 8, SegmenterParams(), rng_seed=0)


def test_seed_set_validation():
    with pytest.raises(ValueError):
        SeedSet([(0, 0)], [(0, 0)]).validate(3, 3)
    with pytest.raises(ValueError):
        SeedSet([(5, 5)], [(0, 0)]).validate(3, 3)
    with pytest.raises(ValueError):
        SeedSet([], [(0, 0)]).validate(3, 3)


def test_nlink_capacity_formula():
    params = SegmenterParams(sigma=0.1, quantization=10_000)
    c = np.array([0.2, 0.4, 0.6])
    assert nlink_capacity(c, c, params) == 10_000
    far = np.array([math.sqrt(2 * 0.1 ** 2), 0.0, 0.0])
    assert nlink_capacity(np.zeros(3), far, params) == round(10_000 * math.exp(-1))


def test_nlink_capacity_is_monotone_in_distance():
    params = SegmenterParams()
    distances = np.linspace(0.0, 1.0, 50)
    caps = [int(nlink_capacity(np.zeros(3), np.array([d, 0.0, 0.0]), params)) for d in distances]
    assert all(a >= b for a, b in zip(caps, caps[1:]))


def test_build_graph_edge_counts():
    params = SegmenterParams(quantization=1000, radius_fraction=0.2, seed_count=1)
    seeds = sample_center_seeds(3, 3, params, 0)
    net = build_graph(np.full((3, 3, 3), 0.5), seeds, params)
    pixel_edges = [(u, v, c) for u, v, c in net.edges if u < 9 and v < 9]
    assert len(pixel_edges) == 24
    assert all(c == 1000 for _, _, c in pixel_edges)
    from_source = [e for e in net.edges if e[0] == net.source]
    to_sink = [e for e in net.edges if e[1] == net.sink]
    assert len(from_source) == 1 and len(to_sink) == 8
    assert len(net.edges) == 33


def test_eight_connectivity_adds_diagonals():
    params = SegmenterParams(quantization=10, radius_fraction=0.2, seed_count=1, connectivity=8)
    net = build_graph(np.zeros((3, 3, 3)), sample_center_seeds(3, 3, params, 0), params)
    assert len([e for e in net.edges if e[0] < 9 and e[1] < 9]) == 2 * (12 + 8)


def small_params():
    return SegmenterParams(radius_fraction=0.2, seed_count=1)


def test_segment_red_center():
    image = np.zeros((3, 3, 3))
    image[:, :, 2] = 1.0
    image[1, 1] = [1.0, 0.0, 0.0]
    expected = np.zeros((3, 3), bool)
    expected[1, 1] = True
    np.testing.assert_array_equal(segment(image, small_params()), expected)


def test_segment_uniform_3x3():
    mask = segment(np.full((3, 3, 3), 0.3), small_params())
    assert mask.sum() == 1 and mask[1, 1]


def test_segment_central_square():
    image = np.full((8, 8, 3), 0.1)
    image[2:6, 2:6] = [0.9, 0.8, 0.9]
    expected = np.zeros((8, 8), bool)
    expected[2:6, 2:6] = True
    mask = segment(image, SegmenterParams(seed_count=4))
    np.testing.assert_array_equal(mask, expected)


def test_segment_with_explicit_seeds():
    image = np.zeros((5, 5, 3))
    image[1:4, 1:4] = 1.0
    seeds = SeedSet([(2, 2)], [(0, 0), (4, 4)])
    mask = segment_with_seeds(image, seeds, SegmenterParams())
    assert mask[2, 2] and not mask[0, 0] and not mask[4, 4]
    assert mask[1:4, 1:4].all()


def test_synthetic_fidelity():
    cfg = SynthConfig(side=32, n_classes=2, amplitude=0.1)
    rng = np.random.default_rng(77)
    params = SegmenterParams()
    hits = 0
    for index in range(50):
        image, truth, _ = synth_sample(rng, cfg)
        mask = segment(image, params, rng_seed=index)
        seeds = sample_center_seeds(32, 32, params, index)
        assert all(mask[r, c] for r, c in seeds.foreground)
        assert not any(mask[r, c] for r, c in seeds.background)
        if index < 5:
            assert np.array_equal(mask, segment(image, params, rng_seed=index))
        hits += mask_iou(mask, truth) >= 0.95
    assert hits >= 45


def test_mask_iou():
    a = np.array([[True, True], [False, False]])
    b = np.array([[True, False], [False, False]])
    assert mask_iou(a, b) == 0.5
    assert mask_iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1.0


def test_segment_manifest(tmp_path):
    synth_generate(SynthConfig(n_samples=4, side=16, amplitude=0.1, seed=3), tmp_path / "data")
    summary = segment_manifest(tmp_path / "data" / "manifest.txt", tmp_path / "seg",
                               SegmenterParams(seed_count=5), rng_seed=0, threads=2)
    assert summary["segmented"] == 4 and summary["skipped"] == 0

    manifest = read_manifest(tmp_path / "seg" / "manifest.txt")
    assert manifest.has_masks and len(manifest) == 4
    for record in manifest.records:
        assert record.image_path.startswith("images/") and record.mask_path.startswith("masks/")
        assert (tmp_path / "seg" / record.image_path).is_file()
        assert read_mask(tmp_path / "seg" / record.mask_path).any()


def test_segment_manifest_skips_unreadable(tmp_path):
    synth_generate(SynthConfig(n_samples=3, side=16, amplitude=0.1, seed=1), tmp_path / "data")
    (tmp_path / "data" / "images" / "000001.ppm").write_bytes(b"garbage")
    summary = segment_manifest(tmp_path / "data" / "manifest.txt", tmp_path / "seg",
                               SegmenterParams(seed_count=5))
    assert summary["segmented"] == 2
    assert summary["failed_images"] == ["images/000001.ppm"]


def test_segmented_dataset_is_self_contained(tmp_path):
    synth_generate(SynthConfig(n_samples=2, side=16, amplitude=0.1, seed=2), tmp_path / "data")
    segment_manifest(tmp_path / "data" / "manifest.txt", tmp_path / "seg", SegmenterParams(seed_count=5))
    source = read_manifest(tmp_path / "data" / "manifest.txt")
    (tmp_path / "seg").rename(tmp_path / "moved")
    manifest = read_manifest(tmp_path / "moved" / "manifest.txt")
    for original, record in zip(source.records, manifest.records):
        assert ".." not in record.image_path.split("/")
        copied = (tmp_path / "moved" / record.image_path).read_bytes()
        assert copied == (tmp_path / "data" / original.image_path).read_bytes()
        assert read_mask(tmp_path / "moved" / record.mask_path).shape == (16, 16)
