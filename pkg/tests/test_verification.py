import json

import numpy as np
import pytest

from safenav.policy import Layer, PolicyNetwork, feature_ranges, random_network
from safenav.verification import (EnumerationConfig, EnumerationResult, IntervalBox, OutputProperty, SafeSet,
                                  Verdict, build_safe_set, check_box, density_map, enumerate_unsafe,
                                  harvest_unsafe_pairs, interval_forward, load_property_file, match_unsafe_regions,
                                  property_file_dict, read_density_map, write_density_map)


def const_net(out, n=2):
    return PolicyNetwork((Layer(np.zeros((2, n)), np.asarray(out, float)),))


def threshold_net():
    """w3 = x0 + x1 - 1 (via a ReLU pair), v1 = 0; unsafe where w3 > 0."""
    l1 = Layer(np.array([[1.0, 1.0], [-1.0, -1.0]]), np.array([-1.0, 1.0]), "relu")
    l2 = Layer(np.array([[0.0, 0.0], [1.0, -1.0]]), np.zeros(2))
    return PolicyNetwork((l1, l2))


NO_LEFT = OutputProperty.from_halfplanes([((0.0, -1.0), 0.0)])  # w3 <= 0
UNIT = IntervalBox(np.zeros(2), np.ones(2))


# --- boxes / properties -----------------------------------------------------------

def test_box_validation():
    with pytest.raises(ValueError):
        IntervalBox(np.array([1.0]), np.array([0.0]))
    with pytest.raises(ValueError):
        IntervalBox(np.array([0.0]), np.array([np.inf]))


def test_property_validation():
    with pytest.raises(ValueError):
        OutputProperty(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        OutputProperty.from_halfplanes([((np.nan, 0.0), 0.0)])


# --- interval propagation -----------------------------------------------------------

def test_identity_layer_interval():
    net = PolicyNetwork((Layer(np.eye(2), np.zeros(2)),))
    out = interval_forward(net, UNIT)
    np.testing.assert_allclose(out.lo, [0, 0], atol=1e-11)
    np.testing.assert_allclose(out.hi, [1, 1], atol=1e-11)


def test_relu_interval():
    net = PolicyNetwork((Layer(np.eye(2), np.zeros(2), "relu"),))
    out = interval_forward(net, IntervalBox(np.array([-1.0, -1.0]), np.array([2.0, 2.0])))
    np.testing.assert_allclose(out.lo, [0, 0], atol=1e-11)
    np.testing.assert_allclose(out.hi, [2, 2], atol=1e-11)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        interval_forward(threshold_net(), IntervalBox(np.zeros(3), np.ones(3)))


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_monte_carlo_enclosure(rng, act):
    for _ in range(5):
        net = random_network([4, 16, 16, 2], rng, activation=act, ranges=[[0, 0.5], [-1.5, 1.5]])
        lo = rng.uniform(-2, 0, 4)
        box = IntervalBox(lo, lo + rng.uniform(0.1, 2, 4))
        out = interval_forward(net, box)
        y = net(box.sample(rng, 20000))
        assert np.all(y >= out.lo) and np.all(y <= out.hi)


def test_enclosure_monotone(rng):
    net = random_network([3, 12, 2], rng)
    outer = IntervalBox(-np.ones(3), np.ones(3))
    inner = IntervalBox(np.array([-0.5, 0.0, 0.2]), np.array([0.1, 0.9, 0.3]))
    assert interval_forward(net, outer).contains_box(interval_forward(net, inner))


# --- check_box -------------------------------------------------------------------------

def test_check_box_verdicts():
    assert check_box(const_net([0.1, -0.5]), UNIT, NO_LEFT).verdict is Verdict.CERTIFIED_SAFE
    bad = check_box(const_net([0.1, 0.5]), UNIT, NO_LEFT)
    assert bad.verdict is Verdict.COUNTEREXAMPLE
    np.testing.assert_array_equal(bad.counterexample, [0.5, 0.5])


def test_check_box_unknown_for_straddling_threshold():
    # w3 = x0 - 0.999 over [0, 1]^2: violations only in a sliver the sampler misses
    net = PolicyNetwork((Layer(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([0.0, -0.999])),))
    chk = check_box(net, UNIT, NO_LEFT, m=1)
    assert chk.verdict is Verdict.UNKNOWN


# --- enumeration ------------------------------------------------------------------------

def leaf_volume(res):
    return sum(b.volume() for b in res.safe_leaves) + sum(u.box.volume() for u in res.unsafe_leaves)


def test_always_safe_single_leaf():
    res = enumerate_unsafe(const_net([0.0, -1.0]), UNIT, NO_LEFT)
    assert len(res.safe_leaves) == 1 and res.unsafe_leaves == []


def test_always_unsafe_covers_root():
    res = enumerate_unsafe(const_net([0.0, 1.0]), UNIT, NO_LEFT, EnumerationConfig(min_width=0.25, mc_samples=50))
    assert res.safe_leaves == []
    assert leaf_volume(res) == pytest.approx(1.0, rel=1e-9)
    assert all(u.violation_rate == 1.0 for u in res.unsafe_leaves)


def test_threshold_net_against_grid_oracle():
    net = threshold_net()
    res = enumerate_unsafe(net, UNIT, NO_LEFT, EnumerationConfig(min_width=1 / 128, mc_samples=0))
    g = (np.arange(400) + 0.5) / 400
    X, Y = np.meshgrid(g, g)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    truth_safe = NO_LEFT.satisfied(net(pts))
    in_safe = np.zeros(len(pts), bool)
    for b in res.safe_leaves:
        in_safe |= np.all((pts >= b.lo) & (pts <= b.hi), axis=1)
    assert not np.any(in_safe & ~truth_safe)
    assert in_safe.sum() / truth_safe.sum() >= 0.9
    # partition
    assert leaf_volume(res) == pytest.approx(1.0, rel=1e-9)
    boxes = res.safe_leaves + [u.box for u in res.unsafe_leaves]
    mids = np.array([b.center for b in boxes])
    for b in boxes:
        assert np.sum(np.all((mids > b.lo) & (mids < b.hi), axis=1)) == 1


def test_safe_leaves_sampled_soundness(rng):
    net = random_network([2, 8, 8, 2], rng)
    prop = OutputProperty.from_halfplanes([((0.0, -1.0), 0.3)])
    res = enumerate_unsafe(net, IntervalBox(-np.ones(2), np.ones(2)), prop, EnumerationConfig(min_width=1 / 32))
    for b in res.safe_leaves:
        assert np.all(prop.satisfied(net(b.sample(rng, 10000))))


def test_enumeration_deterministic_and_round_trip(tmp_path):
    cfg = EnumerationConfig(min_width=1 / 32, mc_samples=100, seed=4)
    a = enumerate_unsafe(threshold_net(), UNIT, NO_LEFT, cfg)
    b = enumerate_unsafe(threshold_net(), UNIT, NO_LEFT, cfg)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    a.save(tmp_path / "r.json")
    assert EnumerationResult.load(tmp_path / "r.json").to_dict() == a.to_dict()


def test_max_leaves_flags_incomplete():
    res = enumerate_unsafe(threshold_net(), UNIT, NO_LEFT, EnumerationConfig(min_width=1 / 128, max_leaves=10))
    assert res.incomplete
    assert leaf_volume(res) == pytest.approx(1.0, rel=1e-9)
    with pytest.raises(ValueError):
        build_safe_set([(UNIT, res)], (0, 1))
    build_safe_set([(UNIT, res)], (0, 1), allow_incomplete=True)


def test_point_root_rejected():
    with pytest.raises(ValueError):
        enumerate_unsafe(threshold_net(), IntervalBox(np.zeros(2), np.zeros(2)), NO_LEFT)


# --- safe set -----------------------------------------------------------------------------

def manual_result(root, unsafe_boxes):
    from safenav.verification import UnsafeLeaf

    return EnumerationResult(root, [], [UnsafeLeaf(b, 1.0, None) for b in unsafe_boxes])


def test_safe_set_membership_and_centroid():
    cbar = IntervalBox(np.array([0.0, 0.0]), np.array([0.5, 1.0]))
    s = build_safe_set([(UNIT, manual_result(UNIT, [cbar]))], (0, 1))
    assert s.contains([0.75, 0.5])
    assert not s.contains([0.25, 0.5])
    np.testing.assert_array_equal(s.centroids, [[0.25, 0.5]])


def test_safe_set_empty_unsafe_is_box_membership(tmp_path):
    s = build_safe_set([(UNIT, manual_result(UNIT, []))], (0, 1))
    assert s.contains([0.2, 0.9]) and not s.contains([1.2, 0.5])
    s.save(tmp_path / "s.json")
    assert SafeSet.load(tmp_path / "s.json").to_dict() == s.to_dict()


def test_match_unsafe_regions_ordering():
    far = IntervalBox(np.array([10.0, 10.0]), np.array([11.0, 11.0]))
    one = IntervalBox(np.array([2.0, -0.5]), np.array([3.0, 0.5]))
    two = IntervalBox(np.array([-3.0, -0.5]), np.array([-2.5, 0.5]))
    root = IntervalBox(np.array([-20.0, -20.0]), np.array([20.0, 20.0]))
    s = build_safe_set([(root, manual_result(root, [far, two, one]))], (0, 1))
    got = match_unsafe_regions(np.array([1.0, 0.0]), s, r_look=4.0)
    assert [m.distance for m in got] == pytest.approx([1.0, 3.5])
    assert match_unsafe_regions(np.array([-15.0, -15.0]), s, r_look=1.0) == []
    inside = match_unsafe_regions(np.array([10.5, 10.5]), s)
    assert inside[0].distance == 0.0 and inside[0].box is far


def test_density_map_cases(tmp_path):
    root = IntervalBox(np.zeros(2), np.array([4.0, 4.0]))
    empty = build_safe_set([(root, manual_result(root, []))], (0, 1))
    assert np.all(density_map(empty, (0, 0, 4, 4), 1.0) == 0)
    full = IntervalBox(np.array([1.0, 2.0]), np.array([2.0, 3.0]))
    half = IntervalBox(np.array([3.0, 0.0]), np.array([3.5, 1.0]))
    s = build_safe_set([(root, manual_result(root, [full, half, full]))], (0, 1))
    g = density_map(s, (0, 0, 4, 4), 1.0)
    assert g[2, 1] == 1.0 and g[0, 3] == pytest.approx(0.5)
    assert g.sum() == pytest.approx(1.5)
    write_density_map(tmp_path / "d.txt", g, (0, 0, 4, 4), 1.0)
    back, meta = read_density_map(tmp_path / "d.txt")
    np.testing.assert_allclose(back, g)
    assert meta == {"bounds": [0.0, 0.0, 4.0, 4.0], "resolution": 1.0}


def test_density_map_area_oracle(rng):
    """Union coverage against a fine supersampled raster."""
    root = IntervalBox(np.zeros(2), np.full(2, 2.0))
    boxes = []
    for _ in range(6):
        lo = rng.uniform(0, 1.6, 2)
        boxes.append(IntervalBox(lo, lo + rng.uniform(0.1, 0.6, 2)))
    s = build_safe_set([(root, manual_result(root, boxes))], (0, 1))
    g = density_map(s, (0, 0, 2, 2), 2.0)
    n = 400
    c = (np.arange(n) + 0.5) / n * 2
    X, Y = np.meshgrid(c, c)
    cov = np.zeros_like(X, bool)
    for b in boxes:
        cov |= (X >= b.lo[0]) & (X <= b.hi[0]) & (Y >= b.lo[1]) & (Y <= b.hi[1])
    oracle = cov.reshape(4, n // 4, 4, n // 4).mean(axis=(1, 3))
    np.testing.assert_allclose(g, oracle, atol=2 * 2 / n * 2)


def test_density_resolution_must_be_positive():
    s = build_safe_set([], (0, 1))
    with pytest.raises(ValueError):
        density_map(s, (0, 0, 1, 1), 0.0)


# --- harvesting ---------------------------------------------------------------------------

FR = feature_ranges(20, (0, 0, 10, 10), 3.5)


def obs_with_min_beam(k):
    x = np.zeros(20)
    x[:15] = 3.0
    x[k] = 0.2
    x[15:18] = (5.0, 5.0, 0.0)
    x[18:] = (4.0, 0.3)
    return x


@pytest.mark.parametrize("cone,expect", [(3, ((0.0, -1.0), 0.0)), (11, ((0.0, 1.0), 0.0)),
                                         (0, ((-1.0, 0.0), 0.1))])
def test_harvest_cone_heuristic(cone, expect):
    log = [[{"obs": obs_with_min_beam(cone), "collision": False}, {"obs": obs_with_min_beam(cone), "collision": True}]]
    pairs = harvest_unsafe_pairs(log, 0.05, FR)
    assert len(pairs) == 1
    box, prop = pairs[0]
    np.testing.assert_array_equal(prop.C, [expect[0]])
    np.testing.assert_array_equal(prop.b, [expect[1]])
    assert box.contains(obs_with_min_beam(cone))
    assert box.width[15] == pytest.approx(2 * 0.05 * 10)


def test_harvest_without_collisions_is_empty():
    assert harvest_unsafe_pairs([[{"obs": obs_with_min_beam(0), "collision": False}]], 0.05, FR) == []


def test_harvest_zero_epsilon_rejected():
    with pytest.raises(ValueError):
        harvest_unsafe_pairs([[{"obs": obs_with_min_beam(0), "collision": True}]], 0.0, FR)


def test_property_file_round_trip(tmp_path):
    box = IntervalBox(np.zeros(2), np.ones(2))
    path = tmp_path / "p.json"
    path.write_text(json.dumps(property_file_dict(box, NO_LEFT)))
    b2, p2 = load_property_file(path)
    np.testing.assert_array_equal(b2.hi, box.hi)
    np.testing.assert_array_equal(p2.C, NO_LEFT.C)
