from __future__ import annotations

import numpy as np
import pytest

from stmrf import (
    IdentityRefiner,
    ImageFrame,
    LabelField,
    OracleRefiner,
    Params,
    decoupled_energy,
    full_energy,
    fusion_objective,
)
from stmrf.energy import (
    coupling_energy_field,
    spatial_energy,
    temporal_energy,
    temporal_energy_field,
    unary_energy,
    unary_energy_field,
)
from stmrf.errors import DimensionError, ValidationError

from fusioncases import random_instance, translation_graph


def test_unary_hand_values():
    assert abs(unary_energy(1, 0.99, 1.0) - 0.010050335853501441) < 1e-15
    assert abs(unary_energy(0, 0.99, 1.0) - 4.605170185988091) < 1e-12
    assert abs(unary_energy(1, 0.5, 1.0) - 0.6931471805599453) < 1e-15
    assert abs(unary_energy(0, 0.5, 3.0) - 3 * 0.6931471805599453) < 1e-15


def test_unary_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        unary_energy(2, 0.5, 1.0)
    with pytest.raises(ValidationError):
        unary_energy(1, 0.0, 1.0)
    with pytest.raises(ValidationError):
        unary_energy(1, 1.0, 1.0)
    with pytest.raises(ValidationError):
        unary_energy(1, 0.5, 0.0)


def test_temporal_hand_values():
    assert temporal_energy(0, 0, 0.9, 1.0) == 0.0
    assert temporal_energy(1, 1, 0.9, 1.0) == 0.0
    assert abs(temporal_energy(0, 1, 0.9, 2.0) - 1.8) < 1e-15
    assert abs(temporal_energy(1, 0, 0.3, 1.0) - 0.3) < 1e-15


def test_coupling_hand_value():
    x = np.array([[1.0, 0.0]])
    y = np.array([[0.25, 0.5]])
    # 0.5 * 2 * (0.75^2 + 0.5^2) = 0.8125
    assert abs(coupling_energy_field(x, y, 2.0) - 0.8125) < 1e-15
    assert coupling_energy_field(x, x, 5.0) == 0.0
    with pytest.raises(DimensionError):
        coupling_energy_field(x, y.T, 1.0)
    with pytest.raises(ValidationError):
        coupling_energy_field(x, y, -1.0)


def test_spatial_hand_value():
    y = np.array([[1.0, 0.5]])
    refined = np.array([[0.0, 0.5]])
    assert abs(spatial_energy(y, refined, 3.0) - 3.0) < 1e-15
    assert spatial_energy(y, y, 7.0) == 0.0


def test_unary_field_matches_scalar_sum():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=(2, 3, 4)).astype(np.uint8)
        probs = rng.uniform(0.01, 0.99, size=(2, 3, 4))
        want = sum(unary_energy(int(l), float(p), 1.3)
                   for l, p in zip(labels.ravel(), probs.ravel()))
        got = unary_energy_field(labels, probs, 1.3)
        assert abs(got - want) < 1e-9


def test_temporal_field_matches_edge_sum():
    for seed in range(10):
        graph, probs, y, x0 = random_instance(seed)
        rng = np.random.default_rng(seed + 500)
        x = rng.integers(0, 2, size=probs.shape).astype(np.uint8)
        flat = x.reshape(graph.frame_count, -1)
        want = sum(e.weight * (int(flat[e.frame_a, e.pixel_a])
                               - int(flat[e.frame_b, e.pixel_b])) ** 2
                   for e in graph.iter_edges())
        got = temporal_energy_field(x, graph, 1.0)
        assert abs(got - want) < 1e-9


def test_fusion_objective_is_sum_of_parts():
    for seed in range(10):
        graph, probs, y, x = random_instance(seed)
        params = Params(theta_u=1.1, theta_t=0.7)
        beta = 2.5
        want = (unary_energy_field(x, probs, 1.1)
                + temporal_energy_field(x, graph, 0.7)
                + coupling_energy_field(x, y, beta))
        got = fusion_objective(x, y, graph, probs, beta, params)
        assert abs(got - want) < 1e-9


def _frames(graph):
    rgb = np.zeros((graph.height, graph.width, 3), dtype=np.uint8)
    return [ImageFrame(t, rgb) for t in range(graph.frame_count)]


def test_decoupled_identity_refiner_has_zero_spatial():
    graph, probs, y, x = random_instance(3)
    params = Params()
    e = decoupled_energy(x, y, graph, probs, _frames(graph), IdentityRefiner(),
                         2.0, params)
    assert e.spatial == 0.0
    assert abs(e.total - (e.unary + e.temporal + e.coupling + e.spatial)) < 1e-12


def test_decoupled_oracle_refiner_measures_distance_to_reference():
    graph, probs, y, x = random_instance(4)
    rng = np.random.default_rng(9)
    refs = {}
    masks = []
    for t in range(graph.frame_count):
        ref = rng.integers(0, 2, size=(graph.height, graph.width)).astype(np.uint8)
        refs[t] = ref
        masks.append(LabelField(t, 0, ref))
    refiner = OracleRefiner.from_masks(masks)
    beta = 3.0
    params = Params(theta_s=1.4)
    e = decoupled_energy(x, y, graph, probs, _frames(graph), refiner, beta, params)
    want = sum(1.4 * float(((y[t] - refs[t]) ** 2).sum())
               for t in range(graph.frame_count))
    assert abs(e.spatial - want) < 1e-9


def test_spatial_weight_tracks_beta_when_unpinned():
    graph, probs, y, x = random_instance(5)
    frames = _frames(graph)
    masks = [LabelField(t, 0, np.zeros((graph.height, graph.width), np.uint8))
             for t in range(graph.frame_count)]
    refiner = OracleRefiner.from_masks(masks)
    beta = 4.0
    e_track = decoupled_energy(x, y, graph, probs, frames, refiner, beta, Params())
    e_pin = decoupled_energy(x, y, graph, probs, frames, refiner, beta,
                             Params(theta_s=beta))
    assert abs(e_track.spatial - e_pin.spatial) < 1e-12


def test_full_energy_drops_coupling():
    graph, probs, y, x = random_instance(6)
    frames = _frames(graph)
    e = full_energy(x, graph, probs, frames, IdentityRefiner(), Params())
    assert e.coupling == 0.0
    d = decoupled_energy(x, x.astype(np.float64), graph, probs, frames,
                         IdentityRefiner(), 1.5, Params())
    assert abs(e.unary - d.unary) < 1e-12
    assert abs(e.temporal - d.temporal) < 1e-12


def test_energy_rejects_mismatched_stacks():
    graph = translation_graph(3, 4, 4, (0, 0))
    x = np.zeros((3, 4, 4), dtype=np.uint8)
    bad = np.zeros((2, 4, 4))
    probs = np.full((3, 4, 4), 0.5)
    with pytest.raises(DimensionError):
        fusion_objective(x, bad, graph, probs, 1.0, Params())
    with pytest.raises(DimensionError):
        temporal_energy_field(np.zeros((3, 4, 5), np.uint8), graph, 1.0)
