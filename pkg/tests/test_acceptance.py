"""Whole-system checks covering the engine's hard guarantees.

Each test states one requirement: objective descent, agreement with
exhaustive search, recovery from corrupted starts, link-graph structure,
metric reference values, and bit-exact reproducibility. Tests that promise
a wall-time budget measure it with time.monotonic.
"""

from __future__ import annotations

import time

import numpy as np
from scipy import ndimage

from stmrf import (
    AblationMode,
    ExemplarRefiner,
    IdentityRefiner,
    ImageFrame,
    LabelField,
    LikelihoodField,
    OracleRefiner,
    Params,
    ResponseDropout,
    SceneShape,
    SceneSpec,
    brute_force_map,
    build_temporal_graph,
    contour_accuracy,
    corrupt_mask,
    fusion_objective,
    generate_scene,
    initialize_sequence,
    region_similarity,
    resolve_overlaps,
    run_inference,
    temporal_fusion,
)

from fusioncases import random_probs, translation_graph


def _fusion_instance(seed: int):
    """A random descent problem: 3 to 5 frames, sides up to 64 pixels."""
    rng = np.random.default_rng(seed)
    frame_count = int(rng.integers(3, 6))
    height = int(rng.integers(8, 65))
    width = int(rng.integers(8, 65))
    vel = (int(rng.integers(-2, 3)), int(rng.integers(-2, 3)))
    graph = translation_graph(frame_count, height, width, vel)
    shape = (frame_count, height, width)
    probs = random_probs(rng, shape)
    y = rng.uniform(0.0, 1.0, size=shape)
    x0 = rng.integers(0, 2, size=shape).astype(np.uint8)
    beta = float(rng.uniform(0.2, 3.0))
    return graph, probs, y, x0, beta


def test_fusion_sweep_objective_never_increases():
    start = time.monotonic()
    params = Params()
    comparisons = 0
    for seed in range(50):
        graph, probs, y, x0, beta = _fusion_instance(seed)
        before = fusion_objective(x0, y, graph, probs, beta, params)
        _, per_sweep = temporal_fusion(x0, y, graph, probs, beta, params,
                                       record_objective=True)
        values = [before] + per_sweep
        for a, b in zip(values, values[1:]):
            assert b <= a + 1e-9
            comparisons += 1
    assert comparisons >= 50
    assert time.monotonic() - start < 30.0


def test_fusion_agrees_with_exhaustive_search_on_small_volumes():
    start = time.monotonic()
    params = Params()
    geometries = [(2, 3, 3), (3, 2, 3), (2, 2, 3), (3, 2, 2), (2, 2, 2),
                  (2, 3, 2)]
    for seed in range(200):
        rng = np.random.default_rng([7, seed])
        frame_count, height, width = geometries[seed % len(geometries)]
        vel = (int(rng.integers(-1, 2)), int(rng.integers(-1, 2)))
        graph = translation_graph(frame_count, height, width, vel)
        shape = (frame_count, height, width)
        probs = random_probs(rng, shape)
        y = rng.uniform(0.0, 1.0, size=shape)
        x0 = rng.integers(0, 2, size=shape).astype(np.uint8)
        beta = float(rng.uniform(0.2, 3.0))

        best_labels, best_energy = brute_force_map(graph, probs, beta, params,
                                                   y)

        # coordinate descent can never beat the exhaustive minimum
        final, _ = temporal_fusion(x0, y, graph, probs, beta, params,
                                   sweeps=64)
        final_energy = fusion_objective(final, y, graph, probs, beta, params)
        assert final_energy >= best_energy - 1e-9

        # started at the minimum it must stay there
        kept, _ = temporal_fusion(best_labels, y, graph, probs, beta, params,
                                  sweeps=64)
        assert np.array_equal(kept, best_labels)

        # no single flip may improve the labeling it settled on
        flat = final.ravel()
        for i in range(flat.size):
            flat[i] ^= 1
            flipped = fusion_objective(final, y, graph, probs, beta, params)
            flat[i] ^= 1
            assert flipped >= final_energy - 1e-9
    assert time.monotonic() - start < 60.0


def test_identity_refiner_total_energy_monotone_with_fixed_penalty():
    params = Params(beta_growth=1.0)
    refiner = IdentityRefiner()
    for seed in range(50):
        graph, probs, _, x0, _ = _fusion_instance(seed)
        frames = [
            ImageFrame(t, np.zeros((graph.height, graph.width, 3),
                                   dtype=np.uint8))
            for t in range(graph.frame_count)
        ]
        init = {1: [LabelField(t, 1, x0[t]) for t in range(graph.frame_count)]}
        likes = {
            1: [LikelihoodField(t, 1, probs[t])
                for t in range(graph.frame_count)]
        }
        result = run_inference(init, frames, graph, likes, refiner, params)
        assert len(result.energy_trace) == params.outer_iters
        # the relaxed field starts equal to the labels, so the starting
        # total is the label energy alone
        head = fusion_objective(x0, x0.astype(np.float64), graph, probs,
                                params.beta0, params)
        totals = [head] + [e.total for e in result.energy_trace]
        for a, b in zip(totals, totals[1:]):
            assert b <= a + 1e-9


def test_oracle_refiner_recovers_truth_from_corrupted_starts():
    params = Params()
    specs = [
        SceneSpec(
            width=48, height=48, frame_count=7,
            shapes=(
                SceneShape(kind="disc", position=(24, 10), velocity=(0, 4),
                           color=(200, 60, 60), object_id=1, radius=8),
                SceneShape(kind="disc", position=(10, 36), velocity=(3, -2),
                           color=(60, 200, 60), object_id=2, radius=6),
            ),
            background=(10, 10, 10), flip_rate=0.1, seed=5),
        SceneSpec(
            width=40, height=40, frame_count=6,
            shapes=(
                SceneShape(kind="disc", position=(20, 6), velocity=(0, 5),
                           color=(200, 200, 60), object_id=1, radius=7),
                SceneShape(kind="rect", position=(8, 16), velocity=(0, 0),
                           color=(60, 60, 200), object_id=None, size=(24, 6)),
            ),
            background=(0, 0, 0), flip_rate=0.2, seed=9),
    ]
    for spec_idx, spec in enumerate(specs):
        scene = generate_scene(spec)
        graph = build_temporal_graph(scene.flows, spec.width, spec.height,
                                     spec.frame_count, params.fb_tolerance)
        init, likes = initialize_sequence(scene.responses, scene.flows,
                                          scene.first_annotations, params)
        for rate in (0.15, 0.3):
            corrupted = {
                obj: [corrupt_mask(f, rate, [spec_idx, obj, f.frame_index])
                      for f in series]
                for obj, series in init.items()
            }
            refiner = OracleRefiner.from_masks(scene.truth)
            result = run_inference(corrupted, scene.frames, graph, likes,
                                   refiner, params)
            for obj, series in scene.truth.items():
                for t, want in enumerate(series):
                    got = result.masks[obj][t].labels
                    assert np.array_equal(got, want.labels), \
                        (spec_idx, rate, obj, t)


def _crossing_sequence_spec(seed: int) -> SceneSpec:
    """Two tracked objects, one of which crosses behind untracked scenery."""
    return SceneSpec(
        width=128, height=128, frame_count=20,
        shapes=(
            SceneShape(kind="disc", position=(64, 26), velocity=(0, 12),
                       color=(200, 56, 56), object_id=1, radius=26),
            SceneShape(kind="rect", position=(30, 41), velocity=(0, 0),
                       color=(56, 56, 200), object_id=None, size=(68, 12)),
            SceneShape(kind="disc", position=(20, 104), velocity=(0, 0),
                       color=(56, 200, 56), object_id=2, radius=12),
        ),
        background=(8, 8, 8),
        background_velocity=(16, 0),
        flip_rate=0.15,
        dropouts=(
            ResponseDropout(object_id=1, start=1, length=1, scale=0.45),
            ResponseDropout(object_id=2, start=1, length=19, scale=0.45),
        ),
        seed=seed,
    )


def test_crossing_occlusion_recovery_beats_single_move_modes():
    start = time.monotonic()
    params = Params(sigma_motion=33.0, ring_radius=45, sigma_uncertain=25.0)
    means = {mode: [] for mode in AblationMode}
    for seed in range(10):
        spec = _crossing_sequence_spec(seed)
        scene = generate_scene(spec)
        graph = build_temporal_graph(scene.flows, spec.width, spec.height,
                                     spec.frame_count, params.fb_tolerance)
        init, likes = initialize_sequence(scene.responses, scene.flows,
                                          scene.first_annotations, params)
        for mode in AblationMode:
            refiner = ExemplarRefiner.from_first_frame(scene.frames[0],
                                                       scene.first_annotations)
            result = run_inference(init, scene.frames, graph, likes, refiner,
                                   params, mode=mode)
            refiner.close()
            scores = [
                region_similarity(result.masks[obj][t].labels,
                                  scene.truth[obj][t].labels)
                for obj in (1, 2)
                for t in range(1, spec.frame_count)
            ]
            means[mode].append(float(np.mean(scores)))
    joint = float(np.mean(means[AblationMode.TF_AND_MR]))
    fusion_only = float(np.mean(means[AblationMode.TF_ONLY]))
    refine_only = float(np.mean(means[AblationMode.MR_ONLY]))
    assert joint >= 0.90
    assert joint > refine_only
    assert joint > fusion_only
    assert refine_only > fusion_only
    assert time.monotonic() - start < 180.0


def test_link_graph_matches_scene_occlusion_record():
    params = Params()
    specs = [
        SceneSpec(
            width=32, height=32, frame_count=5,
            shapes=(
                SceneShape(kind="disc", position=(16, 6), velocity=(0, 5),
                           color=(200, 60, 60), object_id=1, radius=6),
                SceneShape(kind="rect", position=(4, 14), velocity=(0, 0),
                           color=(60, 60, 200), object_id=None, size=(24, 4)),
            ),
            background=(0, 0, 0), flip_rate=0.0, seed=0),
        SceneSpec(
            width=24, height=24, frame_count=6,
            shapes=(
                SceneShape(kind="disc", position=(12, 4), velocity=(0, 3),
                           color=(200, 60, 60), object_id=1, radius=4),
                SceneShape(kind="disc", position=(4, 18), velocity=(3, -2),
                           color=(60, 200, 60), object_id=2, radius=4),
            ),
            background=(8, 8, 8), flip_rate=0.05, seed=3),
    ]
    for spec in specs:
        scene = generate_scene(spec)
        graph = build_temporal_graph(scene.flows, spec.width, spec.height,
                                     spec.frame_count, params.fb_tolerance)
        pruned_somewhere = False
        for (t, k), ok in scene.valid_links.items():
            arr = graph.target_array(t, k)
            linked = np.zeros(spec.height * spec.width, dtype=bool)
            if arr is not None:
                linked = arr >= 0
            assert np.array_equal(linked.reshape(spec.height, spec.width),
                                  ok), (t, k)
            pruned_somewhere = pruned_somewhere or bool((~ok).any())
        assert pruned_somewhere
        for t in range(spec.frame_count):
            assert int(graph.degree_array(t).max()) <= 4
        for edge in graph.iter_edges():
            want = (max(0.9 ** edge.frame_a, 0.3)
                    * max(0.9 ** edge.frame_b, 0.3))
            assert abs(edge.weight - want) <= 1e-12


def test_multi_object_supports_stay_disjoint_and_blob_choices_optimal():
    params = Params()
    spec = SceneSpec(
        width=48, height=48, frame_count=8,
        shapes=(
            SceneShape(kind="disc", position=(24, 10), velocity=(0, 4),
                       color=(200, 60, 60), object_id=1, radius=9),
            SceneShape(kind="disc", position=(12, 38), velocity=(2, -4),
                       color=(60, 200, 60), object_id=2, radius=8),
        ),
        background=(10, 10, 10), flip_rate=0.15, seed=2)
    scene = generate_scene(spec)
    graph = build_temporal_graph(scene.flows, spec.width, spec.height,
                                 spec.frame_count, params.fb_tolerance)
    init, likes = initialize_sequence(scene.responses, scene.flows,
                                      scene.first_annotations, params)
    result = run_inference(init, scene.frames, graph, likes,
                           IdentityRefiner(), params, record_states=True)
    assert len(result.states) == params.outer_iters
    for snapshot in result.states:
        assert int((snapshot[1] & snapshot[2]).sum()) == 0
    for t in range(spec.frame_count):
        both = result.masks[1][t].labels & result.masks[2][t].labels
        assert int(both.sum()) == 0

    # constructed two-object contention: a single contested blob must go to
    # the contender with the smaller restricted cost
    for seed in range(30):
        rng = np.random.default_rng([13, seed])
        graph = translation_graph(3, 5, 5, (0, 0))
        shape = (3, 5, 5)
        probs = {o: random_probs(rng, shape) for o in (1, 2)}
        y = {o: rng.uniform(0.0, 1.0, size=shape) for o in (1, 2)}
        beta = float(rng.uniform(0.2, 3.0))
        x = {1: np.zeros(shape, dtype=np.uint8),
             2: np.zeros(shape, dtype=np.uint8)}
        r = int(rng.integers(0, 3))
        c = int(rng.integers(0, 3))
        x[1][1, r:r + 3, c:c + 2] = 1
        x[2][1, r:r + 2, c:c + 3] = 1
        x[1][0, 0:2, 0:2] = 1
        x[2][2, 3:5, 3:5] = 1

        blob = (x[1][1] & x[2][1]).astype(bool)
        _, n_blobs = ndimage.label(blob)
        assert n_blobs == 1
        pix = np.nonzero(blob.ravel())[0]

        costs = {}
        for cand in (1, 2):
            total = 0.0
            for o in (1, 2):
                assign = 1 if o == cand else 0
                p = probs[o][1].ravel()[pix]
                total += float(-params.theta_u
                               * np.log(p if assign else 1.0 - p).sum())
                yv = y[o][1].ravel()[pix]
                total += 0.5 * beta * float(((assign - yv) ** 2).sum())
                flat = x[o].reshape(3, -1)
                for k in (-2, -1, 1, 2):
                    arr = graph.target_array(1, k)
                    if arr is None:
                        continue
                    tq = arr[pix]
                    valid = tq >= 0
                    if not valid.any():
                        continue
                    w = params.theta_t * graph.slot_weight(1, k)
                    n_lab = flat[1 + k][tq[valid]]
                    total += w * float((n_lab != assign).sum())
            costs[cand] = total
        want_winner = min(costs, key=lambda o: (costs[o], o))

        out = resolve_overlaps(x, graph, probs, y, beta, params)
        loser = 3 - want_winner
        assert np.array_equal(out[want_winner][1].ravel()[pix],
                              np.ones(pix.size, dtype=np.uint8))
        assert np.array_equal(out[loser][1].ravel()[pix],
                              np.zeros(pix.size, dtype=np.uint8))
        for o in (1, 2):
            untouched = ~blob
            assert np.array_equal(out[o][1][untouched], x[o][1][untouched])
            assert np.array_equal(out[o][0], x[o][0])
            assert np.array_equal(out[o][2], x[o][2])


def test_metric_fixtures_hit_reference_values():
    truth = np.zeros((12, 12), dtype=np.uint8)
    truth[3:7, 2:10] = 1
    half = np.zeros_like(truth)
    half[3:7, 2:6] = 1
    assert region_similarity(half, truth) == 0.5

    square = np.zeros((16, 16), dtype=np.uint8)
    square[4:10, 4:10] = 1
    shifted = np.roll(square, 1, axis=1)
    assert contour_accuracy(shifted, square, tolerance=2) == 1.0

    assert region_similarity(square, square) == 1.0
    assert contour_accuracy(square, square, tolerance=2) == 1.0


def test_identical_runs_are_bit_identical():
    params = Params(sigma_motion=33.0, ring_radius=45, sigma_uncertain=25.0)
    results = []
    for _ in range(2):
        spec = _crossing_sequence_spec(0)
        scene = generate_scene(spec)
        graph = build_temporal_graph(scene.flows, spec.width, spec.height,
                                     spec.frame_count, params.fb_tolerance)
        init, likes = initialize_sequence(scene.responses, scene.flows,
                                          scene.first_annotations, params)
        refiner = ExemplarRefiner.from_first_frame(scene.frames[0],
                                                   scene.first_annotations)
        results.append(run_inference(init, scene.frames, graph, likes,
                                     refiner, params))
        refiner.close()
    a, b = results
    assert sorted(a.masks) == sorted(b.masks)
    for obj in a.masks:
        for fa, fb in zip(a.masks[obj], b.masks[obj]):
            assert np.array_equal(fa.labels, fb.labels)
    assert len(a.energy_trace) == len(b.energy_trace)
    for ea, eb in zip(a.energy_trace, b.energy_trace):
        assert ea.unary == eb.unary
        assert ea.temporal == eb.temporal
        assert ea.coupling == eb.coupling
        assert ea.spatial == eb.spatial
        assert ea.total == eb.total
