from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_scene, seeds
from pushgrasp.perception import (
    border_strip,
    dump_stack,
    most_occluded_target,
    occluded_rate,
    occlusion_report,
    read_pnm,
    render,
)
from pushgrasp.sim import DEFAULT_SHAPES, Pose, add_object, empty_scene, remove_object


def test_half_covered_square(stacked_pair):
    rep = occlusion_report(stacked_pair, 0)
    assert rep.o == 0.5
    assert rep.t_m == 16
    assert rep.t_b == 24 * 24 - 16
    assert rep.o_b == 24  # the bar's 32 cells minus the 8 lying on the square
    assert rep.a_n == pytest.approx(1.5)
    assert rep.visible_mask.sum() == 8


def test_top_object_is_unoccluded(stacked_pair):
    assert occluded_rate(stacked_pair, 1) == 0.0
    assert occlusion_report(stacked_pair, 1).o_b == 0


def test_any_overlap_border_counts_objects_below():
    scene = add_object(empty_scene(32), DEFAULT_SHAPES[0], Pose(8.0, 8.0))
    scene = add_object(scene, DEFAULT_SHAPES[0], Pose(16.0, 16.0))
    assert occlusion_report(scene, 1).o_b == 0
    assert occlusion_report(scene, 1, border_any_overlap=True).o_b == 16


def test_border_strip_is_chebyshev_ring():
    mask = np.zeros((30, 30), dtype=bool)
    mask[14, 14] = True
    ring = border_strip(mask, radius=3)
    assert ring.sum() == 7 * 7 - 1
    assert not ring[14, 14]
    assert ring[11, 11] and not ring[10, 14]


def test_dead_target_raises(stacked_pair):
    gone = remove_object(stacked_pair, 0)
    for fn in (render, occlusion_report, occluded_rate):
        with pytest.raises(KeyError):
            fn(gone, 0)


def test_most_occluded_target_ties_and_empty(stacked_pair):
    assert most_occluded_target(stacked_pair, [0, 1]) == 0
    scene = add_object(empty_scene(32), DEFAULT_SHAPES[0], Pose(8.0, 8.0))
    scene = add_object(scene, DEFAULT_SHAPES[0], Pose(24.0, 24.0))
    assert most_occluded_target(scene, [1, 0]) == 0
    with pytest.raises(ValueError):
        most_occluded_target(scene, [])


def test_render_channels(stacked_pair):
    stack = render(stacked_pair, 0)
    assert stack.depth.max() == 2
    assert stack.depth.sum() == 16 + 32
    assert np.array_equal(stack.amodal, stacked_pair.footprint(0))
    # color shows the topmost object
    assert tuple(stack.color[14, 16]) == tuple(stack.color[12, 16]) != (0, 0, 0)
    x = stack.as_input()
    assert x.shape == (5, 32, 32) and x.dtype == np.float32
    assert x[:3].max() <= 1.0


def test_dump_stack_round_trip(tmp_path, stacked_pair):
    stack = render(stacked_pair, 0)
    paths = dump_stack(stack, tmp_path, 3, 7)
    assert [p.name for p in paths] == ["3_7_color.ppm", "3_7_depth.pgm", "3_7_amodal.pgm"]
    assert np.array_equal(read_pnm(paths[0]), stack.color)
    assert np.array_equal(read_pnm(paths[1]), (stack.depth * 32).astype(np.uint8))
    assert np.array_equal(read_pnm(paths[2]) > 0, stack.amodal)


@settings(max_examples=15, deadline=None)
@given(seed=seeds, n=st.integers(2, 20), any_overlap=st.booleans())
def test_report_matches_brute_force_recount(seed, n, any_overlap):
    scene = random_scene(seed, n, size=40)
    target = scene.ids[seed % n]
    rep = occlusion_report(scene, target, border_any_overlap=any_overlap)
    ref = oracles.occlusion_counts(scene, target, any_overlap=any_overlap)
    assert np.array_equal(rep.full_mask, ref["full"])
    assert np.array_equal(rep.visible_mask, ref["visible"])
    assert np.array_equal(rep.border_mask, ref["border"])
    assert (rep.o_b, rep.t_b, rep.t_m) == (ref["o_b"], ref["t_b"], ref["t_m"])
    assert rep.o == ref["o"] and rep.a_b == ref["a_b"] and rep.a_n == ref["a_n"]


@settings(max_examples=200, deadline=None)
@given(seed=seeds, n=st.integers(1, 25))
def test_visible_within_full_and_rate_in_unit_interval(seed, n):
    scene = random_scene(seed, n)
    for obj_id in scene.ids:
        rep = occlusion_report(scene, obj_id)
        assert not (rep.visible_mask & ~rep.full_mask).any()
        assert 0.0 <= rep.o <= 1.0
        assert 0.0 <= rep.a_b <= 1.0
