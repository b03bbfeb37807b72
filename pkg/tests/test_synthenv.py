import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpla import synthenv
from gpla.errors import ConfigError
from gpla.synthenv import ActionChunk, AugmentConfig, AugmentPlan, Observation, Sample


@pytest.fixture(scope="module")
def episodes():
    return synthenv.generate_dataset(10, seed=11)


def _sample(rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    chunk = rng.uniform(-0.05, 0.05, size=(8, 2)).astype(np.float32)
    return Sample(Observation(img, np.zeros(2, np.float32)), "put all the blocks in the center of the board",
                  "push the red star towards the center", ActionChunk(chunk), 0, 0)


# ---------------------------------------------------------------------------
# generation


def test_corner_gather_seed7_converges_to_corner():
    ep = synthenv.generate_episode(7, "corner_gather")
    final = ep.frames[-1].positions()
    dist = np.linalg.norm(final - np.array([-1.0, -1.0]), axis=1)
    assert dist.max() < 0.35


def test_generation_is_bit_exact_for_a_seed():
    a = synthenv.generate_episode(3, "line_vertical")
    b = synthenv.generate_episode(3, "line_vertical")
    assert np.array_equal(a.actions, b.actions)
    assert [s.low_level for s in a.segments] == [s.low_level for s in b.segments]
    assert a.frames == b.frames


def test_unknown_family_is_a_config_error():
    with pytest.raises(ConfigError):
        synthenv.generate_episode(0, "spiral")


def test_high_level_phrasings(episodes):
    assert {ep.high_level for ep in episodes} == set(synthenv.TASK_FAMILIES.values())
    assert "put all the blocks in a vertical line" in synthenv.TASK_FAMILIES.values()
    assert "make a 'parallelogram' shape out of all the blocks" in synthenv.TASK_FAMILIES.values()
    assert "put all the blocks in the bottom left corner" in synthenv.TASK_FAMILIES.values()


def test_segment_captions_name_blocks_on_the_board(episodes):
    for ep in episodes:
        for seg in ep.segments:
            present = {f"{b.color} {b.shape}" for b in ep.frames[seg.start].blocks}
            words = seg.low_level.split()
            assert f"{words[2]} {words[3]}" in present, seg.low_level
            if words[0] == "move":
                assert f"{words[-2]} {words[-1]}" in present


def test_segments_partition_actions(episodes):
    for ep in episodes:
        bounds = [(s.start, s.end) for s in ep.segments]
        assert bounds[0][0] == 0 and bounds[-1][1] == len(ep.actions)
        for (_, e), (s, _) in zip(bounds, bounds[1:]):
            assert e == s


def test_board_invariants(episodes):
    r = synthenv.BLOCK_RADIUS
    for ep in episodes:
        for frame in ep.frames[:: max(1, len(ep.frames) // 10)]:
            pos = frame.positions()
            assert 4 <= len(pos) <= 8
            assert np.all(np.abs(pos) <= 1.0) and np.all(np.abs(frame.effector) <= 1.0)
            pairs = {(b.shape, b.color) for b in frame.blocks}
            assert len(pairs) == len(frame.blocks)
            d = np.linalg.norm(pos[:, None] - pos[None], axis=-1) + np.eye(len(pos)) * 10
            assert d.min() > 2 * r - 1e-6


def test_actions_respect_delta_max(episodes):
    for ep in episodes:
        assert np.abs(ep.actions).max() <= synthenv.DELTA_MAX + 1e-9


def test_render_is_in_range_and_deterministic(episodes):
    f = episodes[0].frames[0]
    a, b = synthenv.render(f), synthenv.render(f)
    assert a.dtype == np.uint8 and a.shape == (64, 64, 3)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# idle filter


def _actions_with_window_total(total):
    acts = np.zeros((8, 2))
    acts[0] = total
    return acts


def test_zero_window_dropped():
    assert len(synthenv.idle_windows(np.zeros((8, 2)), 0.1)) == 0


def test_window_over_threshold_in_one_dimension_kept():
    assert list(synthenv.idle_windows(_actions_with_window_total((0.11, 0.0)), 0.1)) == [0]


def test_window_under_threshold_in_both_dimensions_dropped():
    assert len(synthenv.idle_windows(_actions_with_window_total((0.05, 0.05)), 0.1)) == 0


def test_absolute_displacements_are_summed():
    acts = np.zeros((8, 2))
    acts[:4, 0] = 0.03
    acts[4:, 0] = -0.03
    # net displacement is zero but the summed |delta| is 0.24
    assert list(synthenv.idle_windows(acts, 0.1)) == [0]


def test_short_episode_gives_no_windows():
    assert len(synthenv.idle_windows(np.ones((5, 2)), 0.1)) == 0


@given(st.lists(st.floats(-0.2, 0.2), min_size=16, max_size=80), st.floats(0.01, 0.5), st.floats(0.0, 0.5))
def test_idle_filter_monotone_in_threshold(flat, t1, dt):
    acts = np.asarray(flat[: len(flat) // 2 * 2]).reshape(-1, 2)
    lo = synthenv.idle_windows(acts, t1)
    hi = synthenv.idle_windows(acts, t1 + dt)
    assert set(hi) <= set(lo)


def test_filter_idle_samples_carry_segment_caption(episodes):
    ep = episodes[0]
    samples = synthenv.filter_idle(ep)
    assert samples
    for s in samples[:: max(1, len(samples) // 8)]:
        assert s.low_level == ep.segment_at(s.step).low_level
        assert s.chunk.deltas.shape == (8, 2)
        assert np.abs(s.chunk.deltas).sum(axis=0).max() > 0.1
        assert 0.0 <= s.observation.image.min() and s.observation.image.max() <= 1.0


# ---------------------------------------------------------------------------
# augmentation


def test_augment_identity_path(rng):
    s = _sample(rng)
    img, d = synthenv.apply_plan(s.observation.image, s.chunk.deltas, AugmentPlan(), rng)
    assert np.array_equal(img, s.observation.image)
    assert np.array_equal(d, s.chunk.deltas)


def test_action_noise_is_gaussian_and_clamped(rng):
    deltas = np.zeros((8, 2), np.float32)
    diffs = []
    for _ in range(400):
        _, d = synthenv.apply_plan(np.zeros((4, 4, 3), np.float32), deltas,
                                   AugmentPlan(action_noise=True), rng)
        diffs.append(d)
    diffs = np.asarray(diffs)
    assert abs(diffs.std() - 0.01) < 0.001
    edge = np.full((8, 2), 0.2, np.float32)
    _, d = synthenv.apply_plan(np.zeros((4, 4, 3), np.float32), edge, AugmentPlan(action_noise=True), rng)
    assert d.max() <= 0.2


def test_augmented_pixels_stay_in_unit_range(rng):
    s = _sample(rng)
    for _ in range(20):
        out = synthenv.augment(s, rng)
        assert 0.0 <= out.observation.image.min() and out.observation.image.max() <= 1.0
        assert out.low_level == s.low_level and out.high_level == s.high_level


def test_augmentation_frequencies_match_configured_probabilities():
    rng = np.random.default_rng(0)
    cfg = AugmentConfig()
    counts = {}
    n = 10_000
    for _ in range(n):
        for k, v in synthenv.draw_plan(rng, cfg).applied().items():
            counts[k] = counts.get(k, 0) + v
    expected = {"brightness": 0.5, "contrast": 0.5, "saturation": 0.5, "crop": 0.6,
                "vtranslate": 0.4, "htranslate": 0.4, "scale": 0.3, "action_noise": 0.7}
    for k, p in expected.items():
        assert abs(counts[k] / n - p) < 0.02, k


def test_augmentation_never_mirrors(rng):
    # a left-right gradient keeps its orientation under every geometric op
    img = np.tile(np.linspace(0, 1, 64, dtype=np.float32)[None, :, None], (64, 1, 3))
    for _ in range(30):
        plan = synthenv.draw_plan(rng)
        plan.brightness = plan.contrast = plan.saturation = None
        out, _ = synthenv.apply_plan(img, np.zeros((8, 2), np.float32), plan, rng)
        assert out[:, -8:].mean() > out[:, :8].mean()


# ---------------------------------------------------------------------------
# splits and persistence


def test_split_counts_and_disjointness():
    eps = [synthenv.Episode(frames=[], actions=np.zeros((0, 2)), high_level="x", segments=[], seed=i,
                            task_family="line_vertical", episode_id=i) for i in range(100)]
    tr, va, te = synthenv.split_episodes(eps, (0.8, 0.1, 0.1), seed=0)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    ids = [{e.episode_id for e in part} for part in (tr, va, te)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    again = synthenv.split_episodes(eps, (0.8, 0.1, 0.1), seed=0)
    assert [e.episode_id for e in again[2]] == [e.episode_id for e in te]


def test_split_samples_never_share_episodes(episodes):
    tr, va, te = synthenv.split_dataset(episodes, (0.6, 0.2, 0.2), seed=1)
    assert not set(tr.episode_id) & set(te.episode_id)
    assert not set(tr.episode_id) & set(va.episode_id)


def test_too_few_episodes_for_split(episodes):
    with pytest.raises(ConfigError):
        synthenv.split_episodes(episodes[:2], (0.8, 0.1, 0.1))


def test_dataset_round_trip(tmp_path, episodes):
    synthenv.save_dataset(episodes[:3], tmp_path / "ds")
    back = synthenv.load_dataset(tmp_path / "ds")
    for a, b in zip(episodes[:3], back):
        assert np.array_equal(a.actions, b.actions)
        assert a.segments == b.segments and a.high_level == b.high_level
        assert np.array_equal(synthenv.render_episode(a), b.images)


def test_missing_dataset_names_producing_stage(tmp_path):
    with pytest.raises(FileNotFoundError, match="gen"):
        synthenv.load_dataset(tmp_path / "nothing")


def test_dataset_generation_is_deterministic():
    a = synthenv.SampleSet.from_episodes(synthenv.generate_dataset(3, seed=5))
    b = synthenv.SampleSet.from_episodes(synthenv.generate_dataset(3, seed=5))
    assert np.array_equal(a.images, b.images) and np.array_equal(a.chunks, b.chunks)
    assert a.low_level == b.low_level
