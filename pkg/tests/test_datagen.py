"""Dataset generation: determinism, physics consistency, and disk format."""

import numpy as np
import pytest
from PIL import Image

from pixphys import datagen, physics
from pixphys.datagen import (
    SceneConfig,
    load_dataset,
    render_ground_truth_frame,
    sample_actions,
    sample_initial_conditions,
    scene_preset,
    simulate_sequence,
    write_dataset,
)
from pixphys.physics import StateBatch, SystemKind, SystemSpec


def tiny(name: str, **overrides) -> SceneConfig:
    """Preset shrunk to a handful of sequences for fast disk round trips."""
    cfg = scene_preset(name)
    defaults = dict(counts=(3, 2, 2), seed=7)
    defaults.update(overrides)
    return datagen.replace(cfg, **defaults)


# --- presets ------------------------------------------------------------------

def test_preset_table():
    spring = scene_preset("spring2")
    assert spring.system.kind == SystemKind.SPRING
    assert spring.system.dt == 0.3
    assert spring.true_params == {"k": 4.0, "l": 6.0}
    assert (spring.size, spring.channels) == (32, 3)
    assert (spring.n_input, spring.n_pred, spring.n_ext) == (3, 7, 20)
    assert spring.seq_len == 30

    grav = scene_preset("gravity3-g")
    assert grav.system.kind == SystemKind.GRAVITY
    assert grav.system.n_objects == 3
    assert grav.system.dt == 0.5
    assert grav.true_params == {"g": 60.0, "m": 1.0}
    assert (grav.size, grav.n_input, grav.n_pred, grav.n_ext) == (36, 4, 12, 24)
    assert grav.seq_len == 40

    pend = scene_preset("pendulum")
    assert pend.system.kind == SystemKind.PENDULUM
    assert pend.system.actuated
    assert pend.system.dt == 0.05
    assert pend.true_params == {"g": 10.0, "a": 1.0}
    assert (pend.size, pend.channels) == (64, 1)
    assert pend.seq_len == 14

    bounce = scene_preset("bounce2")
    assert bounce.system.kind == SystemKind.BOUNCE
    assert bounce.system.bounds == (0.0, 32.0)

    assert scene_preset("gravity3-m").true_params == scene_preset("gravity3-g").true_params


def test_preset_desk_counts_only_change_counts():
    a, b = scene_preset("spring2"), scene_preset("spring2", desk=True)
    assert a.counts == (5000, 500, 500)
    assert b.counts == (1000, 200, 200)
    assert datagen.replace(a, counts=b.counts) == b


def test_unknown_preset_raises():
    with pytest.raises(ValueError):
        scene_preset("nope")


# --- initial conditions ---------------------------------------------------------

def test_ball_initial_conditions_respect_bounds_and_separation():
    cfg = scene_preset("bounce2")
    rng = np.random.default_rng(0)
    s = sample_initial_conditions(cfg, rng, count=64)
    p = s.p.data
    assert p.shape == (64, 2, 2)
    assert (p >= 0.2 * 32).all() and (p <= 0.8 * 32).all()
    gaps = np.linalg.norm(p[:, 0] - p[:, 1], axis=-1)
    assert (gaps >= 6.0).all()
    assert (np.abs(s.v.data) <= 2.0).all()


def test_pendulum_initial_conditions_ranges():
    cfg = scene_preset("pendulum")
    s = sample_initial_conditions(cfg, np.random.default_rng(1), count=256)
    assert s.p.shape == (256, 1, 1)
    assert (np.abs(s.p.data) <= np.pi).all()
    assert (np.abs(s.v.data) <= 6.0).all()
    # spread should cover the range, not cluster
    assert s.v.data.std() > 2.0


def test_gravity_rejection_keeps_orbits_in_frame_and_apart():
    cfg = scene_preset("gravity3-g")
    rng = np.random.default_rng(3)
    s = sample_initial_conditions(cfg, rng, count=8)
    p, _, _ = simulate_sequence(cfg, s)
    assert (p >= 0.0).all() and (p <= cfg.size).all()
    d = np.linalg.norm(p[:, :, :, None] - p[:, :, None, :], axis=-1)
    d[:, :, np.arange(3), np.arange(3)] = np.inf
    assert d.min() >= 3.0


def test_spring_rejection_keeps_objects_in_frame():
    cfg = scene_preset("spring2")
    s = sample_initial_conditions(cfg, np.random.default_rng(4), count=8)
    p, _, _ = simulate_sequence(cfg, s)
    assert (p >= 0.0).all() and (p <= cfg.size).all()


def test_rejection_budget_exhaustion_raises():
    # an impossible frame: balls must sit in [0.2H, 0.8H] with H so small that
    # the 6 px separation constraint cannot ever be met, and trajectories exit
    cfg = datagen.replace(
        scene_preset("gravity3-g"), size=10, counts=(1, 1, 1)
    )
    old_rounds = datagen.REJECTION_ROUNDS
    datagen.REJECTION_ROUNDS = 3
    try:
        with pytest.raises(RuntimeError, match="rejection"):
            sample_initial_conditions(cfg, np.random.default_rng(0), count=4)
    finally:
        datagen.REJECTION_ROUNDS = old_rounds


# --- simulation -----------------------------------------------------------------

def test_simulated_states_match_direct_rollout():
    cfg = scene_preset("spring2")
    s = sample_initial_conditions(cfg, np.random.default_rng(5), count=2)
    p, v, _ = simulate_sequence(cfg, s)
    assert p.shape == (30, 2, 2, 2)
    states = physics.rollout(cfg.system, s, cfg.params(), cfg.seq_len - 1, dist_floor=0.0)
    np.testing.assert_array_equal(p[-1], states[-1].p.data)
    np.testing.assert_array_equal(v[-1], states[-1].v.data)


def test_resimulating_from_midpoint_reproduces_tail_exactly():
    cfg = scene_preset("gravity3-g")
    s = sample_initial_conditions(cfg, np.random.default_rng(6), count=1)
    p, v, _ = simulate_sequence(cfg, s)
    mid = StateBatch.from_arrays(p[5], v[5])
    states = physics.rollout(cfg.system, mid, cfg.params(), cfg.seq_len - 1 - 5,
                             dist_floor=0.0)
    for t, st in enumerate(states, start=6):
        np.testing.assert_array_equal(st.p.data, p[t])
        np.testing.assert_array_equal(st.v.data, v[t])


def test_pendulum_simulation_consumes_actions():
    cfg = scene_preset("pendulum")
    rng = np.random.default_rng(7)
    s = sample_initial_conditions(cfg, rng, count=4)
    u = sample_actions(cfg, rng, 4)
    assert u.shape == (13, 4)
    assert (np.abs(u) <= 2.0).all()
    p_act, _, _ = simulate_sequence(cfg, s, u)
    p_idle, _, _ = simulate_sequence(cfg, s, np.zeros_like(u))
    assert np.abs(p_act - p_idle).max() > 1e-3


# --- rendering ------------------------------------------------------------------

def test_disc_center_pixel_is_pure_object_color():
    cfg = scene_preset("spring2")
    frame = render_ground_truth_frame(cfg, np.array([[10.0, 20.0], [24.0, 8.0]]))
    assert frame.shape == (32, 32, 3)
    np.testing.assert_allclose(frame[20, 10], [1.0, 0.0, 0.0])  # row=y, col=x
    np.testing.assert_allclose(frame[8, 24], [0.0, 1.0, 0.0])
    np.testing.assert_allclose(frame[0, 0], [0.0, 0.0, 0.0])


def test_disc_edge_is_antialiased():
    cfg = scene_preset("spring2")
    frame = render_ground_truth_frame(cfg, np.array([[16.0, 16.0], [5.0, 5.0]]))
    ring = frame[16, 16 + 3, 0]  # 3 px from center: partial coverage
    assert 0.0 < ring < 1.0 or frame[16, 16 + 4, 0] in (0.0,)
    # interior fully covered, 5 px away fully background
    assert frame[16, 16 + 2, 0] == 1.0
    assert frame[16, 16 + 5, 0] == 0.0


def test_pendulum_frame_angle_periodicity_and_direction():
    cfg = scene_preset("pendulum")
    up = render_ground_truth_frame(cfg, np.array([[0.0]]))
    assert up.shape == (64, 64, 1)
    # theta = 0 points straight up from the center (decreasing row index)
    assert up[32 - 10, 32, 0] == 1.0
    assert up[32 + 10, 32, 0] == 0.0
    left = render_ground_truth_frame(cfg, np.array([[np.pi / 2]]))
    assert left[32, 32 - 10, 0] == 1.0
    pos = render_ground_truth_frame(cfg, np.array([[np.pi]]))
    neg = render_ground_truth_frame(cfg, np.array([[-np.pi]]))
    np.testing.assert_allclose(pos, neg, atol=1e-12)
    np.testing.assert_array_equal(datagen._quantize(pos), datagen._quantize(neg))


def test_rod_length_and_width():
    cfg = scene_preset("pendulum")
    up = render_ground_truth_frame(cfg, np.array([[0.0]]))
    assert up[32 - 19, 32, 0] == 1.0    # inside the 20 px rod
    assert up[32 - 24, 32, 0] == 0.0    # beyond tip
    assert up[32 - 10, 32 + 1, 0] == 1.0  # 4 px wide: +/- 1 px fully covered
    assert up[32 - 10, 32 + 4, 0] == 0.0


def test_sprite_mode_composites_over_background(tmp_path):
    rng = np.random.default_rng(11)
    bg = (rng.uniform(0.1, 0.9, (64, 64, 3)) * 255).astype(np.uint8)
    Image.fromarray(bg).save(tmp_path / "background.png")
    for i, col in enumerate([(255, 0, 0, 255), (0, 0, 255, 255)]):
        sp = np.zeros((9, 9, 4), dtype=np.uint8)
        sp[2:7, 2:7] = col
        Image.fromarray(sp).save(tmp_path / f"sprite_{i}.png")
    cfg = tiny("digits2", sprite_dir=str(tmp_path))
    frame = render_ground_truth_frame(cfg, np.array([[20.0, 20.0], [44.0, 44.0]]))
    np.testing.assert_allclose(frame[20, 20], [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(frame[44, 44], [0.0, 0.0, 1.0], atol=1e-12)
    # untouched corner shows the background
    np.testing.assert_allclose(frame[0, 0], bg[0, 0] / 255.0, atol=1e-12)


def test_sprite_mode_missing_files_raise(tmp_path):
    cfg = tiny("digits2", sprite_dir=str(tmp_path))
    with pytest.raises(FileNotFoundError):
        render_ground_truth_frame(cfg, np.zeros((2, 2)))


# --- disk format ----------------------------------------------------------------

@pytest.fixture(scope="module")
def spring_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "spring2"
    cfg = SceneConfig(
        name="spring2",
        system=SystemSpec(SystemKind.SPRING, n_objects=2, dim=2, dt=0.3),
        true_params={"k": 4.0, "l": 6.0},
        size=32, channels=3, n_input=3, n_pred=7, n_ext=20,
        counts=(3, 2, 2), seed=7,
    )
    manifest = write_dataset(cfg, out)
    return cfg, out, manifest


def test_manifest_contents(spring_dataset):
    cfg, out, manifest = spring_dataset
    assert manifest["version"] == "pixphys-dataset/1"
    assert manifest["splits"] == {"train": 3, "val": 2, "test": 2}
    assert manifest["true_params"] == {"k": 4.0, "l": 6.0}
    assert manifest["seq_len"] == 30
    assert (out / "manifest.json").exists()
    assert (out / "train" / "seq_00000" / "frame_000.png").exists()
    assert (out / "train" / "seq_00002" / "frame_029.png").exists()
    assert (out / "val" / "seq_00001" / "states.csv").exists()


def test_loaded_frames_match_written_pngs(spring_dataset):
    _, out, _ = spring_dataset
    ds = load_dataset(out)
    frames = ds.frames("train", 0)
    assert frames.shape == (30, 32, 32, 3)
    assert frames.dtype == np.uint8
    direct = np.asarray(Image.open(out / "train" / "seq_00000" / "frame_011.png"))
    np.testing.assert_array_equal(frames[11], direct)


def test_stored_states_replay_through_rollout_exactly(spring_dataset):
    cfg, out, _ = spring_dataset
    ds = load_dataset(out)
    p, v = ds.states("train", 1)
    start = StateBatch.from_arrays(p[None, 0], v[None, 0])
    states = physics.rollout(cfg.system, start, cfg.params(), cfg.seq_len - 1,
                             dist_floor=0.0)
    for t, st in enumerate(states, start=1):
        np.testing.assert_array_equal(st.p.data[0], p[t])
        np.testing.assert_array_equal(st.v.data[0], v[t])


def test_stored_frames_match_states_rerender(spring_dataset):
    cfg, out, _ = spring_dataset
    ds = load_dataset(out)
    p, _ = ds.states("test", 0)
    frames = ds.frames("test", 0)
    for t in (0, 15, 29):
        redrawn = datagen._quantize(render_ground_truth_frame(cfg, p[t]))
        np.testing.assert_array_equal(frames[t], redrawn)


def test_regeneration_is_bit_identical(spring_dataset, tmp_path):
    cfg, out, _ = spring_dataset
    write_dataset(cfg, tmp_path / "again")
    a = (out / "train" / "seq_00002" / "frame_017.png").read_bytes()
    b = (tmp_path / "again" / "train" / "seq_00002" / "frame_017.png").read_bytes()
    assert a == b
    sa = (out / "val" / "seq_00000" / "states.csv").read_text()
    sb = (tmp_path / "again" / "val" / "seq_00000" / "states.csv").read_text()
    assert sa == sb


def test_different_seed_changes_data(spring_dataset, tmp_path):
    cfg, out, _ = spring_dataset
    write_dataset(datagen.replace(cfg, seed=8), tmp_path / "other")
    a = (out / "train" / "seq_00000" / "states.csv").read_text()
    b = (tmp_path / "other" / "train" / "seq_00000" / "states.csv").read_text()
    assert a != b


def test_well_posedness_spring_constant_moves_pixels(spring_dataset):
    """A 20% change in the spring constant must visibly change the video."""
    cfg, _, _ = spring_dataset
    rng = np.random.default_rng(13)
    s = sample_initial_conditions(cfg, rng, count=4)
    p_true, _, _ = simulate_sequence(cfg, s)
    bent = datagen.replace(cfg, true_params={"k": 4.0 * 1.2, "l": 6.0})
    p_bent, _, _ = simulate_sequence(bent, s)
    diffs = []
    for i in range(4):
        for t in range(cfg.seq_len):
            fa = render_ground_truth_frame(cfg, p_true[t, i])
            fb = render_ground_truth_frame(cfg, p_bent[t, i])
            diffs.append(np.mean((fa - fb) ** 2))
    assert np.mean(diffs) > 1e-3


def test_version_mismatch_rejected(spring_dataset, tmp_path):
    cfg, out, manifest = spring_dataset
    import json
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(out, bad)
    wrong = dict(manifest, version="pixphys-dataset/999")
    (bad / "manifest.json").write_text(json.dumps(wrong))
    with pytest.raises(ValueError, match="version"):
        load_dataset(bad)


def test_count_mismatch_rejected(spring_dataset, tmp_path):
    _, out, _ = spring_dataset
    import shutil
    bad = tmp_path / "bad_counts"
    shutil.copytree(out, bad)
    shutil.rmtree(bad / "train" / "seq_00002")
    with pytest.raises(ValueError, match="train"):
        load_dataset(bad)


def test_train_view_exposes_frames_but_never_states(spring_dataset):
    _, out, _ = spring_dataset
    view = load_dataset(out).train_view("train")
    assert len(view) == 3
    frames, acts = view.batch([0, 2])
    assert frames.shape == (2, 30, 32, 32, 3)
    assert frames.dtype == np.float32
    assert frames.min() >= 0.0 and frames.max() <= 1.0
    assert acts is None
    assert not hasattr(view, "states")


def test_pendulum_dataset_round_trip(tmp_path):
    cfg = tiny("pendulum", counts=(2, 1, 1))
    write_dataset(cfg, tmp_path / "pend")
    ds = load_dataset(tmp_path / "pend")
    frames = ds.frames("train", 0)
    assert frames.shape == (14, 64, 64, 1)
    u = ds.actions("train", 1)
    assert u.shape == (13,)
    view = ds.train_view("train")
    fr, acts = view.batch([0, 1])
    assert fr.shape == (2, 14, 64, 64, 1)
    assert acts.shape == (2, 13)
    # frames re-render from states + the actions actually recorded
    p, v = ds.states("train", 0)
    u0 = ds.actions("train", 0)
    start = StateBatch.from_arrays(p[None, 0], v[None, 0])
    states = physics.rollout(cfg.system, start, cfg.params(), 13,
                             actions=u0[:, None], dist_floor=0.0)
    np.testing.assert_array_equal(states[-1].p.data[0], p[-1])
