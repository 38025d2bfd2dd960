"""Head and torso field tests: activation ranges, audio paths, gradients."""

import numpy as np
import pytest

from radfield import autodiff as ad
from radfield import gradcheck as gc
from radfield.autodiff import Tensor
from radfield.grid import corner_fetch_count
from radfield.head import HeadModel, eye_feature_from_landmarks
from radfield.torso import TorsoModel, pose_code


def head(audio_dim=2, dtype=np.float32, seed=0, **kw):
    kw.setdefault("levels", 4)
    kw.setdefault("max_resolution", 64)
    return HeadModel(num_frames=6, audio_dim=audio_dim, dtype=dtype,
                     rng=np.random.default_rng(seed), **kw)


def torso(dtype=np.float32, seed=0):
    return TorsoModel(num_frames=6, levels=4, max_resolution=64, dtype=dtype,
                      rng=np.random.default_rng(seed))


def query_inputs(m, n=32, seed=3):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3)).astype(m.dtype)
    a = Tensor(rng.normal(size=(n, 64)).astype(m.dtype))
    e = Tensor(rng.uniform(0, 0.005, size=(n, 1)).astype(m.dtype))
    emb = m.embedding_rows(rng.integers(0, m.num_frames, size=n))
    return x, a, e, emb


# ---------------------------------------------------------------------- head


def test_audio_coordinate_zero_weights_is_half():
    m = head()
    for i in range(3):
        m.params[f"head.audio_mlp.{i}.w"].data[:] = 0.0
    a = Tensor(np.random.default_rng(1).normal(size=(4, 64)).astype(np.float32))
    f = Tensor(np.random.default_rng(2).normal(
        size=(4, m.spatial.output_dim)).astype(np.float32))
    np.testing.assert_allclose(m.audio_coordinate(a, f).data, 0.5)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_audio_coordinate_dimension(d):
    m = head(audio_dim=d)
    a = Tensor(np.zeros((3, 64), dtype=np.float32))
    f = Tensor(np.zeros((3, m.spatial.output_dim), dtype=np.float32))
    out = m.audio_coordinate(a, f)
    assert out.data.shape == (3, d)
    assert ((out.data >= 0) & (out.data <= 1)).all()


def test_audio_coordinate_grads_reach_both_inputs():
    m = head(dtype=np.float64)
    a = Tensor(np.random.default_rng(1).normal(size=(4, 64)), requires_grad=True)
    f = Tensor(np.random.default_rng(2).normal(size=(4, m.spatial.output_dim)),
               requires_grad=True)
    ad.tsum(m.audio_coordinate(a, f)).backward()
    assert np.abs(a.grad).max() > 0
    assert np.abs(f.grad).max() > 0


def test_query_activation_ranges():
    m = head()
    sigma, rgb, xa = m.query(*query_inputs(m))
    assert (sigma.data >= 0).all()
    assert ((rgb.data >= 0) & (rgb.data <= 1)).all()
    assert ((xa.data >= 0) & (xa.data <= 1)).all()
    assert sigma.data.shape == (32, 1) and rgb.data.shape == (32, 3)
    assert xa.data.shape == (32, 2)


def test_audio_changes_density_statistically():
    m = head(seed=5)
    rng = np.random.default_rng(6)
    n = 1000
    x = rng.random((n, 3)).astype(np.float32)
    e = Tensor(np.zeros((n, 1), dtype=np.float32))
    emb = m.embedding_rows(np.zeros(n, dtype=np.int64))
    a1 = Tensor(rng.normal(size=(n, 64)).astype(np.float32))
    a2 = Tensor(rng.normal(size=(n, 64)).astype(np.float32))
    with ad.no_grad():
        s1, _, _ = m.query(x, a1, e, emb, want_color=False)
        s2, _, _ = m.query(x, a2, e, emb, want_color=False)
    assert np.abs(s1.data - s2.data).mean() > 0


def test_zero_audio_tables_blocks_audio_path():
    m = head(seed=7)
    m.audio_grid.tables.data[:] = 0.0
    rng = np.random.default_rng(8)
    n = 64
    x = rng.random((n, 3)).astype(np.float32)
    e = Tensor(np.zeros((n, 1), dtype=np.float32))
    emb = m.embedding_rows(np.zeros(n, dtype=np.int64))
    with ad.no_grad():
        s1, c1, _ = m.query(x, Tensor(rng.normal(size=(n, 64)).astype(np.float32)),
                            e, emb)
        s2, c2, _ = m.query(x, Tensor(rng.normal(size=(n, 64)).astype(np.float32)),
                            e, emb)
    np.testing.assert_array_equal(s1.data, s2.data)
    np.testing.assert_array_equal(c1.data, c2.data)


def test_decomposed_fetch_cost():
    for d, want in ((2, 12), (1, 10), (3, 16)):
        m = head(audio_dim=d)
        rng = np.random.default_rng(9)
        pts = rng.random((21, 3)).astype(np.float32)
        aud = rng.random((21, d)).astype(np.float32)
        got = corner_fetch_count((m.spatial, m.audio_grid), (pts, aud))
        assert got == want


def test_head_parameter_group_grads_match_fd():
    m = head(dtype=np.float64, seed=11)
    rng = np.random.default_rng(12)
    n = 8
    x = (rng.integers(0, 16, size=(n, 3)) + rng.uniform(0.3, 0.7, (n, 3))) / 16.0
    a_np = rng.normal(size=(n, 64))
    e_np = rng.uniform(0, 0.005, size=(n, 1))
    frames = rng.integers(0, m.num_frames, size=n)
    proj_s = rng.normal(size=(n, 1))
    proj_c = rng.normal(size=(n, 3))

    def forward():
        sigma, rgb, _ = m.query(x, Tensor(a_np), Tensor(e_np),
                                m.embedding_rows(frames))
        return ad.tsum(sigma * Tensor(proj_s)) + ad.tsum(rgb * Tensor(proj_c))

    groups = ["head.spatial.tables", "head.audio_grid.tables",
              "head.audio_mlp.0.w", "head.density_mlp.0.w",
              "head.color_mlp.0.w", "head.embed"]
    results = gc.check_params(forward, m.parameters(), groups, rng)
    for name, res in results.items():
        assert res.cases >= 3, (name, "too few clean probes")
        assert res.passed, (name, res.max_rel_error)


def test_embedding_rows_clamp_to_training_range():
    m = head()
    rows = m.embedding_rows(np.array([0, 99]))
    np.testing.assert_array_equal(rows.data[1], m.params["head.embed"].data[-1])


# ----------------------------------------------------------------------- eye


def test_eye_feature_unit_square():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=np.float64)
    assert eye_feature_from_landmarks([sq], 200.0) == pytest.approx(0.005)


def test_eye_feature_collinear_is_zero():
    line = np.array([[0, 0], [1, 1], [2, 2]], dtype=np.float64)
    assert eye_feature_from_landmarks([line], 100.0) == 0.0


def test_eye_feature_two_eyes_sum():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=np.float64)
    assert eye_feature_from_landmarks([sq, sq + 5], 1000.0) == pytest.approx(0.002)


def test_eye_feature_degenerate_raises():
    with pytest.raises(ValueError):
        eye_feature_from_landmarks([np.array([[0, 0], [1, 1]])], 100.0)


def test_eye_feature_clamps_at_one_percent():
    sq = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], dtype=np.float64)
    assert eye_feature_from_landmarks([sq], 200.0) == 0.01


# --------------------------------------------------------------------- torso


def test_pose_code_layout():
    r = np.arange(9, dtype=np.float32).reshape(3, 3)
    t = np.array([9.0, 10.0, 11.0], dtype=np.float32)
    np.testing.assert_array_equal(pose_code(r, t), np.arange(12, dtype=np.float32))
    with pytest.raises(ValueError):
        pose_code(np.eye(2), t)


def test_torso_zero_deformation_at_init():
    m = torso()
    n = 50
    rng = np.random.default_rng(1)
    x = rng.random((n, 2)).astype(np.float32)
    pose = Tensor(rng.normal(size=(n, 12)).astype(np.float32))
    emb = m.embedding_rows(np.zeros(n, dtype=np.int64))
    _, _, delta = m.query(x, pose, emb)
    np.testing.assert_array_equal(delta.data, 0.0)


def test_torso_output_ranges():
    m = torso()
    m.params["torso.deform_mlp.2.w"].data[:] = \
        np.random.default_rng(2).normal(0, 0.1, size=(64, 2))
    n = 40
    rng = np.random.default_rng(3)
    rgb, alpha, delta = m.query(
        rng.random((n, 2)).astype(np.float32),
        Tensor(rng.normal(size=(n, 12)).astype(np.float32)),
        m.embedding_rows(np.zeros(n, dtype=np.int64)))
    assert ((rgb.data >= 0) & (rgb.data <= 1)).all()
    assert ((alpha.data >= 0) & (alpha.data <= 1)).all()
    assert np.isfinite(delta.data).all()


def test_torso_render_one_eval_per_pixel():
    m = torso()
    m.eval_count = 0
    img = m.render(np.eye(3), np.zeros(3), frame=0, height=12, width=17)
    assert img.shape == (12, 17, 4)
    assert m.eval_count == 12 * 17


def test_torso_grad_reaches_deform_weights_through_encoder():
    # the only path from deform weights to the loss runs through the
    # encoder's coordinate gradient
    m = torso(dtype=np.float64)
    rng = np.random.default_rng(4)
    m.grid.tables.data[:] = rng.normal(0, 0.5, size=m.grid.tables.data.shape)
    n = 16
    x = rng.random((n, 2))
    pose = Tensor(rng.normal(size=(n, 12)))
    emb = m.embedding_rows(np.zeros(n, dtype=np.int64))
    rgb, alpha, _ = m.query(x, pose, emb)
    ad.tsum(rgb * rgb) .backward()
    g = m.params["torso.deform_mlp.2.w"].grad
    assert g is not None and np.abs(g).max() > 0


def test_torso_deform_grads_match_fd():
    m = torso(dtype=np.float64)
    rng = np.random.default_rng(5)
    m.grid.tables.data[:] = rng.normal(0, 0.5, size=m.grid.tables.data.shape)
    # move off the zero-deformation kink-free init before differencing
    m.params["torso.deform_mlp.2.w"].data[:] = rng.normal(0, 0.05, size=(64, 2))
    n = 12
    cells = rng.integers(0, 16, size=(n, 2))
    x = (cells + rng.uniform(0.35, 0.65, (n, 2))) / 16.0
    pose_np = rng.normal(size=(n, 12))
    proj = rng.normal(size=(n, 3))

    def forward():
        rgb, alpha, _ = m.query(x, Tensor(pose_np),
                                m.embedding_rows(np.zeros(n, dtype=np.int64)))
        return ad.tsum(rgb * Tensor(proj)) + ad.tsum(alpha)

    results = gc.check_params(forward, m.parameters(),
                              ["torso.deform_mlp.2.w", "torso.mlp.0.w",
                               "torso.grid.tables", "torso.embed"],
                              rng, probes=8)
    for name, res in results.items():
        assert res.cases >= 3, (name, "too few clean probes")
        assert res.passed, (name, res.max_rel_error)
