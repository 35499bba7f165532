import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from blink.behavior_analysis import (
    MODE_LABELS,
    analyze,
    group_by_track,
    kmeans_modes,
    name_clusters,
    plot_embedding,
    plot_transitions,
    purity,
    standardize_pca,
    transition_matrix,
    window_embed,
)
from blink.rssm import ModelConfig, WorldModel
from blink.synthetic_world import SimConfig, generate_episode


def test_window_count():
    f = np.zeros((90, 4))
    ws = window_embed(f, np.zeros((90, 2)), np.zeros(90), length=30, stride=30)
    assert len(ws) == 3
    assert [w.window_index for w in ws] == [0, 1, 2]
    assert len(window_embed(f[:29], np.zeros((29, 2)), np.zeros(29))) == 0


def test_window_summaries():
    T = 60
    f = np.arange(T, dtype=float)[:, None] * np.array([[1.0, 2.0]])
    a = np.tile([3.0, 4.0], (T, 1))
    y = np.r_[np.zeros(10), np.ones(30), 2 * np.ones(20)]
    ws = window_embed(f, a, y, length=30, stride=30, modes=np.r_[np.zeros(20), np.ones(40)].astype(int))
    w0, w1 = ws
    assert np.allclose(w0.feature, [14.5, 29.0, 1.0, 2.0])
    assert w0.window_outcome == 1.0 and w1.window_outcome == 1.0
    assert w0.window_speed == pytest.approx(5.0)
    assert w0.true_mode == 0 and w1.true_mode == 1
    last_first = window_embed(f, a, y, change="last_first")[0]
    assert np.allclose(last_first.feature[2:], [29.0, 58.0])
    with pytest.raises(ValueError):
        window_embed(f, a, y, change="bogus")


def test_ramp_change_detected():
    f = np.zeros((30, 3))
    f[:, 1] = np.linspace(0, 1, 30)
    w = window_embed(f, np.zeros((30, 2)), np.zeros(30))[0]
    assert np.argmax(np.abs(w.feature[3:])) == 1


def test_pca_rank_and_warning():
    rng = np.random.default_rng(0)
    X = np.c_[rng.normal(size=(200, 3)) @ rng.normal(size=(3, 8)), np.ones(200)]
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        reduced, tf = standardize_pca(X)
    assert reduced.shape[1] <= 3
    assert np.allclose(tf.transform(X), reduced)


def test_pca_too_few_samples():
    with pytest.raises(ValueError):
        standardize_pca(np.random.default_rng(0).normal(size=(3, 10)), n_components=5)


def test_kmeans_recovers_blobs():
    rng = np.random.default_rng(1)
    centers = np.array([[0, 0], [10, 0], [0, 10], [10, 10]], dtype=float)
    truth = rng.integers(0, 4, 400)
    X = centers[truth] + rng.normal(0, 0.5, (400, 2))
    m = kmeans_modes(X, np.zeros(400), np.zeros(400), seed=0)
    assert purity(m.labels, truth) == 1.0
    assert np.array_equal(m.predict(X), m.labels)
    assert m.fraction.sum() == pytest.approx(1.0)


def test_kmeans_needs_k_points():
    with pytest.raises(ValueError):
        kmeans_modes(np.zeros((3, 2)), np.zeros(3), np.zeros(3))


def test_name_clusters_rule():
    names = name_clusters([0.1, 0.6, 0.2, 0.05], [1.5, 5.6, 5.7, 1.4])
    assert names == {1: "HighCytotoxic", 2: "Motile", 0: "LowCytotoxic", 3: "Quiescent"}
    for perm in itertools.permutations(range(4)):
        out = np.array([0.56, 0.26, 0.13, 0.09])[list(perm)]
        spd = np.array([5.6, 5.67, 1.55, 1.44])[list(perm)]
        names = name_clusters(out, spd)
        assert [names[perm.index(i)] for i in range(4)] == list(MODE_LABELS)


def test_transition_counting():
    M, counts, empty = transition_matrix([[0, 1, 1, 2], [2, 0]], k=4)
    assert counts.sum() == 4
    assert counts[0, 1] == 1 and counts[1, 1] == 1 and counts[1, 2] == 1 and counts[2, 0] == 1
    assert np.all(M.sum(1) == 1.0)
    assert empty.tolist() == [False, False, False, True]
    assert np.all(M[3] == 0.25)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.lists(st.integers(0, 3), min_size=2, max_size=40), min_size=1, max_size=20))
def test_transition_rows_exactly_stochastic(seqs):
    M, counts, empty = transition_matrix(seqs)
    assert np.all(M.sum(1) == 1.0)
    assert np.all(M >= 0)
    rows = counts.sum(1)
    for i in np.flatnonzero(~empty):
        assert np.allclose(M[i], counts[i] / rows[i], rtol=0, atol=1e-15)


def test_transition_matrix_estimates_chain():
    P = SimConfig().transition
    rng = np.random.default_rng(0)
    seqs = []
    for _ in range(400):
        s = [int(rng.integers(4))]
        for _ in range(30):
            s.append(int(rng.choice(4, p=P[s[-1]])))
        seqs.append(s)
    M, counts, _ = transition_matrix(seqs)
    assert counts.sum() == 400 * 30
    assert np.abs(M - P).max() < 0.05


def test_purity_examples():
    assert purity([0, 0, 1, 1], [2, 2, 3, 3]) == 1.0
    assert purity([0, 0, 0, 0], [0, 1, 2, 3]) == 0.25
    assert purity([0, 0, 1, 1], [0, 1, 0, 1]) == 0.5


def test_group_by_track_orders_windows():
    from blink.behavior_analysis import WindowEmbedding

    ws = [WindowEmbedding("b", 1, None, 0, 0), WindowEmbedding("a", 0, None, 0, 0),
          WindowEmbedding("b", 0, None, 0, 0)]
    assert group_by_track(ws, [5, 6, 7]) == [[7, 5], [6]]


def test_analyze_end_to_end(tmp_path):
    cfg = SimConfig(obs_size=16, episode_len_range=(90, 120))
    eps = [generate_episode(cfg, s, f"e{s}") for s in range(8)]
    torch.manual_seed(0)
    model = WorldModel(ModelConfig(obs_shape=(3, 16, 16), cnn_depth=4, deter=8, hidden=8, stoch=2,
                                   classes=3, action_embed=2, head_hidden=4)).eval()
    res = analyze(model, eps[:6], eps[6:], seed=0)
    assert len(res.modes.labels) == len(res.train_windows)
    assert np.allclose(res.transition.sum(1), 1)
    assert sorted(res.modes.cluster_names.values()) == sorted(MODE_LABELS)
    plot_embedding(res, tmp_path / "e.png")
    plot_transitions(res.transition, tmp_path / "t.png")
    assert (tmp_path / "e.png").stat().st_size > 0 and (tmp_path / "t.png").stat().st_size > 0
