"""Behavioral modes from latent trajectories.

Per-frame latent features are summarized over non-overlapping windows (mean
and temporal change per dimension), standardized, reduced with PCA and
clustered with KMeans. Clusters are named by their window outcome and speed
profile, and mode sequences along each track give a transition matrix.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA

from blink.dataset import Episode

log = logging.getLogger(__name__)

MODE_LABELS = ("HighCytotoxic", "Motile", "LowCytotoxic", "Quiescent")


@dataclass
class WindowEmbedding:
    track_id: str
    window_index: int
    feature: np.ndarray
    window_outcome: float
    window_speed: float
    true_mode: int | None = None


def extract_latents(model, ep: Episode, max_len: int | None = None) -> np.ndarray:
    """(T, D) per-frame features: recurrent state and posterior probabilities."""
    import torch

    T = ep.T if max_len is None else min(ep.T, max_len)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    feats = model.latent_features(torch.from_numpy(ep.obs[:T]).to(dtype),
                                  torch.from_numpy(ep.actions[:T]).to(dtype))
    model.train(was_training)
    return feats.double().numpy()


def window_embed(features, actions, kills, length: int = 30, stride: int = 30,
                 change: str = "mean_diff", track_id: str = "", modes=None) -> list[WindowEmbedding]:
    """Summarize a feature sequence over windows.

    ``change`` is ``"mean_diff"`` (mean first difference) or ``"last_first"``
    (last minus first frame). Window outcome counts kills from the window's
    first to last frame; speed is the mean displacement norm.
    """
    f = np.asarray(features, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    y = np.asarray(kills, dtype=np.float64)
    out = []
    for w, s in enumerate(range(0, len(f) - length + 1, stride)):
        seg = f[s:s + length]
        if change == "mean_diff":
            delta = np.diff(seg, axis=0).mean(axis=0) if length > 1 else np.zeros(f.shape[1])
        elif change == "last_first":
            delta = seg[-1] - seg[0]
        else:
            raise ValueError(f"unknown change mode {change!r}")
        true_mode = None
        if modes is not None:
            true_mode = int(np.bincount(np.asarray(modes[s:s + length], dtype=np.int64), minlength=4).argmax())
        out.append(WindowEmbedding(
            track_id=track_id,
            window_index=w,
            feature=np.concatenate([seg.mean(axis=0), delta]),
            window_outcome=float(y[s + length - 1] - y[s]),
            window_speed=float(np.linalg.norm(a[s:s + length], axis=1).mean()),
            true_mode=true_mode,
        ))
    return out


def embed_episode(model, ep: Episode, length: int = 30, stride: int = 30, change: str = "mean_diff",
                  max_len: int | None = None) -> list[WindowEmbedding]:
    feats = extract_latents(model, ep, max_len)
    T = len(feats)
    return window_embed(feats, ep.actions[:T], ep.cum_kills[:T], length, stride, change,
                        track_id=ep.id, modes=None if ep.modes is None else ep.modes[:T])


@dataclass
class ReducedTransform:
    """Standardize with training statistics, drop constant columns, project on PCs."""

    mean: np.ndarray
    scale: np.ndarray
    keep: np.ndarray
    pca: PCA

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        Z = (X[:, self.keep] - self.mean) / self.scale
        return self.pca.transform(Z)

    def standardize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return (X[:, self.keep] - self.mean) / self.scale

    @property
    def components(self) -> np.ndarray:
        return self.pca.components_


def standardize_pca(X, n_components=None, variance: float = 0.95, max_components: int = 32,
                    seed: int = 0):
    """Fit z-scoring + PCA on training embeddings; returns (reduced, transform).

    Without ``n_components``, keeps enough components for ``variance`` of the
    total, capped at ``max_components``.
    """
    X = np.asarray(X, dtype=np.float64)
    std = X.std(axis=0)
    keep = std > 1e-12
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} zero-variance dimensions", RuntimeWarning)
    mean, scale = X[:, keep].mean(axis=0), std[keep]
    Z = (X[:, keep] - mean) / scale
    max_k = min(Z.shape[0], Z.shape[1])
    if n_components is None:
        full = PCA(svd_solver="full").fit(Z)
        k = int(np.searchsorted(np.cumsum(full.explained_variance_ratio_), variance) + 1)
        n_components = min(k, max_components, max_k)
    if n_components > max_k:
        raise ValueError(f"need at least {n_components} samples and dimensions, have {Z.shape}")
    pca = PCA(n_components=n_components, svd_solver="full", random_state=seed).fit(Z)
    tf = ReducedTransform(mean, scale, keep, pca)
    return tf.transform(X), tf


@dataclass
class ModeAssignment:
    labels: np.ndarray  # per-window cluster id
    cluster_names: dict  # cluster id -> mode label
    mean_outcome: np.ndarray
    mean_speed: np.ndarray
    fraction: np.ndarray
    centroids: np.ndarray
    kmeans: KMeans = field(repr=False, default=None)

    @property
    def cluster_to_mode(self) -> np.ndarray:
        """Cluster id -> index into MODE_LABELS."""
        return np.array([MODE_LABELS.index(self.cluster_names[c]) for c in range(len(self.centroids))])

    @property
    def mode_labels(self) -> np.ndarray:
        return self.cluster_to_mode[self.labels]

    def predict(self, reduced) -> np.ndarray:
        reduced = np.asarray(reduced, dtype=np.float64)
        if len(reduced) == 0:
            return np.zeros(0, dtype=np.int64)
        d = ((reduced[:, None, :] - self.centroids[None]) ** 2).sum(-1)
        return d.argmin(axis=1)


def name_clusters(mean_outcome, mean_speed) -> dict:
    """Highest outcome -> HighCytotoxic; fastest of the rest -> Motile; of the
    remaining two, higher outcome -> LowCytotoxic, other -> Quiescent."""
    k = len(mean_outcome)
    if k != 4:
        return {c: f"cluster{c}" for c in range(k)}
    rest = list(range(4))
    hc = max(rest, key=lambda c: (mean_outcome[c], -c))
    rest.remove(hc)
    mo = max(rest, key=lambda c: (mean_speed[c], -c))
    rest.remove(mo)
    lo = max(rest, key=lambda c: (mean_outcome[c], -c))
    rest.remove(lo)
    return {hc: MODE_LABELS[0], mo: MODE_LABELS[1], lo: MODE_LABELS[2], rest[0]: MODE_LABELS[3]}


def kmeans_modes(reduced, outcomes, speeds, k: int = 4, seed: int = 0, n_init: int = 10) -> ModeAssignment:
    reduced = np.asarray(reduced, dtype=np.float64)
    if len(reduced) < k:
        raise ValueError(f"need at least {k} windows, got {len(reduced)}")
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, max_iter=300, tol=0.0,
                algorithm="lloyd", random_state=seed).fit(reduced)
    labels = km.labels_.astype(np.int64)
    outcomes = np.asarray(outcomes, dtype=np.float64)
    speeds = np.asarray(speeds, dtype=np.float64)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    with np.errstate(invalid="ignore"):
        mo = np.bincount(labels, weights=outcomes, minlength=k) / counts
        ms = np.bincount(labels, weights=speeds, minlength=k) / counts
    return ModeAssignment(
        labels=labels,
        cluster_names=name_clusters(mo, ms),
        mean_outcome=mo,
        mean_speed=ms,
        fraction=counts / counts.sum(),
        centroids=km.cluster_centers_.copy(),
        kmeans=km,
    )


def transition_matrix(sequences: Sequence[Sequence[int]], k: int = 4):
    """Row-stochastic matrix of consecutive-window mode transitions.

    Returns ``(M, counts, empty_rows)``; rows without outgoing transitions are
    set uniform and flagged in ``empty_rows``.
    """
    counts = np.zeros((k, k), dtype=np.int64)
    for seq in sequences:
        seq = list(seq)
        for a, b in zip(seq[:-1], seq[1:]):
            counts[a, b] += 1
    rows = counts.sum(axis=1)
    empty = rows == 0
    M = np.full((k, k), 1.0 / k)
    M[~empty] = counts[~empty] / rows[~empty, None]
    # nudge each row's last nonzero entry by ulps until the float sum is exactly
    # 1; it enters the sum last, and its ulp is no coarser than the spacing near 1
    for i in np.flatnonzero(~empty):
        j = int(np.flatnonzero(counts[i])[-1])
        for _ in range(64):
            total = M[i].sum()
            if total == 1.0:
                break
            M[i, j] = np.nextafter(M[i, j], -np.inf if total > 1.0 else np.inf)
    return M, counts, empty


def group_by_track(windows: Sequence[WindowEmbedding], labels) -> list[list[int]]:
    seqs: dict[str, list[tuple[int, int]]] = {}
    for w, lab in zip(windows, labels):
        seqs.setdefault(w.track_id, []).append((w.window_index, int(lab)))
    return [[lab for _, lab in sorted(v)] for v in seqs.values()]


def purity(labels, reference) -> float:
    """Fraction of items whose cluster's majority reference label matches their own."""
    labels = np.asarray(labels)
    reference = np.asarray(reference)
    hit = 0
    for c in np.unique(labels):
        hit += np.bincount(reference[labels == c]).max()
    return hit / len(labels)


@dataclass
class Projection:
    windows: list
    labels: np.ndarray
    coords2d: np.ndarray
    paths: dict  # track id -> list of cluster ids in window order
    fraction: np.ndarray


def project_test_tracks(transform: ReducedTransform, modes: ModeAssignment,
                        windows: Sequence[WindowEmbedding]) -> Projection:
    """Embed held-out windows with the fitted transform and assign nearest centroids."""
    k = len(modes.centroids)
    if not windows:
        return Projection([], np.zeros(0, dtype=np.int64), np.zeros((0, 2)), {}, np.zeros(k))
    reduced = transform.transform(np.stack([w.feature for w in windows]))
    labels = modes.predict(reduced)
    paths = {}
    for w, lab in zip(windows, labels):
        paths.setdefault(w.track_id, []).append((w.window_index, int(lab)))
    paths = {tid: [lab for _, lab in sorted(v)] for tid, v in paths.items()}
    coords = reduced[:, :2] if reduced.shape[1] >= 2 else np.pad(reduced, ((0, 0), (0, 2 - reduced.shape[1])))
    frac = np.bincount(labels, minlength=k) / len(labels)
    return Projection(list(windows), labels, coords, paths, frac)


@dataclass
class AnalysisResult:
    train_windows: list
    reduced: np.ndarray
    transform: ReducedTransform
    modes: ModeAssignment
    projection: Projection
    transition: np.ndarray
    transition_counts: np.ndarray
    empty_rows: np.ndarray


def analyze(model, train_eps: Sequence[Episode], test_eps: Sequence[Episode], length: int = 30,
            stride: int = 30, seed: int = 0, change: str = "mean_diff", max_len: int | None = None) -> AnalysisResult:
    """Fit modes on training windows, project test tracks, and estimate test transitions."""
    train_w = [w for ep in train_eps for w in embed_episode(model, ep, length, stride, change, max_len)]
    if not train_w:
        raise ValueError("no training windows; tracks shorter than the window length")
    X = np.stack([w.feature for w in train_w])
    reduced, tf = standardize_pca(X, seed=seed)
    modes = kmeans_modes(reduced, [w.window_outcome for w in train_w], [w.window_speed for w in train_w],
                         seed=seed)
    test_w = [w for ep in test_eps for w in embed_episode(model, ep, length, stride, change, max_len)]
    proj = project_test_tracks(tf, modes, test_w)
    mode_of = modes.cluster_to_mode
    seqs = group_by_track(test_w, mode_of[proj.labels]) if test_w else []
    M, counts, empty = transition_matrix(seqs)
    return AnalysisResult(train_w, reduced, tf, modes, proj, M, counts, empty)


def plot_embedding(result: AnalysisResult, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    names = result.modes.cluster_names
    for c in range(len(result.modes.centroids)):
        sel = result.modes.labels == c
        axes[0].scatter(result.reduced[sel, 0], result.reduced[sel, 1], s=6, label=names[c])
    axes[0].set_title("training windows")
    axes[0].set_xlabel("PC1")
    axes[0].set_ylabel("PC2")
    axes[0].legend(fontsize=7)
    proj = result.projection
    axes[1].scatter(result.reduced[:, 0], result.reduced[:, 1], s=4, c="0.85")
    for tid in list(proj.paths)[:10]:
        sel = [i for i, w in enumerate(proj.windows) if w.track_id == tid]
        axes[1].plot(proj.coords2d[sel, 0], proj.coords2d[sel, 1], "-o", ms=3, lw=1)
    axes[1].set_title("test tracks")
    axes[1].set_xlabel("PC1")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_transitions(M: np.ndarray, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(M, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(4), [m[:6] for m in MODE_LABELS])
    ax.set_yticks(range(4), [m[:6] for m in MODE_LABELS])
    for i in range(4):
        for j in range(4):
            ax.text(j, i, f"{M[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("to")
    ax.set_ylabel("from")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
