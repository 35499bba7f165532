"""Episode data model, on-disk format, track filtering and window construction."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MIN_TRACK_LEN = 60


class EpisodeFormatError(ValueError):
    pass


class MalformedHeaderError(EpisodeFormatError):
    pass


class TruncatedPayloadError(EpisodeFormatError):
    pass


class VersionMismatchError(EpisodeFormatError):
    pass


@dataclass
class Frame:
    obs: np.ndarray  # (C, H, W) in [0, 1]
    action: np.ndarray  # (dx, dy)
    cum_kills: int


@dataclass(eq=False)
class Episode:
    """A tracked NK trajectory stored as stacked per-frame arrays.

    ``modes`` is optional ground-truth behavior per frame, only known for
    simulated data.
    """

    id: str
    obs: np.ndarray  # (T, C, H, W) float32
    actions: np.ndarray  # (T, 2) float32
    cum_kills: np.ndarray  # (T,) int32
    modes: np.ndarray | None = None

    def __post_init__(self):
        self.obs = np.ascontiguousarray(self.obs, dtype=np.float32)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float32)
        self.cum_kills = np.ascontiguousarray(self.cum_kills, dtype=np.int32)
        if self.obs.ndim != 4:
            raise ValueError(f"obs must be (T, C, H, W), got {self.obs.shape}")
        T = self.obs.shape[0]
        if self.actions.shape != (T, 2) or self.cum_kills.shape != (T,):
            raise ValueError("obs, actions and cum_kills must share the time axis")
        if self.modes is not None:
            self.modes = np.asarray(self.modes, dtype=np.int8)

    @property
    def T(self) -> int:
        return int(self.obs.shape[0])

    def __len__(self) -> int:
        return self.T

    def frame(self, t: int) -> Frame:
        return Frame(self.obs[t], self.actions[t], int(self.cum_kills[t]))

    @property
    def frames(self) -> Iterator[Frame]:
        return (self.frame(t) for t in range(self.T))

    @property
    def total_kills(self) -> int:
        return int(self.cum_kills[-1] - self.cum_kills[0]) if self.T else 0

    def equals(self, other: "Episode") -> bool:
        return (
            self.id == other.id
            and np.array_equal(self.obs, other.obs)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.cum_kills, other.cum_kills)
        )


def _header_bytes(ep: Episode) -> bytes:
    T, C, H, W = ep.obs.shape
    header = {"id": ep.id, "T": T, "C": C, "H": H, "W": W, "format_version": FORMAT_VERSION}
    if ep.modes is not None:
        header["modes"] = [int(m) for m in ep.modes]
    return json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"


def save_episode(ep: Episode, path) -> None:
    """Write ``ep``: JSON header line, then LE float32 obs, LE float32 actions, LE int32 labels."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_header_bytes(ep))
        f.write(ep.obs.astype("<f4").tobytes())
        f.write(ep.actions.astype("<f4").tobytes())
        f.write(ep.cum_kills.astype("<i4").tobytes())


def load_episode(path) -> Episode:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise MalformedHeaderError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        T, C, H, W = (int(header[k]) for k in ("T", "C", "H", "W"))
        ep_id = str(header["id"])
        version = header["format_version"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"{path}: bad header ({e})") from e
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format_version {version}, expected {FORMAT_VERSION}")
    if min(T, C, H, W) < 0:
        raise MalformedHeaderError(f"{path}: negative dimension in header")
    n_obs, n_act = T * C * H * W, T * 2
    expected = 4 * (n_obs + n_act + T)
    payload = memoryview(raw)[nl + 1:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise EpisodeFormatError(f"{path}: {len(payload) - expected} trailing bytes")
    obs = np.frombuffer(payload, dtype="<f4", count=n_obs).reshape(T, C, H, W)
    actions = np.frombuffer(payload, dtype="<f4", count=n_act, offset=4 * n_obs).reshape(T, 2)
    kills = np.frombuffer(payload, dtype="<i4", count=T, offset=4 * (n_obs + n_act))
    modes = header.get("modes")
    return Episode(
        id=ep_id,
        obs=obs.astype(np.float32),
        actions=actions.astype(np.float32),
        cum_kills=kills.astype(np.int32),
        modes=np.asarray(modes, dtype=np.int8) if modes is not None else None,
    )


def episode_file_size(header_len: int, T: int, C: int, H: int, W: int) -> int:
    return header_len + T * (C * H * W * 4 + 8 + 4)


@dataclass
class DatasetManifest:
    splits: dict
    config: dict
    seed: int
    format_version: int = FORMAT_VERSION
    checksums: dict = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for name, files in self.splits.items():
            dup = seen.intersection(files)
            if dup:
                raise ValueError(f"split {name!r} shares episodes with another split: {sorted(dup)[:3]}")
            seen.update(files)

    def to_json(self) -> str:
        d = {
            "format_version": self.format_version,
            "seed": self.seed,
            "config": self.config,
            "splits": self.splits,
            "checksums": self.checksums,
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            splits=d["splits"],
            config=d["config"],
            seed=d["seed"],
            format_version=d.get("format_version", FORMAT_VERSION),
            checksums=d.get("checksums", {}),
        )

    def __len__(self) -> int:
        return sum(len(v) for v in self.splits.values())


def load_split(root, split: str) -> list[Episode]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    manifest = DatasetManifest.load(manifest_path)
    if split not in manifest.splits:
        raise KeyError(f"split {split!r} not in manifest {manifest_path}")
    return [load_episode(root / f) for f in manifest.splits[split]]


def write_summary_csv(episodes: Sequence[Episode], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id", "T", "total_kills"])
        for ep in episodes:
            w.writerow([ep.id, ep.T, ep.total_kills])


def filter_tracks(episodes: Sequence[Episode], min_len: int = MIN_TRACK_LEN) -> list[Episode]:
    return [ep for ep in episodes if len(ep) >= min_len]


def greedy_track(centroids_per_frame, max_dist: float = 10.0) -> list[list[tuple[int, int]]]:
    """Link per-frame detections into tracks by greedy nearest-neighbor matching.

    Candidate (track, detection) pairs are taken globally in ascending distance
    order, ties broken by track id then detection index. Pairs farther than
    ``max_dist`` are rejected. Returns each track as a list of
    ``(frame_index, detection_index)``.
    """
    tracks: list[list[tuple[int, int]]] = []
    active: list[int] = []  # track ids alive at the previous frame
    prev_pts = np.empty((0, 2))
    for t, pts in enumerate(centroids_per_frame):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        claimed = np.zeros(len(pts), dtype=bool)
        next_active: list[int] = []
        if active and len(pts):
            d = np.linalg.norm(prev_pts[:, None, :] - pts[None, :, :], axis=-1)
            ti, di = np.nonzero(d <= max_dist)
            order = np.lexsort((di, np.asarray(active)[ti], d[ti, di]))
            used_tracks: set[int] = set()
            for k in order:
                a, b = int(ti[k]), int(di[k])
                if a in used_tracks or claimed[b]:
                    continue
                used_tracks.add(a)
                claimed[b] = True
                tracks[active[a]].append((t, b))
                next_active.append(active[a])
        for b in np.flatnonzero(~claimed):
            tracks.append([(t, int(b))])
            next_active.append(len(tracks) - 1)
        # keep prev_pts aligned with next_active
        active = next_active
        prev_pts = np.array([pts[tracks[i][-1][1]] for i in active]).reshape(-1, 2)
    return tracks


def threshold_labels(marker: np.ndarray, threshold: float) -> np.ndarray:
    """Cumulative apoptosis count from per-cell marker intensities.

    ``marker`` is (T, n_cells); a cell counts as apoptotic from the first frame
    its signal exceeds ``threshold``.
    """
    marker = np.asarray(marker, dtype=np.float64)
    if marker.ndim != 2:
        raise ValueError("marker must be (T, n_cells)")
    crossed = np.maximum.accumulate(marker > threshold, axis=0)
    return crossed.sum(axis=1).astype(np.int32)


@dataclass
class WindowSample:
    episode_id: str
    t0: int
    L: int
    obs: np.ndarray
    action: np.ndarray
    rel_label: np.ndarray


def window_at(ep: Episode, t0: int, L: int) -> WindowSample:
    if t0 < 0 or t0 + L > ep.T:
        raise ValueError(f"window [{t0}, {t0 + L}) outside episode of length {ep.T}")
    y = ep.cum_kills[t0:t0 + L].astype(np.int64)
    return WindowSample(
        episode_id=ep.id,
        t0=t0,
        L=L,
        obs=ep.obs[t0:t0 + L],
        action=ep.actions[t0:t0 + L],
        rel_label=(y - y[0]).astype(np.int32),
    )


def make_windows(ep: Episode, L: int, stride: int | None = None, n_random: int | None = None,
                 rng: np.random.Generator | None = None) -> list[WindowSample]:
    """Cut fixed-length windows with labels re-zeroed at each window start.

    Give either ``stride`` (deterministic grid from t0=0) or ``n_random``
    uniformly drawn starts. Episodes shorter than ``L`` yield no windows.
    """
    if (stride is None) == (n_random is None):
        raise ValueError("pass exactly one of stride or n_random")
    if L > ep.T:
        log.warning("episode %s shorter than window (%d < %d); skipped", ep.id, ep.T, L)
        return []
    if stride is not None:
        starts = range(0, ep.T - L + 1, stride)
    else:
        rng = rng if rng is not None else np.random.default_rng()
        starts = rng.integers(0, ep.T - L + 1, size=n_random)
    return [window_at(ep, int(t0), L) for t0 in starts]
