"""Synthetic NK/tumor co-culture simulator.

A small partially observed world: one NK cell wanders an arena among a few
tumor cells, switching between four behavioral modes. Tumors in contact with
the NK die with a mode-dependent hazard. Every emitted frame is an NK-centered
three-channel crop together with the NK displacement and the cumulative kill
count, so generated episodes carry exact ground truth for both outcome labels
and behavioral modes.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from blink.dataset import (
    FORMAT_VERSION,
    DatasetManifest,
    Episode,
    Frame,
    save_episode,
    write_summary_csv,
)

log = logging.getLogger(__name__)


class Mode(enum.IntEnum):
    HIGH_CYTOTOXIC = 0
    MOTILE = 1
    LOW_CYTOTOXIC = 2
    QUIESCENT = 3


MODE_NAMES = ("HighCytotoxic", "Motile", "LowCytotoxic", "Quiescent")

DEFAULT_TRANSITION = (
    (0.30, 0.40, 0.20, 0.10),
    (0.15, 0.35, 0.35, 0.15),
    (0.10, 0.10, 0.60, 0.20),
    (0.05, 0.10, 0.30, 0.55),
)


class ConfigError(ValueError):
    """Raised when a SimConfig violates one of its invariants."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class SimConfig:
    arena_size: int = 128
    obs_size: int = 32
    n_tumor: int = 4
    kill_hazard_contact: float = 0.04
    mode_transition: tuple = DEFAULT_TRANSITION
    mode_speeds: tuple = (5.6, 5.7, 1.55, 1.45)
    episode_len_range: tuple = (60, 400)
    seed: int = 0
    # per-mode lethality multipliers applied to kill_hazard_contact
    lethality: tuple = (1.0, 0.45, 0.2, 0.1)
    # weight of the pull toward the nearest sensed tumor, per mode
    chemotaxis: tuple = (0.9, 0.8, 0.5, 0.3)
    # NK appearance per mode, the synthetic stand-in for cell morphology: a
    # profile exp(-(r - ring)^2 / 2 sigma^2) scaled by intensity, so ring 0 is a
    # plain blob and ring > 0 a spread cell with a bright rim. Chosen so every
    # pair of modes differs by more image energy than a few nearby tumors do.
    nk_sigma: tuple = (7.0, 4.0, 1.5, 1.5)
    nk_ring: tuple = (0.0, 0.0, 9.0, 0.0)
    nk_intensity: tuple = (1.0, 1.0, 0.7, 0.2)
    tumor_intensity: float = 0.5
    speed_noise: float = 0.35
    contact_radius: float = 6.0
    sensing_radius: float = 40.0
    blob_sigma: float = 1.5
    ramp_len: int = 5
    # frames between mode switches; aligned with the analysis window grid
    mode_dwell: int = 30

    def __post_init__(self):
        validate_config(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        kw = {}
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise ConfigError(k, "unknown SimConfig field")
            if isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            kw[k] = v
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    @property
    def transition(self) -> np.ndarray:
        return np.asarray(self.mode_transition, dtype=np.float64)


def validate_config(cfg: SimConfig) -> None:
    P = np.asarray(cfg.mode_transition, dtype=np.float64)
    if P.shape != (4, 4):
        raise ConfigError("mode_transition", f"expected 4x4, got {P.shape}")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
        raise ConfigError("mode_transition", "rows must be non-negative and sum to 1")
    if not 0.0 <= cfg.kill_hazard_contact <= 1.0:
        raise ConfigError("kill_hazard_contact", "must lie in [0, 1]")
    if cfg.obs_size < 16:
        raise ConfigError("obs_size", "must be >= 16")
    lo, hi = cfg.episode_len_range
    if lo < 60:
        raise ConfigError("episode_len_range", "minimum length must be >= 60")
    if hi < lo:
        raise ConfigError("episode_len_range", "max < min")
    if cfg.n_tumor < 0:
        raise ConfigError("n_tumor", "must be >= 0")
    if cfg.arena_size <= 2 * cfg.contact_radius:
        raise ConfigError("arena_size", "arena too small for the contact radius")
    for name in ("mode_speeds", "lethality", "chemotaxis", "nk_sigma", "nk_ring", "nk_intensity"):
        vals = getattr(cfg, name)
        if len(vals) != 4:
            raise ConfigError(name, "expected one value per mode")
    if any(s < 0 for s in cfg.mode_speeds):
        raise ConfigError("mode_speeds", "speeds must be non-negative")
    if any(s <= 0 for s in cfg.nk_sigma):
        raise ConfigError("nk_sigma", "widths must be positive")
    if any(r < 0 for r in cfg.nk_ring):
        raise ConfigError("nk_ring", "ring radii must be non-negative")
    if any(not 0.0 <= v <= 1.0 for v in cfg.nk_intensity):
        raise ConfigError("nk_intensity", "intensities must lie in [0, 1]")
    if not 0.0 < cfg.tumor_intensity <= 1.0:
        raise ConfigError("tumor_intensity", "must lie in (0, 1]")
    if any(not 0.0 <= v <= 1.0 for v in cfg.lethality):
        raise ConfigError("lethality", "scales must lie in [0, 1]")
    if cfg.ramp_len < 1:
        raise ConfigError("ramp_len", "must be >= 1")
    if cfg.mode_dwell < 1:
        raise ConfigError("mode_dwell", "must be >= 1")


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Left eigenvector of a row-stochastic matrix for eigenvalue 1."""
    w, v = np.linalg.eig(np.asarray(P, dtype=np.float64).T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    pi = np.abs(pi)
    return pi / pi.sum()


def make_rng(*key: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by a tuple of integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


@dataclass
class WorldState:
    nk_position: np.ndarray
    tumor_positions: np.ndarray  # (n, 2)
    tumor_alive: np.ndarray  # (n,) bool
    tumor_apoptotic_marker: np.ndarray  # (n,) in [0, 1]
    behavior_mode: Mode
    cumulative_kills: int = 0
    t: int = 0
    heading: float = 0.0

    def copy(self) -> "WorldState":
        return replace(
            self,
            nk_position=self.nk_position.copy(),
            tumor_positions=self.tumor_positions.copy(),
            tumor_alive=self.tumor_alive.copy(),
            tumor_apoptotic_marker=self.tumor_apoptotic_marker.copy(),
        )


def init_world(config: SimConfig, seed: int) -> WorldState:
    validate_config(config)
    rng = make_rng(seed, 0)
    center = np.full(2, config.arena_size / 2.0)
    tumors = np.empty((config.n_tumor, 2))
    for i in range(config.n_tumor):
        # rejection sampling outside the contact ball around the NK
        while True:
            p = rng.uniform(0.0, config.arena_size, size=2)
            if np.linalg.norm(p - center) > config.contact_radius:
                tumors[i] = p
                break
    pi = stationary_distribution(config.transition)
    mode = Mode(int(rng.choice(4, p=pi)))
    return WorldState(
        nk_position=center,
        tumor_positions=tumors,
        tumor_alive=np.ones(config.n_tumor, dtype=bool),
        tumor_apoptotic_marker=np.zeros(config.n_tumor),
        behavior_mode=mode,
        cumulative_kills=0,
        t=0,
        heading=float(rng.uniform(0.0, 2 * np.pi)),
    )


def _nearest_alive(state: WorldState, radius: float):
    if not state.tumor_alive.any():
        return None, np.inf
    d = np.linalg.norm(state.tumor_positions - state.nk_position, axis=1)
    d = np.where(state.tumor_alive, d, np.inf)
    i = int(np.argmin(d))
    if d[i] > radius:
        return None, d[i]
    return i, d[i]


def step_world(state: WorldState, config: SimConfig, rng: np.random.Generator, render: bool = True):
    """Advance the world by one frame and emit the observed Frame.

    With ``render=False`` the frame carries no image; the random stream is
    the same either way.
    """
    s = state.copy()
    t_next = s.t + 1
    if t_next % config.mode_dwell == 0:
        s.behavior_mode = Mode(int(rng.choice(4, p=config.transition[int(s.behavior_mode)])))
    m = int(s.behavior_mode)

    # motion: persistent heading blended with a pull toward the nearest tumor
    s.heading = float(s.heading + rng.normal(0.0, 0.6))
    rand_dir = np.array([np.cos(s.heading), np.sin(s.heading)])
    target, dist = _nearest_alive(s, config.sensing_radius)
    speed = abs(config.mode_speeds[m] + rng.normal(0.0, 0.2 * config.mode_speeds[m]))
    w = config.chemotaxis[m]
    if target is not None and w > 0 and dist > 1e-9:
        to_target = (s.tumor_positions[target] - s.nk_position) / dist
        direction = w * to_target + (1.0 - w) * rand_dir
        direction /= max(np.linalg.norm(direction), 1e-12)
    else:
        direction = rand_dir
    disp = speed * direction + rng.normal(0.0, config.speed_noise, size=2)
    new_pos = np.clip(s.nk_position + disp, 0.0, float(config.arena_size))
    action = (new_pos - s.nk_position).astype(np.float32)
    s.nk_position = new_pos

    # apoptotic markers of already-dead tumors keep ramping
    dead = ~s.tumor_alive
    s.tumor_apoptotic_marker[dead] = np.minimum(
        1.0, s.tumor_apoptotic_marker[dead] + 1.0 / config.ramp_len
    )

    hazard = config.kill_hazard_contact * config.lethality[m]
    if s.tumor_alive.any():
        d = np.linalg.norm(s.tumor_positions - s.nk_position, axis=1)
        in_contact = s.tumor_alive & (d <= config.contact_radius)
        # one uniform per tumor keeps the draw count independent of contact state
        u = rng.uniform(size=len(d))
        dies = in_contact & (u < hazard)
        if dies.any():
            s.tumor_alive[dies] = False
            s.tumor_apoptotic_marker[dies] = 1.0 / config.ramp_len
            s.cumulative_kills += int(dies.sum())
    s.t = t_next

    frame = Frame(render_observation(s, config) if render else None, action, s.cumulative_kills)
    return s, frame


def _gaussian(dx: np.ndarray, dy: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))


def render_observation(state: WorldState, config: SimConfig) -> np.ndarray:
    """NK-centered 3-channel crop, float32 in [0, 1].

    Channel 0 holds the NK blob, channel 1 alive tumors, channel 2 apoptotic
    markers scaled by marker intensity. Pixel (S//2, S//2) sits on the NK.
    """
    S = config.obs_size
    off = np.arange(S, dtype=np.float64) - S // 2
    gx, gy = np.meshgrid(off, off)  # gx varies along W (x), gy along H (y)
    img = np.zeros((3, S, S), dtype=np.float64)
    m = int(state.behavior_mode)
    radial = np.hypot(gx, gy) - config.nk_ring[m]
    img[0] = config.nk_intensity[m] * np.exp(-radial * radial / (2.0 * config.nk_sigma[m] ** 2))
    if len(state.tumor_positions):
        rel = state.tumor_positions - state.nk_position
        near = np.all(np.abs(rel) < S // 2 + 4 * config.blob_sigma, axis=1)
        for i in np.flatnonzero(near):
            g = _gaussian(gx - rel[i, 0], gy - rel[i, 1], config.blob_sigma)
            if state.tumor_alive[i]:
                img[1] += config.tumor_intensity * g
            elif state.tumor_apoptotic_marker[i] > 0:
                img[2] += state.tumor_apoptotic_marker[i] * g
    ax = state.nk_position[0] + gx
    ay = state.nk_position[1] + gy
    outside = (ax < 0) | (ax > config.arena_size) | (ay < 0) | (ay > config.arena_size)
    img[:, outside] = 0.0
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _run_episode(config: SimConfig, seed: int, render: bool = True):
    """Yield the length T and the initial state, then (state, frame) per later frame."""
    rng = make_rng(seed, 1)
    lo, hi = config.episode_len_range
    T = int(rng.integers(lo, hi + 1))
    state = init_world(config, seed)
    yield T, state
    for _ in range(1, T):
        state, frame = step_world(state, config, rng, render)
        yield state, frame


def generate_episode(config: SimConfig, seed: int, episode_id: str | None = None) -> Episode:
    run = _run_episode(config, seed)
    T, state = next(run)
    S = config.obs_size
    obs = np.empty((T, 3, S, S), dtype=np.float32)
    actions = np.zeros((T, 2), dtype=np.float32)
    kills = np.zeros(T, dtype=np.int32)
    modes = np.empty(T, dtype=np.int8)
    obs[0] = render_observation(state, config)
    modes[0] = int(state.behavior_mode)
    for t, (state, frame) in enumerate(run, start=1):
        obs[t] = frame.obs
        actions[t] = frame.action
        kills[t] = frame.cum_kills
        modes[t] = int(state.behavior_mode)
    return Episode(
        id=episode_id if episode_id is not None else f"ep{seed}",
        obs=obs,
        actions=actions,
        cum_kills=kills,
        modes=modes,
    )


def episode_kills(config: SimConfig, seed: int) -> np.ndarray:
    """Cumulative kill series of ``generate_episode(config, seed)`` without rendering."""
    run = _run_episode(config, seed, render=False)
    T, _ = next(run)
    kills = np.zeros(T, dtype=np.int32)
    for t, (_, frame) in enumerate(run, start=1):
        kills[t] = frame.cum_kills
    return kills


def episode_seeds(seed: int, n: int) -> list[int]:
    rng = make_rng(seed, 2)
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def generate_split_episodes(config: SimConfig, n_train: int, n_val: int, n_test: int, seed: int):
    """Generate the three splits in memory; returns {split: [Episode]}."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if any(c < 0 for c in counts.values()) or sum(counts.values()) == 0:
        raise ValueError("split counts must be non-negative with a positive total")
    seeds = episode_seeds(seed, sum(counts.values()))
    out, k = {}, 0
    for split, n in counts.items():
        out[split] = []
        for _ in range(n):
            out[split].append(generate_episode(config, seeds[k], episode_id=f"{split}_{k:05d}"))
            k += 1
    return out


def generate_dataset(config: SimConfig, n_train: int, n_val: int, n_test: int, seed: int,
                     out_dir) -> DatasetManifest:
    """Write the three splits plus ``manifest.json`` under ``out_dir``."""
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError("split counts must be positive")
    out = Path(out_dir)
    (out / "episodes").mkdir(parents=True, exist_ok=True)
    seeds = episode_seeds(seed, n_train + n_val + n_test)
    splits: dict[str, list[str]] = {}
    checksums: dict[str, str] = {}
    summary = []
    k = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        splits[split] = []
        for _ in range(n):
            ep = generate_episode(config, seeds[k], episode_id=f"{split}_{k:05d}")
            fname = f"episodes/{ep.id}.ep"
            save_episode(ep, out / fname)
            checksums[fname] = hashlib.sha256((out / fname).read_bytes()).hexdigest()
            splits[split].append(fname)
            summary.append(ep)
            k += 1
    manifest = DatasetManifest(
        splits=splits,
        config=config.to_dict(),
        seed=seed,
        format_version=FORMAT_VERSION,
        checksums=checksums,
    )
    manifest.save(out / "manifest.json")
    write_summary_csv(summary, out / "summary.csv")
    log.info("wrote %d episodes to %s", k, out)
    return manifest
