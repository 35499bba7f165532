"""Recurrent state-space world model with categorical latents.

The model state is ``s_t = (h_t, z_t)``: a deterministic GRU state ``h`` and a
stochastic latent ``z`` made of ``stoch`` independent categoricals with
``classes`` classes each. The posterior sees the current frame embedding, the
prior only ``h``; the prior is what drives observation-free rollouts.

Time convention: ``actions[t]`` is the displacement that moved the NK from
frame ``t-1`` to frame ``t`` (``actions[0]`` is zero). The recurrent update
producing ``h_t`` consumes ``z_{t-1}`` and ``actions[t]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from blink.outcome_head import IncrementHead, predict_cumulative


@dataclass
class ModelConfig:
    kind: str = "blink"
    obs_shape: tuple = (3, 32, 32)
    cnn_depth: int = 16
    deter: int = 200
    stoch: int = 16
    classes: int = 16
    hidden: int = 200
    action_dim: int = 2
    action_embed: int = 16
    head_hidden: int = 128
    head_init_bias: float = -9.0
    use_actions: bool = True
    # evaluation: argmax the categorical instead of sampling
    eval_mode_sample: bool = False

    @property
    def stoch_flat(self) -> int:
        return self.stoch * self.classes

    @property
    def feat_dim(self) -> int:
        return self.deter + self.stoch_flat

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "obs_shape" in d:
            d["obs_shape"] = tuple(d["obs_shape"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obs_shape"] = list(self.obs_shape)
        return d


class Encoder(nn.Module):
    """Four strided 4x4 convolutions, channel multiplier doubling each layer."""

    def __init__(self, obs_shape, depth: int = 16):
        super().__init__()
        C, H, W = obs_shape
        if H % 16 or W % 16:
            raise ValueError(f"observation side must be divisible by 16, got {H}x{W}")
        chans = [C, depth, 2 * depth, 4 * depth, 8 * depth]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.ELU()]
        self.net = nn.Sequential(*layers).to(memory_format=torch.channels_last)
        self.obs_shape = tuple(obs_shape)
        self.out_dim = 8 * depth * (H // 16) * (W // 16)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        if tuple(obs.shape[-3:]) != self.obs_shape:
            raise ValueError(f"expected observations of shape {self.obs_shape}, got {tuple(obs.shape[-3:])}")
        lead = obs.shape[:-3]
        # channels-last takes the faster oneDNN kernels on CPU
        x = obs.reshape(-1, *self.obs_shape).contiguous(memory_format=torch.channels_last)
        return self.net(x).reshape(*lead, -1)


class Decoder(nn.Module):
    """Mirror of the encoder with transposed convolutions; returns the pixel mean."""

    def __init__(self, in_dim: int, obs_shape, depth: int = 16):
        super().__init__()
        C, H, W = obs_shape
        self.obs_shape = tuple(obs_shape)
        self.base = (8 * depth, H // 16, W // 16)
        self.fc = nn.Linear(in_dim, 8 * depth * (H // 16) * (W // 16))
        chans = [8 * depth, 4 * depth, 2 * depth, depth]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1), nn.ELU()]
        layers.append(nn.ConvTranspose2d(depth, C, 4, stride=2, padding=1))
        self.net = nn.Sequential(*layers).to(memory_format=torch.channels_last)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        lead = feat.shape[:-1]
        x = self.fc(feat.reshape(-1, feat.shape[-1])).reshape(-1, *self.base)
        x = self.net(x.contiguous(memory_format=torch.channels_last))
        return x.contiguous().reshape(*lead, *self.obs_shape)


@dataclass
class CategoricalBelief:
    logits: torch.Tensor  # (..., K, C)

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)


def sample_straight_through(belief: CategoricalBelief, generator: torch.Generator | None = None,
                            mode: bool = False) -> torch.Tensor:
    """One-hot sample per group whose gradient flows to the probabilities.

    Forward value is an exact one-hot; backward is that of ``probs``
    (``sample + probs - probs.detach()``).
    """
    probs = belief.probs
    if mode:
        idx = probs.argmax(dim=-1)
    else:
        flat = probs.detach().reshape(-1, probs.shape[-1])
        idx = torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])
    onehot = F.one_hot(idx, probs.shape[-1]).to(probs.dtype)
    return onehot + (probs - probs.detach())


@dataclass
class LatentState:
    h: torch.Tensor  # (..., deter)
    z: torch.Tensor  # (..., stoch * classes), one-hot per group

    @property
    def feat(self) -> torch.Tensor:
        return torch.cat([self.h, self.z], dim=-1)


def _mlp(i: int, hidden: int, o: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(i, hidden), nn.ELU(), nn.Linear(hidden, o))


class RSSM(nn.Module):
    def __init__(self, cfg: ModelConfig, embed_dim: int):
        super().__init__()
        self.cfg = cfg
        self.act_proj = nn.Linear(cfg.action_dim, cfg.action_embed)
        self.img_in = nn.Linear(cfg.stoch_flat + cfg.action_embed, cfg.hidden)
        self.cell = nn.GRUCell(cfg.hidden, cfg.deter)
        self.prior_net = _mlp(cfg.deter, cfg.hidden, cfg.stoch_flat)
        self.post_net = _mlp(cfg.deter + embed_dim, cfg.hidden, cfg.stoch_flat)

    def _belief(self, flat_logits: torch.Tensor) -> CategoricalBelief:
        return CategoricalBelief(flat_logits.reshape(*flat_logits.shape[:-1], self.cfg.stoch, self.cfg.classes))

    def recurrent_step(self, prev: LatentState, action: torch.Tensor) -> torch.Tensor:
        x = torch.cat([prev.z, self.act_proj(action)], dim=-1)
        return self.cell(F.elu(self.img_in(x)), prev.h)

    def prior(self, h: torch.Tensor) -> CategoricalBelief:
        return self._belief(self.prior_net(h))

    def posterior(self, h: torch.Tensor, embed: torch.Tensor) -> CategoricalBelief:
        return self._belief(self.post_net(torch.cat([h, embed], dim=-1)))

    def initial(self, batch: int, device=None, dtype=None) -> LatentState:
        p = next(self.parameters())
        device = device or p.device
        dtype = dtype or p.dtype
        return LatentState(
            torch.zeros(batch, self.cfg.deter, device=device, dtype=dtype),
            torch.zeros(batch, self.cfg.stoch_flat, device=device, dtype=dtype),
        )


class WorldModel(nn.Module):
    """Encoder, RSSM, decoder and increment head trained jointly.

    With ``cfg.use_actions`` false the action pathway keeps its parameters but
    always receives zeros (the observation-only ablation).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.obs_shape, cfg.cnn_depth)
        self.rssm = RSSM(cfg, self.encoder.out_dim)
        self.decoder = Decoder(cfg.feat_dim, cfg.obs_shape, cfg.cnn_depth)
        self.head = IncrementHead(cfg.feat_dim, cfg.head_hidden, cfg.head_init_bias)
        self.register_buffer("action_mean", torch.zeros(cfg.action_dim))
        self.register_buffer("action_std", torch.ones(cfg.action_dim))

    has_prior = True
    can_forecast = True

    def set_action_stats(self, mean, std) -> None:
        self.action_mean.copy_(torch.as_tensor(mean, dtype=self.action_mean.dtype))
        self.action_std.copy_(torch.clamp(torch.as_tensor(std, dtype=self.action_std.dtype), min=1e-6))

    def prep_actions(self, actions: torch.Tensor) -> torch.Tensor:
        a = (actions - self.action_mean) / self.action_std
        return a if self.cfg.use_actions else torch.zeros_like(a)

    def encode(self, obs: torch.Tensor) -> torch.Tensor:
        return self.encoder(obs)

    def decode(self, feat: torch.Tensor) -> torch.Tensor:
        return self.decoder(feat)

    def observe_sequence(self, obs: torch.Tensor, actions: torch.Tensor, sample: bool = True,
                         generator: torch.Generator | None = None, fixed_z: torch.Tensor | None = None):
        """Filter a (B, T, ...) sequence; returns posterior states and both beliefs.

        ``fixed_z`` (B, T, stoch*classes) replaces sampling with given constant
        one-hots, which makes the loss a smooth function of the parameters
        (used for gradient checks).
        """
        if obs.shape[:2] != actions.shape[:2]:
            raise ValueError(f"obs {tuple(obs.shape[:2])} and actions {tuple(actions.shape[:2])} are misaligned")
        B, T = obs.shape[:2]
        embed = self.encode(obs)
        acts = self.prep_actions(actions)
        state = self.rssm.initial(B, obs.device, obs.dtype)
        hs, zs, prior_logits, post_logits = [], [], [], []
        for t in range(T):
            h = state.h if t == 0 else self.rssm.recurrent_step(state, acts[:, t])
            post = self.rssm.posterior(h, embed[:, t])
            prior = self.rssm.prior(h)
            if fixed_z is not None:
                z = fixed_z[:, t]
            else:
                z = sample_straight_through(post, generator, mode=not sample).reshape(B, -1)
            state = LatentState(h, z)
            hs.append(h)
            zs.append(z)
            prior_logits.append(prior.logits)
            post_logits.append(post.logits)
        return {
            "h": torch.stack(hs, 1),
            "z": torch.stack(zs, 1),
            "prior": CategoricalBelief(torch.stack(prior_logits, 1)),
            "post": CategoricalBelief(torch.stack(post_logits, 1)),
        }

    def imagine_rollout(self, start: LatentState, actions: torch.Tensor, sample: bool = False,
                        generator: torch.Generator | None = None) -> LatentState:
        """Roll the prior forward for ``actions.shape[1]`` steps without observations.

        ``actions`` is (B, n, 2) with ``actions[:, k]`` the displacement into
        imagined step ``k + 1``. Returns stacked states of shape (B, n, ...).
        """
        n = actions.shape[1]
        if n < 1:
            raise ValueError("rollout horizon must be >= 1")
        acts = self.prep_actions(actions)
        state = start
        hs, zs = [], []
        for k in range(n):
            h = self.rssm.recurrent_step(state, acts[:, k])
            z = sample_straight_through(self.rssm.prior(h), generator, mode=not sample)
            state = LatentState(h, z.reshape(h.shape[0], -1))
            hs.append(state.h)
            zs.append(state.z)
        return LatentState(torch.stack(hs, 1), torch.stack(zs, 1))

    def outcome(self, feat: torch.Tensor):
        return predict_cumulative(self.head, feat)

    # evaluation interface shared with the baselines

    @torch.no_grad()
    def filter_track(self, obs: torch.Tensor, actions: torch.Tensor, generator=None):
        out = self.observe_sequence(obs[None], actions[None], sample=self.cfg.eval_mode_sample,
                                    generator=generator)
        feat = torch.cat([out["h"], out["z"]], -1)
        _, cum = self.outcome(feat)
        return cum[0], LatentState(out["h"][0], out["z"][0])

    @torch.no_grad()
    def forecast(self, obs, actions, starts, horizon: int, generator=None) -> torch.Tensor:
        """Cumulative predictions re-zeroed at each start, shape (n_starts, horizon)."""
        _, states = self.filter_track(obs, actions, generator)
        idx = torch.as_tensor(starts, dtype=torch.long)
        start = LatentState(states.h[idx], states.z[idx])
        fut = torch.stack([actions[s + 1:s + 1 + horizon] for s in starts])
        imagined = self.imagine_rollout(start, fut, sample=self.cfg.eval_mode_sample, generator=generator)
        inc = self.head(imagined.feat)
        return torch.cumsum(inc, dim=-1)

    @torch.no_grad()
    def latent_features(self, obs, actions) -> torch.Tensor:
        """Per-frame (h, posterior probabilities) features, mode evaluation."""
        out = self.observe_sequence(obs[None], actions[None], sample=False)
        return torch.cat([out["h"][0], out["post"].probs[0].flatten(-2)], -1)


def save_checkpoint(model: nn.Module, cfg: ModelConfig, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {"model": cfg.to_dict(), **(extra or {})}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Rebuild a model (any kind) from ``checkpoint.bin`` and its JSON sidecar."""
    from blink.baselines import build_model

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"checkpoint sidecar not found: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    cfg = ModelConfig.from_dict(sidecar["model"])
    model = build_model(cfg)
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model, sidecar
