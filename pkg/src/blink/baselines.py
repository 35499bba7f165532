"""Comparison ladder: constant predictors, a frame-wise autoencoder, two GRUs
and the observation-only world model.

All learned models are built from one ``ModelConfig`` so they share the
encoder architecture; they differ only in what sits on top of it.
"""

from __future__ import annotations

import enum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from blink.outcome_head import IncrementHead, predict_cumulative
from blink.rssm import Decoder, Encoder, ModelConfig, WorldModel


class BaselineKind(str, enum.Enum):
    ZERO = "zero"
    MEAN = "mean"
    FRAME_AE = "frame_ae"
    GRU_REGRESS = "gru_regress"
    GRU_MONOTONE = "gru_monotone"
    BLINK_NO_ACTION = "blink_no_action"


LEARNED_KINDS = ("blink", "blink_no_action", "frame_ae", "gru_regress", "gru_monotone")
MONOTONE_KINDS = ("blink", "blink_no_action", "gru_monotone")


class ZeroPredictor:
    kind = "zero"
    has_prior = False
    can_forecast = True

    def predict_series(self, T: int) -> np.ndarray:
        return np.zeros(T)

    def forecast_series(self, T: int, starts, horizon: int) -> np.ndarray:
        return np.zeros((len(starts), horizon))


class MeanPredictor:
    """Predicts the training-set mean final outcome, ramped linearly over the track."""

    kind = "mean"
    has_prior = False
    can_forecast = True

    def __init__(self, train_mean: float):
        self.train_mean = float(train_mean)

    @classmethod
    def fit(cls, final_outcomes) -> "MeanPredictor":
        vals = np.asarray(final_outcomes, dtype=np.float64)
        return cls(float(vals.mean()) if len(vals) else 0.0)

    def predict_series(self, T: int) -> np.ndarray:
        if T <= 1:
            return np.zeros(T)
        return self.train_mean * np.arange(T) / (T - 1)

    def forecast_series(self, T: int, starts, horizon: int) -> np.ndarray:
        slope = self.train_mean / (T - 1) if T > 1 else 0.0
        return np.tile(slope * np.arange(1, horizon + 1), (len(starts), 1))


class FrameAE(nn.Module):
    """Per-frame autoencoder with an outcome head on the code; no memory."""

    has_prior = False
    can_forecast = False

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.obs_shape, cfg.cnn_depth)
        self.code = nn.Linear(self.encoder.out_dim, cfg.feat_dim)
        self.decoder = Decoder(cfg.feat_dim, cfg.obs_shape, cfg.cnn_depth)
        self.head = nn.Sequential(nn.Linear(cfg.feat_dim, cfg.head_hidden), nn.ELU(),
                                  nn.Linear(cfg.head_hidden, 1))

    def forward(self, obs: torch.Tensor):
        code = F.elu(self.code(self.encoder(obs)))
        return self.decoder(code), self.head(code).squeeze(-1)

    @torch.no_grad()
    def filter_track(self, obs, actions, generator=None):
        _, pred = self(obs)
        return pred, None


class GRUBaseline(nn.Module):
    """Encoder -> GRU -> outcome head, without stochastic latent or decoder.

    ``monotone`` selects the softplus increment head with accumulation;
    otherwise a linear head regresses the cumulative value directly.
    """

    has_prior = False
    can_forecast = True

    def __init__(self, cfg: ModelConfig, monotone: bool):
        super().__init__()
        self.cfg = cfg
        self.monotone = monotone
        self.encoder = Encoder(cfg.obs_shape, cfg.cnn_depth)
        self.act_proj = nn.Linear(cfg.action_dim, cfg.action_embed)
        self.cell = nn.GRUCell(self.encoder.out_dim + cfg.action_embed, cfg.deter)
        if monotone:
            self.head = IncrementHead(cfg.deter, cfg.head_hidden, cfg.head_init_bias)
        else:
            self.head = nn.Linear(cfg.deter, 1)
        self.register_buffer("action_mean", torch.zeros(cfg.action_dim))
        self.register_buffer("action_std", torch.ones(cfg.action_dim))
        # forecast input: zero embedding (default) or the last observed embedding
        self.forecast_input = "zero"

    set_action_stats = WorldModel.set_action_stats

    def _run(self, embed: torch.Tensor, actions: torch.Tensor, h=None) -> torch.Tensor:
        a = self.act_proj((actions - self.action_mean) / self.action_std)
        B, T = embed.shape[:2]
        if h is None:
            h = embed.new_zeros(B, self.cfg.deter)
        hs = []
        for t in range(T):
            h = self.cell(torch.cat([embed[:, t], a[:, t]], -1), h)
            hs.append(h)
        return torch.stack(hs, 1)

    def cumulative(self, hs: torch.Tensor) -> torch.Tensor:
        if self.monotone:
            return predict_cumulative(self.head, hs)[1]
        return self.head(hs).squeeze(-1)

    def forward(self, obs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        return self.cumulative(self._run(self.encoder(obs), actions))

    @torch.no_grad()
    def filter_track(self, obs, actions, generator=None):
        hs = self._run(self.encoder(obs[None]), actions[None])
        return self.cumulative(hs)[0], hs[0]

    @torch.no_grad()
    def forecast(self, obs, actions, starts, horizon: int, generator=None) -> torch.Tensor:
        embed = self.encoder(obs[None])
        hs = self._run(embed, actions[None])[0]
        idx = torch.as_tensor(starts, dtype=torch.long)
        h0 = hs[idx]
        fut = torch.stack([actions[s + 1:s + 1 + horizon] for s in starts])
        if self.forecast_input == "zero":
            emb = embed.new_zeros(len(starts), horizon, embed.shape[-1])
        else:
            emb = embed[0, idx][:, None].expand(-1, horizon, -1)
        fut_h = self._run(emb, fut, h=h0)
        if self.monotone:
            return torch.cumsum(self.head(fut_h), -1)
        # direct regression: re-zero at the start's own prediction
        return self.head(fut_h).squeeze(-1) - self.head(h0).squeeze(-1)[:, None]


def build_model(cfg: ModelConfig) -> nn.Module:
    kind = cfg.kind
    if kind == "blink":
        return WorldModel(cfg)
    if kind == "blink_no_action":
        if cfg.use_actions:
            cfg = ModelConfig.from_dict({**cfg.to_dict(), "use_actions": False})
        return WorldModel(cfg)
    if kind == "frame_ae":
        return FrameAE(cfg)
    if kind == "gru_regress":
        return GRUBaseline(cfg, monotone=False)
    if kind == "gru_monotone":
        return GRUBaseline(cfg, monotone=True)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {LEARNED_KINDS}")


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
