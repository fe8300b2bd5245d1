"""Self-conditioned CRNN predictors and the tiny DOA-set encoder.

The localizer and the classifier share one convolutional-recurrent trunk:
conv blocks pool the 513 frequency bins down and pool time by a factor of 5
so the recurrent stage runs at label-frame rate, a GRU integrates context,
and a dense head emits either a 3-vector (tanh, DOA with detection encoded
in its norm) or K+1 class probabilities (softmax, last class = "no event").

Conditioning enters at the input: a c-dimensional embedding of the given
DOA set (mean of per-DOA encodings, or the encoding of the origin when the
set is empty) is broadcast over time and frequency and stacked under the 11
spectral channels as c extra feature maps.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import torch
from torch import nn

from .features import N_FEATURE_CHANNELS, N_BINS, save_tensor, load_tensor


@dataclass
class NetConfig:
    """Architecture knobs shared by the localizer and the classifier."""

    n_classes: int = 13
    head: str = "localizer"  # "localizer" | "classifier"
    cond_dim: int = 5
    conv_filters: tuple = (16, 16)
    freq_pools: tuple = (8, 4)
    time_pools: tuple = (5, 1)
    gru_hidden: int = 32
    bidirectional: bool = False
    dense_hidden: int = 32
    n_bins: int = N_BINS

    def __post_init__(self):
        self.conv_filters = tuple(int(v) for v in self.conv_filters)
        self.freq_pools = tuple(int(v) for v in self.freq_pools)
        self.time_pools = tuple(int(v) for v in self.time_pools)
        if self.head not in ("localizer", "classifier"):
            raise ValueError(f"unknown head {self.head!r}")
        if not (len(self.conv_filters) == len(self.freq_pools) == len(self.time_pools)):
            raise ValueError("conv_filters, freq_pools, time_pools lengths differ")
        if math.prod(self.time_pools) != 5:
            raise ValueError("time pooling must reduce 5 STFT frames to 1 label frame")

    @property
    def out_dim(self) -> int:
        return 3 if self.head == "localizer" else self.n_classes + 1


def full_scale_config(head: str, n_classes: int = 13) -> NetConfig:
    """The large config (three 128-filter blocks); not the test-suite default."""
    return NetConfig(
        n_classes=n_classes,
        head=head,
        conv_filters=(128, 128, 128),
        freq_pools=(8, 8, 2),
        time_pools=(5, 1, 1),
        gru_hidden=128,
        dense_hidden=128,
    )


class ConditionEncoder(nn.Module):
    """3 -> c embedding of a single DOA: Linear + tanh (20 parameters at c=5)."""

    def __init__(self, cond_dim: int = 5):
        super().__init__()
        self.linear = nn.Linear(3, cond_dim)

    def forward(self, doas: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.linear(doas))

    def encode_sets(self, doa_sets: torch.Tensor, counts: torch.Tensor) -> torch.Tensor:
        """Mean embedding per set; an empty set maps to the origin's embedding.

        doa_sets: (B, M, 3) with rows beyond counts[b] ignored (any padding),
        counts: (B,) int. Returns (B, c).
        """
        b, m, _ = doa_sets.shape
        emb = self.forward(doa_sets)  # (B, M, c)
        mask = (
            torch.arange(m, device=doa_sets.device)[None, :] < counts[:, None]
        ).to(emb.dtype)
        total = (emb * mask[:, :, None]).sum(dim=1)
        denom = counts.to(emb.dtype).clamp(min=1.0)[:, None]
        mean = total / denom
        origin = self.forward(torch.zeros(3, dtype=emb.dtype, device=emb.device))
        empty = (counts == 0)[:, None]
        return torch.where(empty, origin[None, :], mean)


class PredictorNet(nn.Module):
    """CRNN over (11 + c) x t x F inputs emitting one vector per label frame."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        blocks = []
        in_ch = N_FEATURE_CHANNELS + config.cond_dim
        for out_ch, fp, tp in zip(config.conv_filters, config.freq_pools, config.time_pools):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
                    nn.ReLU(),
                    nn.MaxPool2d(kernel_size=(tp, fp)),
                )
            )
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        freq_out = config.n_bins
        for fp in config.freq_pools:
            freq_out //= fp
        self.gru = nn.GRU(
            input_size=in_ch * freq_out,
            hidden_size=config.gru_hidden,
            batch_first=True,
            bidirectional=config.bidirectional,
        )
        gru_out = config.gru_hidden * (2 if config.bidirectional else 1)
        self.dense = nn.Linear(gru_out, config.dense_hidden)
        self.head = nn.Linear(config.dense_hidden, config.out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 11+c, t, F) -> (B, T, out) with T = t / 5 label frames."""
        for block in self.blocks:
            x = block(x)
        b, ch, t, f = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, t, ch * f)
        x, _ = self.gru(x)
        x = torch.relu(self.dense(x))
        x = self.head(x)
        if self.config.head == "localizer":
            return torch.tanh(x)
        return torch.softmax(x, dim=-1)


def encode_condition(
    encoder: ConditionEncoder, doa_sets: torch.Tensor, counts: torch.Tensor
) -> torch.Tensor:
    """Set embeddings for padded DOA sets; empty sets embed the origin."""
    return encoder.encode_sets(doa_sets, counts)


def broadcast_condition(cond: torch.Tensor, t: int, n_bins: int) -> torch.Tensor:
    """(B, c) set embeddings -> (B, c, t, F) constant feature maps."""
    return cond[:, :, None, None].expand(-1, -1, t, n_bins)


def forward_conditioned(
    net: PredictorNet,
    encoder: ConditionEncoder,
    features: torch.Tensor,
    doa_sets: torch.Tensor,
    counts: torch.Tensor,
) -> torch.Tensor:
    """Run the net on (B, 11, t, F) features under per-item conditioning sets."""
    cond = encoder.encode_sets(doa_sets, counts)
    maps = broadcast_condition(cond, features.shape[2], features.shape[3])
    return net(torch.cat([features, maps], dim=1))


def forward_frame_conditioned(
    net: PredictorNet,
    encoder: ConditionEncoder,
    features: torch.Tensor,
    doa_sets: torch.Tensor,
    counts: torch.Tensor,
) -> torch.Tensor:
    """Like forward_conditioned but with a separate set per (item, label frame).

    features (B, 11, t, F), doa_sets (B, T, M, 3), counts (B, T) where
    T = t / 5.  Each label frame's embedding is broadcast over its 5 STFT
    frames.  Needed at inference where earlier steps detected different
    DOA sets in different frames.
    """
    b, _, t, f = features.shape
    n_label = doa_sets.shape[1]
    if n_label * 5 != t:
        raise ValueError("conditioning sets must cover t / 5 label frames")
    cond = encoder.encode_sets(
        doa_sets.reshape(b * n_label, -1, 3), counts.reshape(b * n_label)
    ).reshape(b, n_label, -1)
    maps = cond.repeat_interleave(5, dim=1)  # (B, t, c)
    maps = maps.permute(0, 2, 1)[:, :, :, None].expand(-1, -1, -1, f)
    return net(torch.cat([features, maps], dim=1))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, net: PredictorNet, encoder: ConditionEncoder) -> None:
    """Write a checkpoint directory: manifest.json + one tensor file per param."""
    os.makedirs(path, exist_ok=True)
    cfg = asdict(net.config)
    for key in ("conv_filters", "freq_pools", "time_pools"):
        cfg[key] = list(cfg[key])
    tensors = {}
    for prefix, module in (("net", net), ("enc", encoder)):
        for name, param in module.state_dict().items():
            full = f"{prefix}.{name}"
            tensors[full] = list(param.shape)
            save_tensor(os.path.join(path, full + ".ten"), param.detach().cpu().numpy())
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(
            {"format": "coloc-checkpoint-v1", "net_config": cfg, "tensors": tensors},
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")


def load_checkpoint(path) -> tuple[PredictorNet, ConditionEncoder]:
    manifest_path = os.path.join(path, "manifest.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != "coloc-checkpoint-v1":
        raise ValueError(f"{manifest_path}: unknown checkpoint format")
    config = NetConfig(**manifest["net_config"])
    net = PredictorNet(config)
    encoder = ConditionEncoder(config.cond_dim)
    listed = manifest.get("tensors", {})
    for prefix, module in (("net", net), ("enc", encoder)):
        state = {}
        for name, param in module.state_dict().items():
            full = f"{prefix}.{name}"
            arr = load_tensor(os.path.join(path, full + ".ten"))
            if full in listed and list(arr.shape) != listed[full]:
                raise ValueError(f"{path}: tensor {full} shape {list(arr.shape)} "
                                 f"does not match manifest {listed[full]}")
            state[name] = torch.from_numpy(arr).to(param.dtype).reshape(param.shape)
        module.load_state_dict(state)
    return net, encoder
