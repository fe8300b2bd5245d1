"""Flat experiment configuration shared by every CLI stage.

One dataclass holds every knob; config files are plain `key = value` lines
(# comments allowed) and unknown keys are rejected with file/line context.
The same key set is exposed as CLI overrides, so `--help` doubles as the
schema documentation.
"""

import dataclasses
from dataclasses import dataclass

from .model import NetConfig
from .scenes import SceneConfig
from .training import TrainConfig


@dataclass
class ExperimentConfig:
    # paths
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"
    # master seed; every stage derives its streams from this
    seed: int = 0
    # scene generation
    n_scenes: int = 200
    n_eval_scenes: int = 50
    duration_s: float = 5.0
    n_classes: int = 13
    n_tracks: int = 3
    max_overlap: int = 3
    events_min: int = 1
    events_max: int = 4
    event_dur_min_s: float = 0.5
    event_dur_max_s: float = 2.5
    noise_floor_db: float = -40.0
    max_speed_deg_s: float = 10.0
    move_prob: float = 0.5
    min_separation_deg: float = 15.0
    # network architecture (both heads share the trunk shape)
    conv_filters: tuple = (16, 16)
    freq_pools: tuple = (8, 4)
    time_pools: tuple = (5, 1)
    gru_hidden: int = 32
    dense_hidden: int = 32
    cond_dim: int = 5
    # training
    steps: int = 2000
    batch_size: int = 16
    chunk_label_frames: int = 10
    learning_rate: float = 5e-4
    perturb_deg: float = 5.0
    spatial_every: int = 4
    volume_min: float = 0.5
    volume_max: float = 1.5
    focal_gamma: float = 1.0
    log_every: int = 100
    checkpoint_every: int = 0
    # inference
    mode: str = "max_ov2"
    threshold: float = 0.5
    infer_perturb_deg: float = 0.0

    def __post_init__(self):
        if self.mode not in ("max_ov2", "max_ov3"):
            raise ValueError(f"mode must be max_ov2 or max_ov3, got {self.mode!r}")
        if self.n_tracks < 1:
            raise ValueError("n_tracks must be >= 1")
        if self.n_scenes < 0 or self.n_eval_scenes < 0:
            raise ValueError("scene counts must be >= 0")
        if self.max_overlap > self.n_tracks:
            raise ValueError("max_overlap above n_tracks would be truncated silently")

    # ---- views for the individual stages ----

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            duration_s=self.duration_s,
            n_classes=self.n_classes,
            max_overlap=self.max_overlap,
            events_min=self.events_min,
            events_max=self.events_max,
            event_dur_min_s=self.event_dur_min_s,
            event_dur_max_s=self.event_dur_max_s,
            noise_floor_db=self.noise_floor_db,
            max_speed_deg_s=self.max_speed_deg_s,
            move_prob=self.move_prob,
            min_separation_deg=self.min_separation_deg,
            seed=self.seed,
        )

    def net_config(self, head: str) -> NetConfig:
        return NetConfig(
            n_classes=self.n_classes,
            head=head,
            cond_dim=self.cond_dim,
            conv_filters=self.conv_filters,
            freq_pools=self.freq_pools,
            time_pools=self.time_pools,
            gru_hidden=self.gru_hidden,
            dense_hidden=self.dense_hidden,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            chunk_label_frames=self.chunk_label_frames,
            learning_rate=self.learning_rate,
            seed=seed,
            perturb_deg=self.perturb_deg,
            spatial_every=self.spatial_every,
            volume_min=self.volume_min,
            volume_max=self.volume_max,
            focal_gamma=self.focal_gamma,
            log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def coerce_value(key: str, raw: str):
    """Parse a raw string into the declared type of config key `key`."""
    if key not in _FIELDS:
        raise KeyError(key)
    ftype = _FIELDS[key].type
    raw = raw.strip()
    if ftype is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"{key}: expected boolean, got {raw!r}")
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    if ftype is tuple:
        parts = [p for p in raw.split(",") if p.strip()]
        return tuple(int(p) for p in parts)
    return raw


def parse_config_file(path) -> dict:
    """Read `key = value` lines; returns raw overrides, rejecting unknown keys."""
    overrides = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(f"{path}:{lineno}: expected key = value, got {text!r}")
            key, raw = (part.strip() for part in text.split("=", 1))
            if key not in _FIELDS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                overrides[key] = coerce_value(key, raw)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return overrides


def load_config(path=None, overrides=None) -> ExperimentConfig:
    values = {}
    if path is not None:
        values.update(parse_config_file(path))
    if overrides:
        for key in overrides:
            if key not in _FIELDS:
                raise ValueError(f"unknown config key {key!r}")
        values.update(overrides)
    return ExperimentConfig(**values)


def config_lines(config: ExperimentConfig) -> list:
    """Canonical `key = value` echo of a config (stable order, reparseable)."""
    lines = []
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return lines


def write_config_echo(config: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        f.write("\n".join(config_lines(config)) + "\n")
