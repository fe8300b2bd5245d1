"""Losses, batch assembly with augmentations, and the optimization loop.

The localizer loss is set-aware without permutation-invariant training: the
sampled conditioning depth r splits each frame's stacked rows into a hidden
conditioning part (rows < r) and a target part (rows >= r), the frame loss
is the minimum L1.5 distance from the prediction to any target row (or the
L1.5 norm of the prediction when the target part is empty, teaching the
origin stop token), and frames are pooled into (r, k) buckets that are
averaged separately before the final mean over N(N+1)/2 + 1 buckets.

The classifier is a plain per-frame focal loss against the class of the
sampled row, with the no-event class K for empty cells.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import geometry
from .features import load_tensor, STFT_FRAMES_PER_LABEL_FRAME
from .geometry import FOA_ROTATIONS, perturb_doas
from .model import ConditionEncoder, PredictorNet, forward_frame_conditioned, save_checkpoint
from .tracks import StackedTracks, permute_and_restack, read_meta_csv, stack_tracks

LOSS_P = 1.5
FOCAL_PROB_FLOOR = 1e-7
_NORM_GUARD = 1e-24  # keeps d(s^(1/p)) finite at s = 0; below any real distance


# ---------------------------------------------------------------------------
# scalar reference losses (numpy; the vectorized torch versions must agree)

def localizer_frame_loss(target_doas, pred) -> float:
    """Frame loss for one prediction: min L1.5 distance to any target DOA.

    target_doas are the non-empty rows r..k of the frame's target part; when
    the list is empty the loss is the L1.5 norm of the prediction itself.
    """
    pred = np.asarray(pred, dtype=np.float64)
    targets = [np.asarray(t, dtype=np.float64) for t in target_doas]
    if not targets:
        return geometry.lp_norm(pred, LOSS_P)
    return min(geometry.lp_norm(t - pred, LOSS_P) for t in targets)


def focal_loss(gt_class: int, probs, gamma: float = 1.0) -> float:
    """Focal loss -(1-p)^gamma ln(p) on the ground-truth class probability.

    gamma=0 reduces to cross-entropy. p is clamped to [1e-7, 1].
    """
    p = float(np.clip(np.asarray(probs, dtype=np.float64)[gt_class], FOCAL_PROB_FLOOR, 1.0))
    return -((1.0 - p) ** gamma) * math.log(p)


# ---------------------------------------------------------------------------
# bucket bookkeeping

def bucket_count(n_tracks: int) -> int:
    """(r, k) pairs with 0 <= r <= k <= N-1 plus the shared empty-target bucket."""
    return n_tracks * (n_tracks + 1) // 2 + 1


def bucket_id(r: int, k: int, n_tracks: int) -> int:
    """Flat index of bucket (r, k); pass k < r (any values) for the empty bucket."""
    if k < r:
        return n_tracks * (n_tracks + 1) // 2
    if not 0 <= r <= k < n_tracks:
        raise ValueError(f"bucket ({r}, {k}) out of range for N={n_tracks}")
    return k * (k + 1) // 2 + r


def bucket_name(index: int, n_tracks: int) -> str:
    if index == n_tracks * (n_tracks + 1) // 2:
        return "empty"
    for k in range(n_tracks):
        for r in range(k + 1):
            if k * (k + 1) // 2 + r == index:
                return f"r{r}k{k}"
    raise ValueError(f"no bucket {index} for N={n_tracks}")


# ---------------------------------------------------------------------------
# torch batch losses

def lp_norm_torch(x: torch.Tensor, p: float = LOSS_P, dim: int = -1) -> torch.Tensor:
    s = x.abs().pow(p).sum(dim=dim)
    return s.clamp_min(_NORM_GUARD).pow(1.0 / p)


def _frame_losses(preds, cells, r_values, n_classes):
    """Per-frame losses and bucket ids for a localizer batch.

    preds (B, T, 3), cells (B, N, T, 4) stacked-tracks tensors, r_values (B,).
    Returns (frame_losses (B*T,), bucket_ids (B*T,) long, n_buckets).
    """
    b, n, t, _ = cells.shape
    doas = cells[..., :3]
    active = cells[..., 3] < n_classes  # (B, N, T)
    n_act = active.sum(dim=1)  # (B, T)
    k_last = n_act - 1

    dist = lp_norm_torch(preds[:, None, :, :] - doas)  # (B, N, T)
    rows = torch.arange(n, device=preds.device)[None, :, None]
    target_mask = active & (rows >= r_values[:, None, None])
    has_target = target_mask.any(dim=1)  # (B, T)
    dist = dist.masked_fill(~target_mask, float("inf"))
    min_dist = dist.min(dim=1).values
    zero_loss = lp_norm_torch(preds)
    frame_losses = torch.where(has_target, min_dist, zero_loss)

    tri = (k_last * (k_last + 1)) // 2 + r_values[:, None]
    empty_idx = n * (n + 1) // 2
    buckets = torch.where(has_target, tri, torch.full_like(tri, empty_idx))
    return frame_losses.reshape(-1), buckets.reshape(-1), empty_idx + 1


def localizer_batch_loss(preds, cells, r_values, n_classes) -> torch.Tensor:
    """Bucket-averaged localizer loss over a pooled batch of frames.

    Frames are grouped by (r, k) where k is the last active row index (the
    shared empty bucket collects k < r); the loss is the sum of per-bucket
    means times 1/(N(N+1)/2 + 1). Unpopulated buckets contribute zero.
    """
    frame_losses, buckets, n_buckets = _frame_losses(preds, cells, r_values, n_classes)
    sums = torch.zeros(n_buckets, dtype=preds.dtype, device=preds.device)
    sums = sums.index_add(0, buckets, frame_losses)
    counts = torch.zeros(n_buckets, dtype=preds.dtype, device=preds.device)
    counts = counts.index_add(0, buckets, torch.ones_like(frame_losses))
    means = sums / counts.clamp_min(1.0)
    return means.sum() / n_buckets


def localizer_bucket_means(preds, cells, r_values, n_classes) -> dict:
    """Per-bucket mean frame loss for logging, keyed by bucket name."""
    with torch.no_grad():
        frame_losses, buckets, n_buckets = _frame_losses(preds, cells, r_values, n_classes)
    n = cells.shape[1]
    out = {}
    for idx in range(n_buckets):
        sel = buckets == idx
        if sel.any():
            out[bucket_name(idx, n)] = float(frame_losses[sel].mean())
    return out


def classifier_batch_loss(probs, gt_classes, gamma: float = 1.0) -> torch.Tensor:
    """Mean focal loss over all (item, frame) cells; gt class K marks no event."""
    p = probs.gather(-1, gt_classes[..., None]).squeeze(-1)
    p = p.clamp(FOCAL_PROB_FLOOR, 1.0)
    return (-((1.0 - p) ** gamma) * torch.log(p)).mean()


# ---------------------------------------------------------------------------
# functional Adam (reference form; training wraps torch.optim.Adam)

@dataclass
class AdamState:
    """First/second moment estimates mirroring a parameter list."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float = 5e-4) -> "AdamState":
        state = cls(lr=lr)
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
        return state


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update; returns new parameter arrays.

    Raises on non-finite gradients (fail fast instead of training on NaNs).
    """
    new_params = []
    state.step += 1
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {i}")
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        m_hat = state.m[i] / (1 - state.beta1**state.step)
        v_hat = state.v[i] / (1 - state.beta2**state.step)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return new_params


class AdamOptimizer:
    """torch.optim.Adam over one or more modules with a non-finite grad guard."""

    def __init__(self, modules, lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.named = []
        for mod in modules:
            self.named.extend(mod.named_parameters())
        self.opt = torch.optim.Adam([p for _, p in self.named], lr=lr, betas=betas, eps=eps)

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=True)

    def step(self):
        for name, p in self.named:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in {name}")
        self.opt.step()


# ---------------------------------------------------------------------------
# datasets and batch assembly

@dataclass
class SceneExample:
    """One cached scene: feature stack plus its stacked-tracks ground truth."""

    features: np.ndarray  # (11, t, F) float32
    tracks: StackedTracks

    def __post_init__(self):
        t = self.features.shape[1]
        if t != self.tracks.n_frames * STFT_FRAMES_PER_LABEL_FRAME:
            raise ValueError(
                f"feature frames ({t}) do not cover meta frames "
                f"({self.tracks.n_frames}) at 5 STFT frames per label frame"
            )


class SceneDataset:
    """In-memory collection of SceneExamples with uniform N and K."""

    def __init__(self, examples, n_tracks: int, n_classes: int):
        if not examples:
            raise ValueError("empty dataset")
        self.examples = list(examples)
        self.n_tracks = n_tracks
        self.n_classes = n_classes
        for ex in self.examples:
            if ex.tracks.n_tracks != n_tracks or ex.tracks.n_classes != n_classes:
                raise ValueError("inconsistent track/class counts across examples")

    def __len__(self):
        return len(self.examples)

    @classmethod
    def load(cls, feature_paths, meta_paths, n_tracks: int, n_classes: int):
        examples = []
        for fpath, mpath in zip(feature_paths, meta_paths):
            feats = load_tensor(fpath)
            events = read_meta_csv(mpath, n_classes)
            n_frames = feats.shape[1] // STFT_FRAMES_PER_LABEL_FRAME
            st = stack_tracks(events, n_tracks, n_frames, n_classes)
            examples.append(SceneExample(feats, st))
        return cls(examples, n_tracks, n_classes)


@dataclass
class LocalizerSample:
    """One training item after augmentation and conditioning-part splitting."""

    features: np.ndarray  # (11, t, F)
    cells: np.ndarray  # (N, T, 4)
    r: int  # conditioning depth in [0, N-2]
    cond_doas: np.ndarray  # (T, N, 3), rows beyond cond_counts[t] are zero
    cond_counts: np.ndarray  # (T,) int, r where row r-1 is active else 0
    spatially_augmented: bool = False


@dataclass
class ClassifierSample:
    features: np.ndarray
    cells: np.ndarray
    r: int  # selected row in [0, N-1]
    cond_doas: np.ndarray  # (T, 1, 3)
    cond_counts: np.ndarray  # (T,) in {0, 1}
    gt_classes: np.ndarray  # (T,) int, K where the row is empty
    spatially_augmented: bool = False


@dataclass
class LocalizerBatch:
    features: torch.Tensor  # (B, 11, t, F)
    cond_doas: torch.Tensor  # (B, T, N, 3)
    cond_counts: torch.Tensor  # (B, T)
    cells: torch.Tensor  # (B, N, T, 4)
    r: torch.Tensor  # (B,)
    n_classes: int
    samples: list = field(default_factory=list)


@dataclass
class ClassifierBatch:
    features: torch.Tensor
    cond_doas: torch.Tensor  # (B, T, 1, 3)
    cond_counts: torch.Tensor
    gt_classes: torch.Tensor  # (B, T)
    n_classes: int
    samples: list = field(default_factory=list)


def _augmented_chunk(dataset, rng, chunk_label_frames, spatial, volume_min, volume_max):
    """Sample a chunk and apply permutation / spatial / volume augmentations."""
    from .features import spatial_augment_features, volume_perturb_features

    ex = dataset.examples[int(rng.integers(len(dataset.examples)))]
    t_scene = ex.tracks.n_frames
    t_chunk = t_scene if chunk_label_frames is None else min(chunk_label_frames, t_scene)
    start = int(rng.integers(0, t_scene - t_chunk + 1))
    spf = STFT_FRAMES_PER_LABEL_FRAME
    feats = ex.features[:, start * spf : (start + t_chunk) * spf, :].astype(np.float64)
    chunk = StackedTracks(
        ex.tracks.cells[:, start : start + t_chunk, :].copy(), dataset.n_classes
    )

    chunk = permute_and_restack(chunk, rng)
    if spatial:
        rot = FOA_ROTATIONS[int(rng.integers(len(FOA_ROTATIONS)))]
        feats = spatial_augment_features(feats, rot)
        chunk.cells[..., :3] = chunk.cells[..., :3] @ rot.direction_matrix().T
    gain = float(rng.uniform(volume_min, volume_max))
    feats = volume_perturb_features(feats, gain)
    return feats, chunk.cells


def make_localizer_sample(
    dataset,
    rng,
    chunk_label_frames=None,
    perturb_deg: float = 5.0,
    spatial: bool = False,
    volume_min: float = 0.5,
    volume_max: float = 1.5,
) -> LocalizerSample:
    feats, cells = _augmented_chunk(
        dataset, rng, chunk_label_frames, spatial, volume_min, volume_max
    )
    n, t = cells.shape[0], cells.shape[1]
    r = int(rng.integers(0, max(n - 1, 1)))
    n_act = (cells[:, :, 3] < dataset.n_classes).sum(axis=0)  # (T,)

    cond = np.zeros((t, n, 3))
    counts = np.zeros(t, dtype=np.int64)
    if r > 0:
        full = n_act >= r  # frames where row r-1 is active get the whole part
        counts[full] = r
        if np.any(full):
            doas = cells[:r, full, :3].transpose(1, 0, 2)
            if perturb_deg > 0:
                doas = perturb_doas(doas, perturb_deg, rng)
            cond[full, :r] = doas
    return LocalizerSample(feats, cells, r, cond, counts, spatial)


def make_classifier_sample(
    dataset,
    rng,
    chunk_label_frames=None,
    perturb_deg: float = 5.0,
    spatial: bool = False,
    volume_min: float = 0.5,
    volume_max: float = 1.5,
) -> ClassifierSample:
    feats, cells = _augmented_chunk(
        dataset, rng, chunk_label_frames, spatial, volume_min, volume_max
    )
    n, t = cells.shape[0], cells.shape[1]
    r = int(rng.integers(0, n))
    classes = cells[r, :, 3].astype(np.int64)
    occupied = classes < dataset.n_classes

    cond = np.zeros((t, 1, 3))
    counts = occupied.astype(np.int64)
    if np.any(occupied):
        doas = cells[r, occupied, :3]
        if perturb_deg > 0:
            doas = perturb_doas(doas, perturb_deg, rng)
        cond[occupied, 0] = doas
    return ClassifierSample(feats, cells, r, cond, counts, classes, spatial)


def build_localizer_batch(
    dataset,
    rng,
    batch_size: int = 96,
    chunk_label_frames=None,
    perturb_deg: float = 5.0,
    spatial_every: int = 4,
    volume_min: float = 0.5,
    volume_max: float = 1.5,
) -> LocalizerBatch:
    """Assemble one localizer batch; item i is spatially augmented iff i % 4 == 0."""
    samples = [
        make_localizer_sample(
            dataset, rng, chunk_label_frames, perturb_deg,
            spatial=(spatial_every > 0 and i % spatial_every == 0),
            volume_min=volume_min, volume_max=volume_max,
        )
        for i in range(batch_size)
    ]
    return LocalizerBatch(
        features=torch.from_numpy(np.stack([s.features for s in samples])).float(),
        cond_doas=torch.from_numpy(np.stack([s.cond_doas for s in samples])).float(),
        cond_counts=torch.from_numpy(np.stack([s.cond_counts for s in samples])),
        cells=torch.from_numpy(np.stack([s.cells for s in samples])).float(),
        r=torch.tensor([s.r for s in samples], dtype=torch.long),
        n_classes=dataset.n_classes,
        samples=samples,
    )


def build_classifier_batch(
    dataset,
    rng,
    batch_size: int = 96,
    chunk_label_frames=None,
    perturb_deg: float = 5.0,
    spatial_every: int = 4,
    volume_min: float = 0.5,
    volume_max: float = 1.5,
) -> ClassifierBatch:
    samples = [
        make_classifier_sample(
            dataset, rng, chunk_label_frames, perturb_deg,
            spatial=(spatial_every > 0 and i % spatial_every == 0),
            volume_min=volume_min, volume_max=volume_max,
        )
        for i in range(batch_size)
    ]
    return ClassifierBatch(
        features=torch.from_numpy(np.stack([s.features for s in samples])).float(),
        cond_doas=torch.from_numpy(np.stack([s.cond_doas for s in samples])).float(),
        cond_counts=torch.from_numpy(np.stack([s.cond_counts for s in samples])),
        gt_classes=torch.from_numpy(np.stack([s.gt_classes for s in samples])),
        n_classes=dataset.n_classes,
        samples=samples,
    )


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    chunk_label_frames: int = 10
    learning_rate: float = 5e-4
    seed: int = 0
    perturb_deg: float = 5.0
    spatial_every: int = 4
    volume_min: float = 0.5
    volume_max: float = 1.5
    focal_gamma: float = 1.0
    log_every: int = 100
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0 < self.learning_rate < 1:
            raise ValueError("learning_rate out of range")


def train(
    component: str,
    dataset: SceneDataset,
    net: PredictorNet,
    encoder: ConditionEncoder,
    config: TrainConfig,
    checkpoint_dir=None,
    loss_curve_path=None,
):
    """Train localizer or classifier; returns [(step, loss)] history.

    Writes the loss curve as CSV rows `step,bucket,loss` (bucket `all` for
    the classifier and for the weighted localizer total). On a non-finite
    loss the last finite-loss checkpoint is saved and a RuntimeError raised.
    """
    if component not in ("localizer", "classifier"):
        raise ValueError(f"unknown component {component!r}")
    expected_head = "localizer" if component == "localizer" else "classifier"
    if net.config.head != expected_head:
        raise ValueError(f"net head {net.config.head!r} does not fit {component}")

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7121]))
    optimizer = AdamOptimizer([net, encoder], lr=config.learning_rate)
    history = []
    curve_rows = [("step", "bucket", "loss")]
    last_good = None

    def snapshot():
        return (
            {k: v.detach().clone() for k, v in net.state_dict().items()},
            {k: v.detach().clone() for k, v in encoder.state_dict().items()},
        )

    def save(path):
        save_checkpoint(path, net, encoder)

    last_good = snapshot()
    for step in range(1, config.steps + 1):
        if component == "localizer":
            batch = build_localizer_batch(
                dataset, rng, config.batch_size, config.chunk_label_frames,
                config.perturb_deg, config.spatial_every,
                config.volume_min, config.volume_max,
            )
            preds = forward_frame_conditioned(
                net, encoder, batch.features, batch.cond_doas, batch.cond_counts
            )
            loss = localizer_batch_loss(preds, batch.cells, batch.r, batch.n_classes)
        else:
            batch = build_classifier_batch(
                dataset, rng, config.batch_size, config.chunk_label_frames,
                config.perturb_deg, config.spatial_every,
                config.volume_min, config.volume_max,
            )
            preds = forward_frame_conditioned(
                net, encoder, batch.features, batch.cond_doas, batch.cond_counts
            )
            loss = classifier_batch_loss(preds, batch.gt_classes, config.focal_gamma)

        if not torch.isfinite(loss):
            net.load_state_dict(last_good[0])
            encoder.load_state_dict(last_good[1])
            if checkpoint_dir is not None:
                save(checkpoint_dir)
            raise RuntimeError(f"training diverged at step {step} (non-finite loss)")

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        loss_value = float(loss.detach())
        history.append((step, loss_value))

        if step % config.log_every == 0 or step == config.steps:
            last_good = snapshot()
            curve_rows.append((step, "all", f"{loss_value:.6f}"))
            if component == "localizer":
                means = localizer_bucket_means(
                    preds.detach(), batch.cells, batch.r, batch.n_classes
                )
                for name in sorted(means):
                    curve_rows.append((step, name, f"{means[name]:.6f}"))
        if (
            checkpoint_dir is not None
            and config.checkpoint_every > 0
            and step % config.checkpoint_every == 0
        ):
            save(f"{checkpoint_dir}/step{step:06d}")

    if checkpoint_dir is not None:
        save(checkpoint_dir)
    if loss_curve_path is not None:
        with open(loss_curve_path, "w", newline="") as f:
            csv.writer(f).writerows(curve_rows)
    return history
