"""Acceptance gate: eight end-to-end criteria, one printed line each.

Run with `pytest tests/test_acceptance.py -s` to see the PASS/FAIL lines as
they complete. Criterion 6 trains two small networks on 200 generated scenes
and dominates the runtime (around 20 minutes on a laptop-class CPU); all the
other criteria finish in seconds.
"""

import hashlib
import math
import os
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from coloc import cli, scenes, tracks
from coloc.features import (
    assemble_features,
    intensity_doas,
    spatial_augment,
    spatial_augment_features,
)
from coloc.geometry import FOA_ROTATIONS, angular_distance
from coloc.inference import (
    NetPredictor,
    OracleClassifier,
    OracleLocalizer,
    SeldOutput,
    run_pipeline,
    to_seld_output,
)
from coloc.metrics import (
    aggregate_seld_scores,
    conditional_accuracy,
    doa_error_table,
    seld_scores,
)
from coloc.model import ConditionEncoder, NetConfig, PredictorNet, forward_frame_conditioned
from coloc.training import (
    SceneDataset,
    SceneExample,
    TrainConfig,
    bucket_count,
    classifier_batch_loss,
    focal_loss,
    localizer_batch_loss,
    localizer_bucket_means,
    localizer_frame_loss,
    train,
)
from coloc.tracks import stack_tracks

from conftest import example_events, example_expected_cells, make_truth, random_unit


def _emit(line: str) -> None:
    print(line, flush=True)


@contextmanager
def criterion(num: int, label: str):
    note = {}
    t0 = time.perf_counter()
    try:
        yield note
    except BaseException:
        _emit(f"[criterion {num}] FAIL  {label}")
        raise
    dt = time.perf_counter() - t0
    extra = f"  [{note['detail']}]" if "detail" in note else ""
    _emit(f"[criterion {num}] PASS  {label} ({dt:.1f} s){extra}")


def _angles_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle in degrees between unit-ish vectors along the last axis."""
    an = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    dots = np.clip(np.sum(an * bn, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dots))


# ---------------------------------------------------------------------------
# 1. stacking fixture


def test_criterion_1_stacking_fixture():
    with criterion(1, "stacked-tracks fixture reproduced cell-for-cell"):
        t0 = time.perf_counter()
        expected = example_expected_cells()
        assert expected.shape == (3, 8, 4)
        # the fixture's DOAs are quoted to one decimal, hence unit_tol=None
        st = stack_tracks(example_events(), 3, 8, 13, unit_tol=None)
        assert np.array_equal(st.cells, expected)
        assert time.perf_counter() - t0 < 1.0


# ---------------------------------------------------------------------------
# 2. loss oracles


def test_criterion_2_loss_oracles():
    with criterion(2, "frame/focal losses match brute force; bucket algebra"):
        rng = np.random.default_rng(20)
        n = 100_000
        counts = rng.integers(0, 4, size=n)
        targets = random_unit(rng, (n, 3))
        preds = rng.uniform(-1.0, 1.0, size=(n, 3))

        diffs = np.abs(preds[:, None, :] - targets) ** 1.5
        dists = diffs.sum(-1) ** (1 / 1.5)
        dists = np.where(np.arange(3)[None, :] < counts[:, None], dists, np.inf)
        norms = (np.abs(preds) ** 1.5).sum(-1) ** (1 / 1.5)
        want = np.where(counts > 0, dists.min(axis=1), norms)

        got = np.array(
            [localizer_frame_loss(targets[i, : counts[i]], preds[i]) for i in range(n)]
        )
        assert np.max(np.abs(got - want)) <= 1e-9

        k = 4
        probs = rng.dirichlet(np.ones(k + 1), size=10_000)
        probs[:100] = 0.0  # exercise the probability floor
        gts = rng.integers(0, k + 1, size=10_000)
        for gamma in (0.0, 1.0, 2.0):
            got_f = np.array(
                [focal_loss(g, p, gamma=gamma) for g, p in zip(gts, probs)]
            )
            pc = np.clip(probs[np.arange(10_000), gts], 1e-7, 1.0)
            want_f = -((1.0 - pc) ** gamma) * np.log(pc)
            assert np.max(np.abs(got_f - want_f)) <= 1e-12

        for n_tracks in (1, 2, 3, 4, 5):
            assert bucket_count(n_tracks) == n_tracks * (n_tracks + 1) // 2 + 1
        assert bucket_count(3) == 7

        # every one of the 7 buckets populated: total is the mean over 7
        items = [(r, k2) for k2 in range(3) for r in range(k2 + 1)]
        cells = np.full((6, 3, 2, 4), [0.0, 0.0, 0.0, 4.0])
        r_values = np.zeros(6, dtype=np.int64)
        for i, (r, k2) in enumerate(items):
            r_values[i] = r
            for row in range(k2 + 1):
                cells[i, row, 0, :3] = random_unit(np.random.default_rng(i * 8 + row))
                cells[i, row, 0, 3] = 1.0
        preds6 = np.random.default_rng(9).uniform(-0.5, 0.5, size=(6, 2, 3))
        means = localizer_bucket_means(
            torch.from_numpy(preds6), torch.from_numpy(cells),
            torch.from_numpy(r_values), 4,
        )
        assert set(means) == {"r0k0", "r0k1", "r0k2", "r1k1", "r1k2", "r2k2", "empty"}
        total = localizer_batch_loss(
            torch.from_numpy(preds6), torch.from_numpy(cells),
            torch.from_numpy(r_values), 4,
        )
        assert float(total) == pytest.approx(sum(means.values()) / 7, abs=1e-9)

        # a single populated bucket still divides by 7
        cells1 = np.full((1, 3, 2, 4), [0.0, 0.0, 0.0, 4.0])
        cells1[0, 0, 0] = [1.0, 0.0, 0.0, 1.0]
        cells1[0, 0, 1] = [0.0, 1.0, 0.0, 2.0]
        preds1 = np.zeros((1, 2, 3))
        preds1[0, 0] = [0.8, 0.0, 0.0]
        preds1[0, 1] = [0.0, 0.6, 0.0]
        single = localizer_batch_loss(
            torch.from_numpy(preds1), torch.from_numpy(cells1), torch.tensor([0]), 4
        )
        assert float(single) == pytest.approx(0.3 / 7, abs=1e-9)


# ---------------------------------------------------------------------------
# 3. gradient checks


def _tiny_f64(head: str, seed: int):
    torch.manual_seed(seed)
    config = NetConfig(
        n_classes=3, head=head, cond_dim=4, conv_filters=(2, 2),
        freq_pools=(2, 2), time_pools=(5, 1), gru_hidden=4, dense_hidden=4,
        n_bins=8,
    )
    return PredictorNet(config).double(), ConditionEncoder(4).double()


def _grad_probes(net, encoder, loss_fn, n_random: int, rng) -> int:
    params = list(net.parameters()) + list(encoder.parameters())
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.detach().clone() for p in params]

    probes = []
    sizes = [p.numel() for p in params]
    enc_offset = len(list(net.parameters()))
    for _ in range(n_random):
        i = int(rng.integers(0, len(params)))
        probes.append((i, int(rng.integers(0, sizes[i]))))
    for i in range(enc_offset, len(params)):  # cover the whole encoder path
        probes.extend((i, j) for j in range(sizes[i]))

    h = 1e-5
    checked = 0
    with torch.no_grad():
        for i, j in probes:
            flat = params[i].data.view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            up = float(loss_fn())
            flat[j] = orig - h
            down = float(loss_fn())
            flat[j] = orig
            fd = (up - down) / (2 * h)
            analytic = float(grads[i].view(-1)[j])
            denom = max(abs(analytic), abs(fd))
            if denom < 1e-7:
                assert abs(analytic - fd) < 1e-7
            else:
                rel = abs(analytic - fd) / denom
                assert rel < 1e-4, f"param {i}[{j}]: {analytic} vs {fd} (rel {rel:.2e})"
            checked += 1
    return checked


def test_criterion_3_gradient_checks():
    with criterion(3, "analytic gradients match central differences") as note:
        t0 = time.perf_counter()
        rng = np.random.default_rng(30)
        feats = torch.from_numpy(rng.normal(scale=0.5, size=(2, 11, 10, 8)))
        cells = np.stack(
            [make_truth(rng, n_frames=2, n_classes=3, p_active=0.7).cells for _ in range(2)]
        )
        cells_t = torch.from_numpy(cells)
        r_values = torch.tensor([0, 1])
        doa_sets = torch.from_numpy(random_unit(rng, (2, 2, 2)))
        cond_counts = torch.from_numpy(rng.integers(0, 3, size=(2, 2)))
        cond_counts[0, 0] = 2  # gradient must actually flow through the encoder

        loc_net, loc_enc = _tiny_f64("localizer", 300)

        def loc_loss():
            preds = forward_frame_conditioned(loc_net, loc_enc, feats, doa_sets, cond_counts)
            return localizer_batch_loss(preds, cells_t, r_values, 3)

        n_loc = _grad_probes(loc_net, loc_enc, loc_loss, 110, rng)

        cls_net, cls_enc = _tiny_f64("classifier", 301)
        gt = torch.from_numpy(rng.integers(0, 4, size=(2, 2)))

        def cls_loss():
            probs = forward_frame_conditioned(cls_net, cls_enc, feats, doa_sets, cond_counts)
            return classifier_batch_loss(probs, gt, gamma=1.0)

        n_cls = _grad_probes(cls_net, cls_enc, cls_loss, 30, rng)

        assert n_loc >= 100
        elapsed = time.perf_counter() - t0
        assert elapsed < 120.0
        note["detail"] = f"{n_loc + n_cls} probes, all rel err < 1e-4"


# ---------------------------------------------------------------------------
# 4. oracle recovery


def test_criterion_4_oracle_recovery():
    with criterion(4, "oracle predictors recover every scene perfectly") as note:
        t0 = time.perf_counter()
        config = scenes.SceneConfig(
            duration_s=2.0, n_classes=6, max_overlap=3, events_min=1,
            events_max=4, event_dur_min_s=0.4, event_dur_max_s=1.5,
        )
        pairs = []
        for i in range(50):
            rng = scenes.scene_rng(777, i)
            _, events = scenes.generate_scene(config, rng)
            truth = stack_tracks(events, 3, config.n_frames, config.n_classes)
            out = run_pipeline(
                OracleLocalizer(truth), OracleClassifier(truth), None,
                mode="max_ov3", n_frames=config.n_frames,
                n_classes=config.n_classes,
            )
            assert np.array_equal(np.asarray(out.counts()), truth.frame_counts())
            pairs.append((out, to_seld_output(truth)))
        agg = aggregate_seld_scores(pairs)
        assert agg.er20 == 0.0
        assert agg.f20 == 1.0
        assert agg.le_cd == pytest.approx(0.0, abs=1e-5)
        assert agg.lr_cd == 1.0
        assert time.perf_counter() - t0 < 120.0
        note["detail"] = "50 scenes, er 0 / f 1 / le 0 / lr 1, counts exact"


# ---------------------------------------------------------------------------
# 5. signal-processing oracle


def test_criterion_5_intensity_and_rotations():
    with criterion(5, "intensity DOAs and all 16 rotations within 1 degree") as note:
        config = scenes.SceneConfig(
            duration_s=2.0, n_classes=4, max_overlap=1, events_min=1,
            events_max=1, event_dur_min_s=1.8, event_dur_max_s=1.9,
            noise_floor_db=-100.0, move_prob=0.0,
        )
        audio, events = scenes.generate_scene(config, scenes.scene_rng(55, 0))
        truth = stack_tracks(events, 1, config.n_frames, config.n_classes)
        occ = truth.occupied()[0]
        active = truth.cells[0, occ, :3]
        doa_true = active[0]
        assert np.allclose(active, doa_true)  # static source

        feats = assemble_features(audio)
        mask = feats[0] > feats[0].max() - 8.0  # strong bins of the W channel
        assert mask.sum() > 50
        errs = _angles_deg(intensity_doas(feats)[mask], doa_true)
        assert errs.max() < 1.0

        worst = 0.0
        for rot in FOA_ROTATIONS:
            target = rot.map_doa(doa_true)
            from_audio = intensity_doas(assemble_features(spatial_augment(audio, rot)))
            from_feats = intensity_doas(spatial_augment_features(feats, rot))
            e1 = _angles_deg(from_audio[mask], target).max()
            e2 = _angles_deg(from_feats[mask], target).max()
            worst = max(worst, e1, e2)
            assert e1 < 1.0 and e2 < 1.0, rot.name
        note["detail"] = f"worst rotated-bin error {worst:.3f} deg"


# ---------------------------------------------------------------------------
# 6. desk-scale learning


def _median_empty_cond_error(predictor, examples) -> float:
    errs = []
    for ex in examples:
        truth = ex.tracks
        t_frames = truth.n_frames
        cond = np.zeros((t_frames, truth.n_tracks, 3))
        counts = np.zeros(t_frames, dtype=np.int64)
        preds = np.asarray(predictor.predict(ex.features, cond, counts))
        single = truth.frame_counts() == 1
        for t in np.nonzero(single)[0]:
            if np.linalg.norm(preds[t]) == 0:
                errs.append(180.0)
            else:
                errs.append(angular_distance(preds[t], truth.cells[0, t, :3]))
    return float(np.median(errs))


@pytest.mark.slow
def test_criterion_6_desk_scale_learning():
    with criterion(6, "small nets learn localization and classification") as note:
        t0 = time.perf_counter()
        k = 4
        n = 3
        config = scenes.SceneConfig(
            duration_s=2.0, n_classes=k, max_overlap=2, events_min=1,
            events_max=3, event_dur_min_s=0.4, event_dur_max_s=1.5,
        )

        def split(count, offset):
            examples = []
            for i in range(count):
                rng = scenes.scene_rng(123, offset + i)
                audio, events = scenes.generate_scene(config, rng)
                st = stack_tracks(events, n, config.n_frames, k)
                examples.append(SceneExample(assemble_features(audio), st))
            return examples

        train_examples = split(180, 0)
        eval_examples = split(20, 1_000_000)
        dataset = SceneDataset(train_examples, n, k)

        torch.manual_seed(1)
        loc_net = PredictorNet(NetConfig(n_classes=k, head="localizer"))
        loc_enc = ConditionEncoder(5)
        train(
            "localizer", dataset, loc_net, loc_enc,
            TrainConfig(steps=1500, batch_size=16, chunk_label_frames=10,
                        seed=5, log_every=500),
        )
        loc_pred = NetPredictor(loc_net, loc_enc)

        median = _median_empty_cond_error(loc_pred, eval_examples)
        table = doa_error_table(loc_pred, eval_examples)
        e20 = table.mean(2, 0)
        e21 = table.mean(2, 1)
        assert median <= 30.0, f"median single-source error {median:.1f} deg"
        assert e21 >= e20 - 2.0, f"conditioning trend violated: {e21:.1f} vs {e20:.1f}"

        torch.manual_seed(2)
        cls_net = PredictorNet(NetConfig(n_classes=k, head="classifier"))
        cls_enc = ConditionEncoder(5)
        train(
            "classifier", dataset, cls_net, cls_enc,
            TrainConfig(steps=1000, batch_size=16, chunk_label_frames=10,
                        seed=6, log_every=500),
        )
        scores = conditional_accuracy(NetPredictor(cls_net, cls_enc), eval_examples)
        assert scores.cacc >= 0.60, f"CAcc {scores.cacc:.3f}"

        elapsed = time.perf_counter() - t0
        assert elapsed < 1800.0
        note["detail"] = (
            f"median(1,0) {median:.1f} deg, mean(2,0) {e20:.1f}, "
            f"mean(2,1) {e21:.1f}, CAcc {scores.cacc:.2f}"
        )


# ---------------------------------------------------------------------------
# 7. metrics suite


def test_criterion_7_metrics_suite():
    with criterion(7, "hand-computed SELD scores and score properties"):
        x = np.array([1.0, 0.0, 0.0])
        ref = SeldOutput([[(1, x)] for _ in range(10)], 4)

        s = seld_scores(ref, ref)
        assert (s.er20, s.f20, s.le_cd, s.lr_cd) == (0.0, 1.0, 0.0, 1.0)

        s = seld_scores(SeldOutput([[] for _ in range(10)], 4), ref)
        assert (s.er20, s.f20, s.lr_cd) == (1.0, 0.0, 0.0)
        assert math.isnan(s.le_cd)

        off25 = np.array([math.cos(math.radians(25.0)), math.sin(math.radians(25.0)), 0.0])
        s = seld_scores(SeldOutput([[(1, off25)] for _ in range(10)], 4), ref)
        assert (s.er20, s.f20, s.lr_cd) == (1.0, 0.0, 1.0)
        assert s.le_cd == pytest.approx(25.0, abs=1e-9)

        for seed in range(20):
            truth = make_truth(np.random.default_rng(seed), n_frames=30)
            full = to_seld_output(truth)
            rng = np.random.default_rng(seed + 1)
            kept, dropped = [], []
            for t, dets in enumerate(full.frames):
                row = []
                for det in dets:
                    if rng.random() < 0.6:
                        row.append(det)
                    else:
                        dropped.append((t, det))
                kept.append(row)
            pred = SeldOutput(kept, full.n_classes)

            shuffled = SeldOutput(
                [list(reversed(dets)) for dets in pred.frames], pred.n_classes
            )
            assert seld_scores(pred, full) == seld_scores(shuffled, full)

            if dropped:
                before = seld_scores(pred, full)
                t, det = dropped[0]
                frames = [list(dets) for dets in pred.frames]
                frames[t].append(det)
                after = seld_scores(SeldOutput(frames, pred.n_classes), full)
                assert after.er20 <= before.er20 + 1e-12
                assert after.f20 >= before.f20 - 1e-12
                assert after.lr_cd >= before.lr_cd - 1e-12


# ---------------------------------------------------------------------------
# 8. determinism


def test_criterion_8_byte_reproducibility(tmp_path, monkeypatch):
    with criterion(8, "two pipeline runs produce identical bytes") as note:
        args = [
            "run-all",
            "--n-scenes", "3", "--n-eval-scenes", "2", "--duration-s", "1.0",
            "--n-classes", "3", "--n-tracks", "2", "--max-overlap", "2",
            "--events-min", "1", "--events-max", "2",
            "--event-dur-min-s", "0.3", "--event-dur-max-s", "0.8",
            "--steps", "3", "--batch-size", "4", "--chunk-label-frames", "5",
            "--log-every", "1", "--seed", "11",
        ]

        def run(name):
            root = tmp_path / name
            root.mkdir()
            monkeypatch.chdir(root)
            assert cli.main(args) == 0
            hashes = {}
            for dirpath, _, files in os.walk(root):
                for fname in files:
                    full = os.path.join(dirpath, fname)
                    rel = os.path.relpath(full, root)
                    hashes[rel] = hashlib.sha256(open(full, "rb").read()).hexdigest()
            return hashes

        first = run("first")
        second = run("second")
        assert len(first) > 15  # scenes, features, checkpoints, predictions, reports
        assert first == second
        note["detail"] = f"{len(first)} artifacts checksummed"
