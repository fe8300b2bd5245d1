"""coloc command line: synth -> features -> train -> infer -> eval.

Every subcommand takes the same flat config (file via --config plus per-key
overrides) and is deterministic given the master seed: scene i draws from an
independent stream seeded by (seed, i), training streams derive from (seed,
component), and no artifact embeds a timestamp, so reruns are byte-stable.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from glob import glob
from multiprocessing import get_context

import numpy as np
import torch

from . import features as feature_lib
from . import inference, metrics, scenes, tracks, training
from .config import ExperimentConfig, coerce_value, load_config, write_config_echo
from .model import ConditionEncoder, PredictorNet, load_checkpoint
from .training import SceneDataset

log = logging.getLogger("coloc")

EVAL_SEED_OFFSET = 1_000_000
INFER_SEED_OFFSET = 2_000_000
_TRAIN_SEED_TAGS = {"localizer": 11, "classifier": 12}

_WORKER: dict = {}


def _scene_name(index: int) -> str:
    return f"scene_{index:06d}"


def _scene_dirs(config, split: str):
    sub = "scenes" if split == "train" else "eval_scenes"
    fsub = "features" if split == "train" else "eval_features"
    return os.path.join(config.data_dir, sub), os.path.join(config.data_dir, fsub)


def _split_indices(config, split: str):
    count = config.n_scenes if split == "train" else config.n_eval_scenes
    offset = 0 if split == "train" else EVAL_SEED_OFFSET
    return count, offset


def _init_worker(config):
    _WORKER.clear()
    _WORKER["config"] = config


def _run_tasks(task_fn, tasks, jobs, config):
    if jobs <= 1 or len(tasks) <= 1:
        _init_worker(config)
        return [task_fn(t) for t in tasks]
    ctx = get_context("fork")
    with ctx.Pool(jobs, initializer=_init_worker, initargs=(config,)) as pool:
        return pool.map(task_fn, tasks)


# ---------------------------------------------------------------------------
# synth

def _synth_task(task):
    split, index = task
    config: ExperimentConfig = _WORKER["config"]
    scene_dir, _ = _scene_dirs(config, split)
    _, offset = _split_indices(config, split)
    wav_path = os.path.join(scene_dir, _scene_name(index) + ".wav")
    csv_path = os.path.join(scene_dir, _scene_name(index) + ".csv")
    if os.path.exists(wav_path) and os.path.exists(csv_path):
        return f"cached {wav_path}"
    cfg = config.scene_config()
    rng = scenes.scene_rng(config.seed, offset + index)
    audio, events = scenes.generate_scene(cfg, rng)
    scenes.write_scene_wav(wav_path, audio, cfg.sample_rate)
    tracks.write_meta_csv(events, csv_path)
    return f"wrote {wav_path}"


def cmd_synth(config: ExperimentConfig, jobs: int = 1) -> int:
    tasks = []
    for split in ("train", "eval"):
        scene_dir, _ = _scene_dirs(config, split)
        os.makedirs(scene_dir, exist_ok=True)
        count, _ = _split_indices(config, split)
        tasks.extend((split, i) for i in range(count))
    for message in _run_tasks(_synth_task, tasks, jobs, config):
        log.info("synth: %s", message)
    manifest = {
        "format": "coloc-dataset-v1",
        "master_seed": config.seed,
        "n_scenes": config.n_scenes,
        "n_eval_scenes": config.n_eval_scenes,
        "eval_seed_offset": EVAL_SEED_OFFSET,
        "duration_s": config.duration_s,
        "n_classes": config.n_classes,
        "max_overlap": config.max_overlap,
    }
    with open(os.path.join(config.data_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    write_config_echo(config, os.path.join(config.data_dir, "config.echo"))
    log.info("synth: dataset ready in %s", config.data_dir)
    return 0


# ---------------------------------------------------------------------------
# features

def _features_task(task):
    wav_path, out_path = task
    if os.path.exists(out_path):
        feature_lib.load_tensor(out_path)  # raises naming the file if corrupt
        return f"cached {out_path}"
    audio, sr = scenes.read_scene_wav(wav_path)
    if sr != feature_lib.SAMPLE_RATE:
        raise ValueError(f"{wav_path}: sample rate {sr}, expected {feature_lib.SAMPLE_RATE}")
    feature_lib.save_tensor(out_path, feature_lib.assemble_features(audio))
    return f"wrote {out_path}"


def cmd_features(config: ExperimentConfig, jobs: int = 1) -> int:
    tasks = []
    for split in ("train", "eval"):
        scene_dir, feat_dir = _scene_dirs(config, split)
        wavs = sorted(glob(os.path.join(scene_dir, "scene_*.wav")))
        if not wavs and _split_indices(config, split)[0] > 0:
            raise FileNotFoundError(f"no scenes in {scene_dir}; run synth first")
        os.makedirs(feat_dir, exist_ok=True)
        for wav_path in wavs:
            stem = os.path.splitext(os.path.basename(wav_path))[0]
            tasks.append((wav_path, os.path.join(feat_dir, stem + ".ten")))
    for message in _run_tasks(_features_task, tasks, jobs, config):
        log.info("features: %s", message)
    return 0


# ---------------------------------------------------------------------------
# training

def _component_seed(config: ExperimentConfig, component: str) -> int:
    tag = _TRAIN_SEED_TAGS[component]
    return int(np.random.SeedSequence([config.seed, tag]).generate_state(1)[0])


def _load_dataset(config: ExperimentConfig, split: str) -> SceneDataset:
    scene_dir, feat_dir = _scene_dirs(config, split)
    feature_paths = sorted(glob(os.path.join(feat_dir, "scene_*.ten")))
    if not feature_paths:
        raise FileNotFoundError(f"no feature cache in {feat_dir}; run features first")
    meta_paths = []
    for fpath in feature_paths:
        stem = os.path.splitext(os.path.basename(fpath))[0]
        mpath = os.path.join(scene_dir, stem + ".csv")
        if not os.path.exists(mpath):
            raise FileNotFoundError(f"missing meta {mpath} for {fpath}")
        meta_paths.append(mpath)
    return SceneDataset.load(feature_paths, meta_paths, config.n_tracks, config.n_classes)


def cmd_train(config: ExperimentConfig, component: str) -> int:
    dataset = _load_dataset(config, "train")
    head = "localizer" if component == "localizer" else "classifier"
    seed = _component_seed(config, component)
    torch.manual_seed(seed)
    net = PredictorNet(config.net_config(head))
    encoder = ConditionEncoder(config.cond_dim)
    ckpt_dir = os.path.join(config.checkpoint_dir, component)
    log.info(
        "train %s: %d scenes, %d steps, batch %d, seed stream %d",
        component, len(dataset), config.steps, config.batch_size, seed,
    )
    training.train(
        component,
        dataset,
        net,
        encoder,
        config.train_config(seed),
        checkpoint_dir=ckpt_dir,
        loss_curve_path=os.path.join(ckpt_dir, "loss_curve.csv"),
    )
    write_config_echo(config, os.path.join(ckpt_dir, "config.echo"))
    log.info("train %s: checkpoint in %s", component, ckpt_dir)
    return 0


# ---------------------------------------------------------------------------
# inference

def _load_predictors(config: ExperimentConfig):
    loc = load_checkpoint(os.path.join(config.checkpoint_dir, "localizer"))
    cls = load_checkpoint(os.path.join(config.checkpoint_dir, "classifier"))
    return inference.NetPredictor(*loc), inference.NetPredictor(*cls)


def _infer_task(task):
    feature_path, out_path, scene_index = task
    config: ExperimentConfig = _WORKER["config"]
    if "predictors" not in _WORKER:
        _WORKER["predictors"] = _load_predictors(config)
    loc_pred, cls_pred = _WORKER["predictors"]
    feats = feature_lib.load_tensor(feature_path)
    rng = None
    if config.infer_perturb_deg > 0:
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, INFER_SEED_OFFSET + scene_index])
        )
    st = inference.ssg_localize(
        loc_pred,
        feats,
        n_classes=config.n_classes,
        max_steps=inference.INFERENCE_MODES[config.mode],
        threshold=config.threshold,
        perturb_deg=config.infer_perturb_deg,
        rng=rng,
    )
    st = inference.classify_tracks(
        cls_pred, feats, st, perturb_deg=config.infer_perturb_deg, rng=rng
    )
    tracks.write_meta_csv(inference.stacked_to_events(st), out_path)
    return f"wrote {out_path}"


def cmd_infer(config: ExperimentConfig, jobs: int = 1) -> int:
    _, feat_dir = _scene_dirs(config, "eval")
    feature_paths = sorted(glob(os.path.join(feat_dir, "scene_*.ten")))
    if not feature_paths:
        raise FileNotFoundError(f"no eval features in {feat_dir}; run features first")
    pred_dir = os.path.join(config.output_dir, "predictions")
    os.makedirs(pred_dir, exist_ok=True)
    tasks = []
    for i, fpath in enumerate(feature_paths):
        stem = os.path.splitext(os.path.basename(fpath))[0]
        tasks.append((fpath, os.path.join(pred_dir, stem + ".csv"), i))
    for message in _run_tasks(_infer_task, tasks, jobs, config):
        log.info("infer: %s", message)
    write_config_echo(config, os.path.join(config.output_dir, "config.echo"))
    return 0


# ---------------------------------------------------------------------------
# evaluation

def cmd_eval(config: ExperimentConfig, jobs: int = 1) -> int:
    scene_dir, feat_dir = _scene_dirs(config, "eval")
    meta_paths = sorted(glob(os.path.join(scene_dir, "scene_*.csv")))
    if not meta_paths:
        raise FileNotFoundError(f"no eval meta in {scene_dir}; run synth first")
    pred_dir = os.path.join(config.output_dir, "predictions")
    os.makedirs(config.output_dir, exist_ok=True)

    n_frames = round(config.duration_s * scenes.LABEL_FPS)
    pairs = []
    for mpath in meta_paths:
        stem = os.path.splitext(os.path.basename(mpath))[0]
        ppath = os.path.join(pred_dir, stem + ".csv")
        if not os.path.exists(ppath):
            raise FileNotFoundError(f"missing prediction {ppath}; run infer first")
        ref_events = tracks.read_meta_csv(mpath, config.n_classes)
        pred_events = tracks.read_meta_csv(ppath, config.n_classes)
        pairs.append(
            (
                inference.events_to_seld_output(pred_events, n_frames, config.n_classes),
                inference.events_to_seld_output(ref_events, n_frames, config.n_classes),
            )
        )
    scores = metrics.aggregate_seld_scores(pairs)
    metrics.write_scores_csv(scores, os.path.join(config.output_dir, "scores.csv"))

    dataset = _load_dataset(config, "eval")
    loc_pred, cls_pred = _load_predictors(config)
    table = metrics.doa_error_table(loc_pred, dataset.examples)
    metrics.write_doa_error_csv(table, os.path.join(config.output_dir, "doa_error.csv"))
    cls_scores = metrics.conditional_accuracy(cls_pred, dataset.examples)
    with open(os.path.join(config.output_dir, "classifier.csv"), "w") as f:
        f.write("metric,value\n")
        f.write(f"cacc,{cls_scores.cacc:.6f}\n")
        f.write(f"miss_rate,{cls_scores.miss_rate:.6f}\n")
        f.write(f"false_alarm_rate,{cls_scores.false_alarm_rate:.6f}\n")

    report = [
        "localizer DOA error by conditioning (degrees):",
        metrics.format_doa_error_table(table),
        "",
        f"classifier conditional accuracy: {100 * cls_scores.cacc:.1f}% "
        f"(miss {100 * cls_scores.miss_rate:.1f}%, "
        f"false alarm {100 * cls_scores.false_alarm_rate:.1f}%)",
        "",
        metrics.format_scores_report({config.mode: scores}),
    ]
    text = "\n".join(report)
    with open(os.path.join(config.output_dir, "report.txt"), "w") as f:
        f.write(text + "\n")
    print(text)
    write_config_echo(config, os.path.join(config.output_dir, "config.echo"))
    return 0


def cmd_run_all(config: ExperimentConfig, jobs: int = 1) -> int:
    cmd_synth(config, jobs)
    cmd_features(config, jobs)
    cmd_train(config, "localizer")
    cmd_train(config, "classifier")
    cmd_infer(config, jobs)
    return cmd_eval(config, jobs)


# ---------------------------------------------------------------------------
# argument parsing

def _add_common_args(parser: argparse.ArgumentParser):
    parser.add_argument("--config", metavar="FILE", help="key = value config file")
    parser.add_argument(
        "--jobs", type=int, default=1, help="worker processes for per-scene stages"
    )
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(ExperimentConfig):
        default = getattr(ExperimentConfig(), f.name)
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        group.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f"cfg_{f.name}",
            metavar="V",
            help=f"config key {f.name} (default: {default})",
        )


def _config_from_args(args) -> ExperimentConfig:
    overrides = {}
    for key, raw in vars(args).items():
        if key.startswith("cfg_") and raw is not None:
            name = key[4:]
            overrides[name] = coerce_value(name, raw)
    return load_config(args.config, overrides)


_COMMANDS = {
    "synth": "generate the synthetic FOA dataset (WAV + meta CSV)",
    "features": "extract and cache 11-channel feature tensors",
    "train-loc": "train the conditioned localizer",
    "train-cls": "train the conditioned classifier",
    "infer": "run the sequential localization + classification pipeline",
    "eval": "score predictions and print the report tables",
    "run-all": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coloc",
        description="two-stage sound event localization and detection "
        "(conditioned localizer + classifier)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMANDS.items():
        _add_common_args(sub.add_parser(name, help=help_text))
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    args = build_parser().parse_args(argv)
    config = _config_from_args(args)
    if args.command == "synth":
        return cmd_synth(config, args.jobs)
    if args.command == "features":
        return cmd_features(config, args.jobs)
    if args.command == "train-loc":
        return cmd_train(config, "localizer")
    if args.command == "train-cls":
        return cmd_train(config, "classifier")
    if args.command == "infer":
        return cmd_infer(config, args.jobs)
    if args.command == "eval":
        return cmd_eval(config, args.jobs)
    if args.command == "run-all":
        return cmd_run_all(config, args.jobs)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
