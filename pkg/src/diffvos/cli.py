"""Command-line harness.

Five subcommands cover the full workflow:

  pretrain   codec reconstruction + denoising pretraining; saves backbone
             checkpoints and loss curves
  train      referring segmentation on top of a frozen backbone (auto-runs
             the pretraining when no checkpoint directory is supplied)
  eval       score a saved model on the held-out split
  ablate     conditioning/fusion grids, the extraction-step sweep and the
             multi-seed temporal-stability comparison
  analyze    feature clustering, ROI drift, brightness robustness and
             stability statistics for a saved model

Every run writes into `<out-dir>/<run-id>/` where the run id is
`<command>-<first 10 hex of the resolved config hash>` — rerunning the same
command with the same config and seed overwrites the same directory with
byte-identical CSVs.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import reporting
from .codec import psnr
from .config import (
    FUSIONS,
    MODES,
    NOISE_MODES,
    ExperimentConfig,
    config_hash,
    from_dict,
    load_yaml,
    preset,
    save_yaml,
    to_dict,
)
from .metrics import kmeans_labels, lighting_curve, region_similarity, roi_similarity_decay
from .model import RvosModel, load_checkpoint, save_checkpoint
from .train import (
    LOSS_HEADER,
    EvalResult,
    build_rvos_model,
    evaluate,
    make_dataset,
    predict_video,
    train_backbone,
    train_rvos,
)

STEP_SWEEP = (1, 5, 10, 50, 100)
TEMPORAL_SEEDS = 3


def _log(msg: str) -> None:
    print(msg, flush=True)


def run_id(command: str, cfg: ExperimentConfig) -> str:
    return f"{command}-{config_hash(cfg)[:10]}"


def prepare_run_dir(out_dir, command: str, cfg: ExperimentConfig) -> Path:
    run = Path(out_dir) / run_id(command, cfg)
    run.mkdir(parents=True, exist_ok=True)
    save_yaml(cfg, run / "resolved_config.yaml")
    return run


# -- pretrain --------------------------------------------------------------------


def _codec_psnr(codec, samples) -> float:
    with torch.no_grad():
        values = []
        for sample in samples:
            frames = torch.from_numpy(sample.frames)
            values.append(psnr(frames, codec.decode(codec.encode_latents(frames))))
    return float(np.mean(values))


def run_pretrain(cfg: ExperimentConfig, run: Path):
    chash = config_hash(cfg)
    train_samples = make_dataset(cfg, "train")
    t0 = time.time()
    codec_state, gen_states, history, log = train_backbone(cfg, train_samples)
    _log(f"backbone pretraining finished in {time.time() - t0:.0f}s")

    torch.save({"codec": codec_state}, run / "codec.pt")
    torch.save(gen_states, run / "generator.pt")

    reporting.write_csv(
        run / "pretrain_codec_loss.csv", ("step", "loss"), list(enumerate(history)), chash
    )
    reporting.write_csv(
        run / "pretrain_generator_loss.csv", ("step", "loss"), list(enumerate(log.history)), chash
    )

    probe = RvosModel(cfg.unet, cfg.head)
    probe.codec.load_state_dict(codec_state)
    heldout = _codec_psnr(probe.codec, make_dataset(cfg, "eval")[: max(4, cfg.pretrain.val_videos)])
    summary_rows = [
        ("codec_final_loss", history[-1]),
        ("codec_heldout_psnr_db", heldout),
        ("generator_val_before", log.val_before),
        ("generator_val_after", log.val_after),
        ("generator_val_drop_ratio", log.drop_ratio),
    ]
    reporting.write_csv(run / "pretrain_summary.csv", ("key", "value"), summary_rows, chash)
    reporting.plot_series(
        run / "codec_loss.png",
        range(len(history)),
        {"reconstruction L2": history},
        xlabel="step",
        ylabel="loss",
        title="codec pretraining",
        config_hash=chash,
    )
    reporting.plot_series(
        run / "generator_loss.png",
        range(len(log.history)),
        {"denoising MSE": log.history},
        xlabel="step",
        ylabel="loss",
        title="generator pretraining",
        config_hash=chash,
    )
    _log(f"codec held-out PSNR {heldout:.2f} dB; denoise val {log.val_before:.4f} -> {log.val_after:.4f}")
    return codec_state, gen_states


def load_backbone(checkpoints) -> tuple[dict, dict]:
    cdir = Path(checkpoints)
    codec_blob = torch.load(cdir / "codec.pt", weights_only=True)
    gen_blob = torch.load(cdir / "generator.pt", weights_only=True)
    return codec_blob["codec"], gen_blob


def ensure_backbone(cfg: ExperimentConfig, run: Path, checkpoints) -> tuple[dict, dict]:
    if checkpoints is not None:
        return load_backbone(checkpoints)
    _log("no --checkpoints supplied; pretraining the backbone first")
    return run_pretrain(cfg, run)


# -- train -----------------------------------------------------------------------


def _write_eval(run: Path, result: EvalResult, chash: str, *, stem: str = "metrics") -> None:
    reporting.write_csv(run / f"{stem}.csv", EvalResult.HEADER, result.rows, chash)
    summary_rows = sorted(result.summary.items())
    reporting.write_csv(run / f"{stem}_summary.csv", ("metric", "value"), summary_rows, chash)


def run_train(cfg: ExperimentConfig, run: Path, checkpoints=None):
    chash = config_hash(cfg)
    codec_state, gen_states = ensure_backbone(cfg, run, checkpoints)
    model = build_rvos_model(cfg, codec_state, gen_states)
    train_samples = make_dataset(cfg, "train")
    eval_samples = make_dataset(cfg, "eval")

    t0 = time.time()
    log = train_rvos(
        cfg,
        model,
        train_samples,
        eval_samples,
        progress=lambda step, loss: _log(f"  step {step}/{cfg.train.steps} loss {loss:.4f}"),
    )
    _log(f"referring training finished in {time.time() - t0:.0f}s")

    reporting.write_csv(run / "loss.csv", LOSS_HEADER, log.loss_rows, chash)
    reporting.write_csv(run / "snapshots.csv", ("step", "jf"), log.snapshots, chash)
    reporting.plot_series(
        run / "loss.png",
        [r[0] for r in log.loss_rows],
        {"total": [r[2] for r in log.loss_rows], "mask": [r[4] for r in log.loss_rows]},
        xlabel="step",
        ylabel="loss",
        title="referring training loss",
        config_hash=chash,
    )

    result = evaluate(model, eval_samples, cfg)
    _write_eval(run, result, chash)
    save_checkpoint(run / "model.pt", model, extra={"config": to_dict(cfg), "summary": result.summary})
    for key in ("j", "f", "jf", "map", "hq_ratio", "iou_diff_1"):
        _log(f"{key}={result.summary[key]:.2f}")
    return model, result


# -- eval ------------------------------------------------------------------------


def run_eval(cfg: ExperimentConfig, run: Path, model_path):
    chash = config_hash(cfg)
    model, _ = load_checkpoint(model_path)
    eval_samples = make_dataset(cfg, "eval")
    result = evaluate(model, eval_samples, cfg)
    _write_eval(run, result, chash)

    frame_rows = []
    for (video_id, _, _, _), ious, scores in zip(result.rows, result.frame_ious, result.frame_scores):
        for t, (iou, score) in enumerate(zip(ious, scores)):
            frame_rows.append((video_id, t, iou, score))
    reporting.write_csv(run / "frame_ious.csv", ("video_id", "frame", "iou", "score"), frame_rows, chash)
    reporting.plot_series(
        run / "per_video_jf.png",
        range(len(result.rows)),
        {"J&F": [row[3] for row in result.rows]},
        xlabel="video index",
        ylabel="J&F",
        title="per-video scores",
        config_hash=chash,
    )
    for key in ("j", "f", "jf", "map", "hq_ratio", "iou_diff_1", "iou_diff_5"):
        _log(f"{key}={result.summary[key]:.2f}")
    return result


# -- ablate ----------------------------------------------------------------------

# Conditioning grid rows: which prompt inputs are enabled and whether the
# noise predictor replaces the unconditional gaussian baseline.
_COMPONENT_ARMS = {
    "I": {"mode": "I", "noise": "gaussian"},
    "T": {"mode": "T", "noise": "gaussian"},
    "IT": {"mode": "IT", "noise": "gaussian"},
    "IT+NP": {"mode": "IT", "noise": "predicted"},
}


def _arm_config(base: ExperimentConfig, **overrides) -> ExperimentConfig:
    return dataclasses.replace(base, **overrides)


def _trainable_count(model: RvosModel) -> int:
    return sum(p.numel() for p in model.trainable_parameters())


def _jf_triplet(summary: dict) -> tuple[float, float, float]:
    return (summary["jf"], summary["j"], summary["f"])


def run_ablate(cfg: ExperimentConfig, run: Path, checkpoints=None):
    chash = config_hash(cfg)
    train_samples = make_dataset(cfg, "train")
    eval_samples = make_dataset(cfg, "eval")
    codec_state, gen_states = ensure_backbone(cfg, run, checkpoints)

    def train_arm(arm_cfg: ExperimentConfig, backbone=None):
        states = backbone or (codec_state, gen_states)
        model = build_rvos_model(arm_cfg, *states)
        train_rvos(arm_cfg, model, train_samples)
        return model, evaluate(model, eval_samples, arm_cfg).summary

    # conditioning grid --------------------------------------------------------
    component_results: dict[str, tuple[float, float, float]] = {}
    component_rows = []
    models: dict[str, RvosModel] = {}
    summaries: dict[str, dict] = {}
    for row, overrides in _COMPONENT_ARMS.items():
        t0 = time.time()
        arm = _arm_config(cfg, **overrides)
        model, summary = train_arm(arm)
        models[row], summaries[row] = model, summary
        component_results[row] = _jf_triplet(summary)
        img, txt, np_on = reporting.component_flags(row)
        component_rows.append(
            (row, img, txt, np_on, summary["j"], summary["f"], summary["jf"], reporting.REFERENCE_COMPONENTS[row][0])
        )
        _log(f"arm {row}: J&F {summary['jf']:.2f} ({time.time() - t0:.0f}s)")
    reporting.write_csv(
        run / "components.csv",
        ("row", "image_cond", "text_cond", "noise_pred", "j", "f", "jf", "published_jf"),
        component_rows,
        chash,
    )
    (run / "components.txt").write_text(reporting.format_components_table(component_results))

    # prompt-fusion grid -------------------------------------------------------
    t0 = time.time()
    concat_cfg = _arm_config(cfg, mode="IT", noise="predicted", fusion="concat")
    concat_model, concat_summary = train_arm(concat_cfg)
    _log(f"arm IT+NP/concat: J&F {concat_summary['jf']:.2f} ({time.time() - t0:.0f}s)")
    fusion_results = {
        ("I", "-"): component_results["I"],
        ("T", "-"): component_results["T"],
        ("IT", "concat"): _jf_triplet(concat_summary),
        ("IT", "attention"): component_results["IT+NP"],
    }
    params = {"attention": _trainable_count(models["IT+NP"]), "concat": _trainable_count(concat_model)}
    if params["attention"] != params["concat"]:
        raise RuntimeError(f"fusion arms have unequal trainable parameter counts: {params}")
    fusion_rows = [
        (mode, fusion, params.get(fusion, ""), *fusion_results[(mode, fusion)][1:], fusion_results[(mode, fusion)][0], reporting.REFERENCE_FUSION[(mode, fusion)][0])
        for mode, fusion in reporting.REFERENCE_FUSION
    ]
    reporting.write_csv(
        run / "fusion.csv",
        ("mode", "fusion", "trainable_params", "j", "f", "jf", "published_jf"),
        fusion_rows,
        chash,
    )
    (run / "fusion.txt").write_text(reporting.format_fusion_table(fusion_results, params))

    # extraction-step sweep ------------------------------------------------------
    # Evaluation-only sweep on the strongest arm; the cumulative-product
    # (variance-preserving) schedule is what makes larger steps inject
    # progressively more noise.
    step_results: dict[int, tuple[float, float, float]] = {}
    step_rows = []
    for step in STEP_SWEEP:
        summary = evaluate(models["IT+NP"], eval_samples, cfg, step=step, convention="sqrt").summary
        step_results[step] = _jf_triplet(summary)
        step_rows.append((step, summary["j"], summary["f"], summary["jf"], reporting.REFERENCE_STEPS[step][0]))
    reporting.write_csv(run / "steps.csv", ("step", "j", "f", "jf", "published_jf"), step_rows, chash)
    (run / "steps.txt").write_text(reporting.format_step_table(step_results))
    reporting.plot_series(
        run / "steps.png",
        list(STEP_SWEEP),
        {"J&F": [step_results[s][0] for s in STEP_SWEEP]},
        xlabel="extraction step",
        ylabel="J&F",
        title="feature-extraction step sweep",
        config_hash=chash,
    )
    _log("step sweep: " + ", ".join(f"{s}:{step_results[s][0]:.2f}" for s in STEP_SWEEP))

    # temporal stability across seeds -------------------------------------------
    temporal_rows = []
    means: dict[str, list[float]] = {"IT": [], "I": []}
    for offset in range(TEMPORAL_SEEDS):
        seed = cfg.seed + offset
        if offset == 0:
            backbone = (codec_state, gen_states)
        else:
            seed_cfg = _arm_config(cfg, seed=seed)
            t0 = time.time()
            c_state, g_states, _, _ = train_backbone(seed_cfg, train_samples)
            backbone = (c_state, g_states)
            _log(f"seed {seed} backbone pretrained ({time.time() - t0:.0f}s)")
        for row in ("IT", "I"):
            if offset == 0 and row == "IT":
                summary = summaries["IT+NP"]
            elif offset == 0 and row == "I":
                summary = summaries["I"]
            else:
                arm = _arm_config(cfg, seed=seed, **_COMPONENT_ARMS["IT+NP" if row == "IT" else "I"])
                _, summary = train_arm(arm, backbone)
            means[row].append(summary["iou_diff_1"])
            temporal_rows.append(
                (seed, row, summary["iou_diff_1"], summary["iou_diff_5"], summary["jf"])
            )
            _log(f"seed {seed} {row}: iou_diff(1) {summary['iou_diff_1']:.2f}")
    mean_it = float(np.mean(means["IT"]))
    mean_i = float(np.mean(means["I"]))
    temporal_rows.append(("mean", "IT", mean_it, float("nan"), float("nan")))
    temporal_rows.append(("mean", "I", mean_i, float("nan"), float("nan")))
    reporting.write_csv(
        run / "temporal.csv",
        ("seed", "conditioning", "iou_diff_1", "iou_diff_5", "jf"),
        temporal_rows,
        chash,
    )
    (run / "temporal.txt").write_text(
        "temporal stability: mean |IoU_t - IoU_t+1| x100 over matched seeds\n"
        f"  image+text conditioning: {mean_it:.3f}\n"
        f"  image-only conditioning: {mean_i:.3f}\n"
        f"  joint conditioning {'is' if mean_it <= mean_i else 'is NOT'} at least as stable\n"
    )

    tables = {
        "components": component_results,
        "fusion": fusion_results,
        "fusion_params": params,
        "steps": step_results,
        "temporal": {"IT": means["IT"], "I": means["I"]},
    }
    (run / "ablate_summary.txt").write_text(
        reporting.format_components_table(component_results)
        + "\n"
        + reporting.format_fusion_table(fusion_results, params)
        + "\n"
        + reporting.format_step_table(step_results)
        + "\n"
        + (run / "temporal.txt").read_text()
    )
    return tables


# -- analyze ---------------------------------------------------------------------

LIGHTING_LEVELS = (0.0, 0.1, 0.2, 0.3)


def _mean_iou_fn(model: RvosModel, cfg: ExperimentConfig):
    def eval_fn(samples) -> float:
        values = []
        for i, sample in enumerate(samples):
            masks, _ = predict_video(model, sample, cfg, noise_seed=cfg.seed + i)
            values.append(np.mean([region_similarity(m, g) for m, g in zip(masks, sample.gt_masks)]))
        return float(np.mean(values))

    return eval_fn


def extract_level_features(model: RvosModel, sample, cfg: ExperimentConfig, level: int) -> np.ndarray:
    """(T, h, w, C) features from the pyramid level with downsample `level`."""
    from .noise import ScheduleConfig

    with torch.no_grad():
        pyramid, _ = model.extract(
            torch.from_numpy(sample.frames),
            sample.expression,
            mode=cfg.mode,
            fusion=cfg.fusion,
            noise_mode=cfg.noise,
            schedule=ScheduleConfig(step=cfg.step, convention=cfg.convention),
            noise_seed=cfg.seed,
        )
    return pyramid[level].numpy()


def run_analyze(cfg: ExperimentConfig, run: Path, model_path, *, level: int = 8, kmeans_k: int = 4):
    chash = config_hash(cfg)
    model, _ = load_checkpoint(model_path)
    model.eval()
    eval_samples = make_dataset(cfg, "eval")
    roi_samples = eval_samples[: min(8, len(eval_samples))]

    # feature clustering on the first held-out clip
    features = extract_level_features(model, eval_samples[0], cfg, level)
    labels, inertia = kmeans_labels(features, kmeans_k, seed=cfg.seed)
    reporting.save_label_maps(
        run / "kmeans.png",
        labels,
        title=f"K={kmeans_k} clustering, {level}x features",
        config_hash=chash,
    )
    reporting.write_csv(run / "kmeans_inertia.csv", ("iteration", "inertia"), list(enumerate(inertia)), chash)

    # ROI feature drift over time, averaged across clips
    decays = []
    for sample in roi_samples:
        feats = extract_level_features(model, sample, cfg, level)
        decays.append(roi_similarity_decay(feats, sample.gt_masks.astype(bool)))
    decay = np.nanmean(np.stack(decays), axis=0)
    gaps = list(range(1, len(decay) + 1))
    reporting.write_csv(run / "roi_decay.csv", ("frame_gap", "cosine"), list(zip(gaps, decay)), chash)
    reporting.plot_series(
        run / "roi_decay.png",
        gaps,
        {"ROI cosine": list(decay)},
        xlabel="frame gap",
        ylabel="cosine similarity",
        title="referent feature drift",
        config_hash=chash,
    )

    # brightness-perturbation robustness
    curve = lighting_curve(_mean_iou_fn(model, cfg), eval_samples, LIGHTING_LEVELS, seed=cfg.seed)
    reporting.write_csv(run / "lighting.csv", ("level", "mean_iou"), curve, chash)
    reporting.plot_series(
        run / "lighting.png",
        [lv for lv, _ in curve],
        {"mean IoU": [v for _, v in curve]},
        xlabel="brightness jitter level",
        ylabel="mean IoU",
        title="lighting robustness",
        config_hash=chash,
    )

    # stability statistics
    result = evaluate(model, eval_samples, cfg)
    _write_eval(run, result, chash, stem="stability")
    _log(
        f"analysis: jf {result.summary['jf']:.2f}, iou_diff(1) {result.summary['iou_diff_1']:.2f}, "
        f"hq {result.summary['hq_ratio']:.2f}, lighting {curve[0][1]:.3f}->{curve[-1][1]:.3f}"
    )
    return {"curve": curve, "decay": decay, "labels": labels, "summary": result.summary}


# -- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffvos",
        description="referring video segmentation on diffusion features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML experiment config; overrides --preset")
        p.add_argument("--preset", default="desk", help="named preset when no --config is given")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default="runs")
        p.add_argument("--mode", choices=MODES, default=None, help="prompt conditioning inputs")
        p.add_argument("--fusion", choices=FUSIONS, default=None)
        p.add_argument("--noise", choices=NOISE_MODES, default=None)
        p.add_argument("--step", type=int, default=None, help="schedule step for feature extraction")

    p = sub.add_parser("pretrain", help="codec + denoising pretraining")
    common(p)

    p = sub.add_parser("train", help="referring segmentation training")
    common(p)
    p.add_argument("--checkpoints", default=None, help="directory holding codec.pt / generator.pt")

    p = sub.add_parser("eval", help="score a saved model")
    common(p)
    p.add_argument("--model", required=True, help="model checkpoint path")

    p = sub.add_parser("ablate", help="conditioning/fusion/step/stability grids")
    common(p)
    p.add_argument("--checkpoints", default=None, help="directory holding codec.pt / generator.pt")

    p = sub.add_parser("analyze", help="feature and robustness analyses for a saved model")
    common(p)
    p.add_argument("--model", required=True, help="model checkpoint path")
    p.add_argument("--level", type=int, choices=(4, 8, 16, 32), default=8, help="pyramid downsample factor for feature analyses")
    p.add_argument("--kmeans-k", type=int, default=4)
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_yaml(args.config) if args.config else preset(args.preset)
    data = to_dict(cfg)
    for name in ("seed", "mode", "fusion", "noise", "step"):
        value = getattr(args, name)
        if value is not None:
            data[name] = value
    return from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    if cfg.documentation_only:
        print(
            f"preset {cfg.preset!r} documents the full-scale recipe and is not runnable; "
            "use --preset desk or --preset quick",
            file=sys.stderr,
        )
        return 2
    run = prepare_run_dir(args.out_dir, args.command, cfg)
    _log(f"run directory: {run}")
    if args.command == "pretrain":
        run_pretrain(cfg, run)
    elif args.command == "train":
        run_train(cfg, run, checkpoints=args.checkpoints)
    elif args.command == "eval":
        run_eval(cfg, run, args.model)
    elif args.command == "ablate":
        run_ablate(cfg, run, checkpoints=args.checkpoints)
    elif args.command == "analyze":
        run_analyze(cfg, run, args.model, level=args.level, kmeans_k=args.kmeans_k)
    return 0


if __name__ == "__main__":
    sys.exit(main())
