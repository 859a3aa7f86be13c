"""Command-line surface: synth, priors, train, sample, eval, bench.

Every subcommand is deterministic under fixed flags and seeds, writes its
effective merged config next to its outputs, and maps failures onto the
exit-code contract: 0 success, 1 usage/config, 2 I/O, 3 contract/shape,
4 numerical.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import netpbm, rng as rngmod, tensor_io
from .config import FORMAT_VERSION, RunConfig
from .errors import ConfigError, ContractError, PipelineIOError, WaterflowError
from .flow import SamplerConfig, TrainConfig, Trainer, prepare_item, sample
from .imaging import DEPTH_SCALE, load_scene, save_scene, synth_scene
from .metrics import evaluate_pairs
from .net import Network, load_checkpoint, save_checkpoint
from .priors import extract_priors
from .rng import RngState


def worker_count() -> int:
    """Worker cap from WATERFLOW_THREADS; this build processes items serially,
    which satisfies any cap >= 1."""
    raw = os.environ.get("WATERFLOW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"WATERFLOW_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"WATERFLOW_THREADS must be >= 1, got {n}")
    return n


class CliParser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineIOError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _write_json(path, payload: dict) -> None:
    payload = {"format_version": FORMAT_VERSION, **payload}
    try:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise PipelineIOError(f"cannot write {path}: {exc}") from exc


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for key in ("image_size", "steps", "lr", "epochs", "batch", "accum", "seed",
                "difficulty", "prior_dropout", "bins", "threshold"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    return cfg.with_overrides(**overrides)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _ensure_dir(Path(args.out))
    if args.count < 1:
        raise ConfigError(f"count must be >= 1, got {args.count}")
    worker_count()
    size = (cfg.image_size, cfg.image_size)
    folders = []
    for i in range(args.count):
        scene, params = synth_scene(RngState(cfg.seed).stream(rngmod.SCENE, i), size, cfg.difficulty)
        name = f"scene_{i:04d}"
        save_scene(out / name, scene, params, seed=cfg.seed, index=i, difficulty=cfg.difficulty)
        folders.append(name)
    _write_json(out / "manifest.json", {
        "count": args.count,
        "seed": cfg.seed,
        "difficulty": cfg.difficulty,
        "image_size": cfg.image_size,
        "folders": folders,
    })
    cfg.with_overrides(data_dir=str(out)).save(out / "config.json")
    print(f"wrote {args.count} scenes to {out}")
    return 0


def _read_manifest(data_dir: Path) -> dict:
    path = data_dir / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise PipelineIOError(f"cannot read dataset manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path} is not valid JSON: {exc}") from exc
    for key in ("count", "seed", "difficulty", "folders"):
        if key not in manifest:
            raise ContractError(f"{path} is missing key {key!r}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported format_version {manifest.get('format_version')}")
    return manifest


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data_dir = Path(args.data)
    manifest = _read_manifest(data_dir)
    run_dir = _ensure_dir(Path(args.out))
    ckpt_path = run_dir / "checkpoint.wfck"
    log_path = run_dir / "train_log.jsonl"

    items = []
    for name in manifest["folders"]:
        scene, params, _ = load_scene(data_dir / name)
        items.append(prepare_item(scene, params=None if args.estimate_priors else params,
                                  bins=cfg.bins, stage_map=cfg.stage_map))
    if items and items[0].G.shape != (cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"dataset scenes are {items[0].G.shape} but config image_size is {cfg.image_size}"
        )

    rng = RngState(cfg.seed)
    network = Network(rng.stream(rngmod.INIT).generator(), channels=cfg.channels,
                      head_channels=cfg.head_channels, time_dim=cfg.time_dim,
                      stage_in_channels=cfg.stage_in_channels())
    tcfg = TrainConfig(lr=cfg.lr, weight_decay=cfg.weight_decay,
                       micro_batch=cfg.micro_batch, accum_steps=cfg.accum,
                       prior_dropout=cfg.prior_dropout)
    trainer = Trainer(network, items, rng, tcfg, log_path=log_path)

    fingerprint = cfg.fingerprint()
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.fingerprint != fingerprint:
            raise ContractError(
                "resume refused: checkpoint fingerprint "
                f"{ckpt.fingerprint.hex()} != config fingerprint {fingerprint.hex()}"
            )
        trainer.load_state_arrays(ckpt.arrays, ckpt.step)

    total = cfg.epochs * trainer.steps_per_epoch
    if args.max_steps is not None:
        total = min(total, args.max_steps)
    n_run = max(0, total - trainer.step_index)
    records = trainer.run(n_run)
    save_checkpoint(ckpt_path, trainer.state_arrays(), trainer.step_index, fingerprint)
    cfg.with_overrides(data_dir=str(data_dir), run_dir=str(run_dir)).save(run_dir / "config.json")
    last = records[-1]["loss_total"] if records and "loss_total" in records[-1] else None
    print(f"trained to step {trainer.step_index} ({n_run} steps this run); "
          f"last loss {last}; checkpoint {ckpt_path}")
    return 0


def _network_from_checkpoint(ckpt_file, cfg: RunConfig) -> tuple[Network, int]:
    ckpt = load_checkpoint(ckpt_file, expected_fingerprint=cfg.fingerprint())
    network = Network(RngState(cfg.seed).stream(rngmod.INIT).generator(), channels=cfg.channels,
                      head_channels=cfg.head_channels, time_dim=cfg.time_dim,
                      stage_in_channels=cfg.stage_in_channels())
    params = {k: v for k, v in ckpt.arrays.items() if not k.startswith("opt.")}
    network.store.load_arrays(params)
    return network, ckpt.step


def _collect_sample_inputs(image_path: Path) -> list[tuple[str, Path]]:
    """A single PPM file, or a dataset directory of scene folders with I.ppm."""
    if image_path.is_file():
        return [(image_path.stem, image_path)]
    if image_path.is_dir():
        pairs = []
        for sub in sorted(p for p in image_path.iterdir() if p.is_dir()):
            candidate = sub / "I.ppm"
            if candidate.exists():
                pairs.append((sub.name, candidate))
        if pairs:
            return pairs
        ppms = sorted(image_path.glob("*.ppm"))
        if ppms:
            return [(p.stem, p) for p in ppms]
        raise PipelineIOError(f"{image_path}: no scene folders or .ppm files found")
    raise PipelineIOError(f"{image_path}: no such file or directory")


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    network, _ = _network_from_checkpoint(args.checkpoint, cfg)
    out = _ensure_dir(Path(args.out))
    inputs = _collect_sample_inputs(Path(args.image))
    scfg = SamplerConfig(steps=cfg.steps, seed=cfg.seed, threshold=cfg.threshold)
    for index, (stem, path) in enumerate(inputs):
        image = netpbm.read_ppm(path)
        h, w = image.shape[1:]
        if (h, w) != (cfg.image_size, cfg.image_size):
            raise ConfigError(
                f"{path}: image is {h}x{w} but the checkpoint config says "
                f"{cfg.image_size}x{cfg.image_size}"
            )
        result = sample(network, image, scfg, index=index)
        tensor_io.write_tensor(out / f"{stem}.prob.wft1", result.prob)
        netpbm.write_pgm(out / f"{stem}.prob.pgm", result.prob[0])
        netpbm.write_pgm(out / f"{stem}.mask.pgm", result.mask[0])
        if args.diff is not None:
            alt = sample(network, image, SamplerConfig(steps=args.diff, seed=cfg.seed,
                                                       threshold=cfg.threshold), index=index)
            netpbm.write_pgm_preview(out / f"{stem}.diff.pgm", np.abs(result.prob - alt.prob)[0])
    cfg.save(out / "config.json")
    print(f"sampled {len(inputs)} image(s) with steps={cfg.steps} into {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _prediction_stems(pred_dir: Path) -> dict[str, Path]:
    preds = {}
    for p in sorted(pred_dir.glob("*.prob.wft1")):
        preds[p.name[: -len(".prob.wft1")]] = p
    if preds:
        return preds
    for p in sorted(pred_dir.glob("*.prob.pgm")):
        preds[p.name[: -len(".prob.pgm")]] = p
    if preds:
        return preds
    for p in sorted(pred_dir.glob("*.pgm")):
        preds[p.stem] = p
    return preds


def _truth_stems(gt_dir: Path) -> dict[str, Path]:
    gts = {}
    for sub in sorted(p for p in gt_dir.iterdir() if p.is_dir()):
        mask = sub / "mask.pgm"
        if mask.exists():
            gts[sub.name] = mask
    if gts:
        return gts
    for p in sorted(gt_dir.glob("*.pgm")):
        gts[p.stem] = p
    return gts


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise PipelineIOError(f"eval needs two directories, got {pred_dir} and {gt_dir}")
    preds = _prediction_stems(pred_dir)
    gts = _truth_stems(gt_dir)
    shared = sorted(set(preds) & set(gts))
    unmatched = sorted(set(preds) ^ set(gts))
    if not shared:
        raise ContractError(
            f"no filename stems shared between {pred_dir} and {gt_dir}; "
            f"predictions: {sorted(preds)}, ground truth: {sorted(gts)}"
        )
    pairs = []
    for stem in shared:
        p = preds[stem]
        prob = tensor_io.read_tensor(p) if p.suffix == ".wft1" else netpbm.read_pgm(p)
        prob = np.asarray(prob)
        if prob.ndim == 3 and prob.shape[0] == 1:
            prob = prob[0]
        pairs.append((stem, prob, netpbm.read_mask(gts[stem])))
    report = evaluate_pairs(pairs)
    payload = report.to_dict(dataset=str(gt_dir))
    if unmatched:
        payload["unmatched_stems"] = unmatched
    _write_json(args.report, payload)
    if args.csv:
        try:
            with open(args.csv, "w", newline="", encoding="utf-8") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(report.per_image[0].keys()))
                writer.writeheader()
                writer.writerows(report.per_image)
        except OSError as exc:
            raise PipelineIOError(f"cannot write CSV {args.csv}: {exc}") from exc
    print(f"evaluated {len(shared)} pairs: mae={report.mae:.6f} f_mean={report.f_mean:.6f} "
          f"s_measure={report.s_measure:.6f} e_mean={report.e_mean:.6f}")
    if unmatched:
        print(f"unmatched stems excluded: {unmatched}", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    if args.iters < 10:
        raise ConfigError(f"bench needs iters >= 10, got {args.iters}")
    cfg = _load_config(args)
    network, _ = _network_from_checkpoint(args.checkpoint, cfg)
    gen = RngState(cfg.seed).stream(rngmod.SAMPLE, 0).generator()
    image = gen.uniform(size=(3, cfg.image_size, cfg.image_size))
    scfg = SamplerConfig(steps=cfg.steps, seed=cfg.seed, threshold=cfg.threshold)
    warmup = 3
    times = []
    for i in range(args.iters):
        t0 = time.perf_counter()
        sample(network, image, scfg, index=i)
        elapsed = (time.perf_counter() - t0) * 1000.0
        if i >= warmup:
            times.append(elapsed)
    median = float(np.median(times))
    p90 = float(np.percentile(times, 90))
    payload = {
        "steps": cfg.steps,
        "iters": args.iters,
        "warmup": warmup,
        "timed": len(times),
        "median_ms": median,
        "p90_ms": p90,
        "fps": 1000.0 / median if median > 0 else float("inf"),
        "image_size": cfg.image_size,
    }
    if args.report:
        _write_json(args.report, payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# priors


def cmd_priors(args) -> int:
    image = netpbm.read_ppm(args.image)
    z = netpbm.read_pgm(args.depth) * args.depth_scale
    if image.shape[1:] != z.shape:
        raise ContractError(
            f"image dims {image.shape[1:]} and depth dims {z.shape} disagree"
        )
    out = _ensure_dir(Path(args.out))
    stack, info = extract_priors(image, z, bins=args.bins, strict=False)
    families = {
        "B": stack.B, "grad_z": stack.grad_z, "beta_D_hat": stack.beta_D_hat,
        "T_D": stack.T_D, "R": stack.R, "Var": stack.Var,
        "J_hat": stack.J_hat, "Int": stack.Int,
    }
    for name, arr in families.items():
        tensor_io.write_tensor(out / f"{name}.wft1", arr)
        netpbm.write_pgm_preview(out / f"{name}.pgm", arr)
    _write_json(out / "priors.json", {
        "A_hat": info["A_hat"],
        "low_confidence_A": info["low_confidence_A"],
        "beta_D_hat": info["beta_D_hat"],
        "bin_edges": info["bin_edges"],
        "inherited_bins": info["inherited_bins"],
        "degenerate_regression": info["degenerate_regression"],
        "depth_scale": args.depth_scale,
    })
    print(f"wrote 8 feature families + priors.json to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> CliParser:
    parser = CliParser(prog="waterflow",
                       description="Physically degraded underwater scene synthesis, "
                                   "physical priors, and rectified-flow saliency masks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset", parents=[])
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--difficulty", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the flow generator on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--accum", type=int, default=None)
    p.add_argument("--prior-dropout", dest="prior_dropout", type=float, default=None)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--estimate-priors", action="store_true",
                   help="ignore scene.json parameters and estimate everything from pixels")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample masks from a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="a PPM file or a dataset directory")
    p.add_argument("--depth", default=None,
                   help="accepted for symmetry; priors stay zero at inference")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--diff", type=int, default=None,
                   help="also sample with this step count and write |diff| previews")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="sampling latency for a given step count")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--report", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("priors", help="extract the eight physical feature families")
    p.add_argument("--image", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--depth-scale", dest="depth_scale", type=float, default=DEPTH_SCALE)
    p.set_defaults(func=cmd_priors)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except WaterflowError as exc:
        print(f"waterflow {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
