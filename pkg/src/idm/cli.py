"""Command line entry point: ``idm <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments or configuration.
Every command writes ``run_info.json`` (resolved config, seed, tool version,
input checksums) into its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields

from . import __version__
from .degrade import DegradationParams, DegradationRanges, degrade, sample_degradation_params
from .denoiser import DenoiserConfig, init_denoiser, load_checkpoint, save_checkpoint
from .diffusion import LossConfig, PairedCorpus, TrainConfig, TrainingDiverged, restore, train
from .evaluation import (
    AuthenticityThresholds,
    authenticity_test,
    blur_restorer,
    evaluate_dataset,
)
from .extrinsic import (
    DatasetManifest,
    ExtrinsicConfig,
    ImageRecord,
    assemble_pairs,
    enhance_dataset,
    extrinsic_round,
    write_corpus,
)
from .imaging import RngStream, ToyFaceSpec, gen_toy_face, load_png, save_png, sha256_file, stable_hash64
from .schedule import make_inference_plan, schedule_from_config

log = logging.getLogger("idm")

DEFAULT_SCHEDULE = {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "schedule_family": "linear"}
CONFIG_SECTIONS = {"schedule", "model", "train", "loss", "degrade", "infer", "seed"}


class ConfigError(ValueError):
    pass


def cache_dir() -> str:
    """Directory for intermediate artifacts (``IDM_CACHE_DIR``, default ``~/.cache/idm``)."""
    d = os.environ.get("IDM_CACHE_DIR") or os.path.join(os.path.expanduser("~"), ".cache", "idm")
    os.makedirs(d, exist_ok=True)
    return d


def _dataclass_from(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    return cls(**d)


def resolve_config(raw: dict | None) -> dict:
    """Expand defaults and reject unknown keys; returns plain JSON-able dicts."""
    raw = dict(raw or {})
    unknown = set(raw) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sched = dict(DEFAULT_SCHEDULE)
    extra = set(raw.get("schedule", {})) - set(DEFAULT_SCHEDULE)
    if extra:
        raise ConfigError(f"unknown keys in 'schedule': {sorted(extra)}")
    sched.update(raw.get("schedule", {}))
    try:
        model = DenoiserConfig.from_dict(raw.get("model", {}))
        model.validate()
        train_cfg = _dataclass_from(TrainConfig, raw.get("train", {}), "train")
        train_cfg.validate()
        loss_cfg = _dataclass_from(LossConfig, raw.get("loss", {}), "loss")
        loss_cfg.validate()
        ranges = DegradationRanges.from_dict(raw.get("degrade", {}))
        ranges.validate()
        schedule_from_config(sched)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    infer = {"K": 10}
    extra = set(raw.get("infer", {})) - {"K"}
    if extra:
        raise ConfigError(f"unknown keys in 'infer': {sorted(extra)}")
    infer.update(raw.get("infer", {}))
    seed = int(raw.get("seed", train_cfg.seed))
    train_d = asdict(train_cfg)
    train_d["seed"] = seed
    if loss_cfg.target != model.prediction_target:
        raise ConfigError("loss.target must equal model.prediction_target")
    return {"schedule": sched, "model": model.to_dict(), "train": train_d, "loss": asdict(loss_cfg),
            "degrade": ranges.to_dict(), "infer": infer, "seed": seed}


def _write_run_info(out_dir: str, command: str, config: dict, seed: int, inputs: list[str]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    info = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "resolved_config": config,
        "inputs": {p: sha256_file(p) for p in inputs if p and os.path.isfile(p)},
        "argv": sys.argv[1:],
    }
    with open(os.path.join(out_dir, "run_info.json"), "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)


def _load_config(path: str | None) -> dict:
    if not path:
        return resolve_config({})
    with open(path) as fh:
        return resolve_config(json.load(fh))


def _positive_int(v: str) -> int:
    i = int(v)
    if i < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return i


def _toy_size(v: str) -> int:
    i = int(v)
    if i < 16:
        raise argparse.ArgumentTypeError(f"toy face size must be >= 16, got {v}")
    return i


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_toy(a) -> int:
    spec_kw = dict(size=a.size, channels=a.channels)
    imgs = []
    for i in range(a.count):
        spec = ToyFaceSpec(palette_seed=int(stable_hash64(a.seed, "palette", i) % 7), **spec_kw)
        imgs.append(gen_toy_face(spec, RngStream(a.seed, i)))
    m = write_corpus(imgs, a.out)
    m.save(os.path.join(a.out, "manifest.json"))
    cfg = {"count": a.count, "size": a.size, "channels": a.channels, "seed": a.seed}
    _write_run_info(a.out, "gen-toy", cfg, a.seed, [])
    print(os.path.join(a.out, "manifest.json"))
    return 0


def cmd_train(a) -> int:
    cfg = _load_config(a.config)
    schedule = schedule_from_config(cfg["schedule"])
    tcfg = TrainConfig(**cfg["train"])
    lcfg = LossConfig(**cfg["loss"])
    ranges = DegradationRanges.from_dict(cfg["degrade"])
    os.makedirs(a.out, exist_ok=True)
    last = os.path.join(a.out, "last.idmc")
    data = DatasetManifest.load(a.data)

    if a.resume and os.path.exists(last):
        ckpt = load_checkpoint(last)
        log.info("resuming from %s at step %d", last, ckpt.step_count)
    elif a.init:
        ckpt = load_checkpoint(a.init)
    else:
        ckpt = init_denoiser(DenoiserConfig.from_dict(cfg["model"]), RngStream(cfg["seed"], 1))
    ckpt.schedule_config = cfg["schedule"]
    inputs = [a.config, a.data, a.init, a.original]

    remaining = tcfg.total_steps - (ckpt.step_count if a.resume and os.path.exists(last) else 0)
    run_cfg = TrainConfig(**{**cfg["train"], "total_steps": max(0, remaining)})
    _write_run_info(a.out, "train", cfg, cfg["seed"], inputs)

    if a.round and a.round > 0:
        if not a.original:
            raise ConfigError("--round >= 1 needs --original MANIFEST (parents of the enhanced corpus)")
        original = DatasetManifest.load(a.original)
        if a.resume and os.path.exists(last):
            corpus = assemble_pairs(original, data)
            result = train(ckpt, corpus, ranges, schedule, run_cfg, lcfg, out_dir=a.out)
        else:
            if ckpt.training_round != a.round - 1:
                raise ConfigError(f"--init checkpoint is round {ckpt.training_round}, expected {a.round - 1}")
            result = extrinsic_round(ckpt, original, data, run_cfg, lcfg, ranges, schedule, out_dir=a.out)
    else:
        corpus = PairedCorpus.single(data.load_images(verify=False), [r.id for r in data.images])
        result = train(ckpt, corpus, ranges, schedule, run_cfg, lcfg, out_dir=a.out)
    save_checkpoint(result.checkpoint, last)
    save_checkpoint(result.checkpoint, os.path.join(a.out, "final.idmc"))
    print(os.path.join(a.out, "final.idmc"))
    return 0


def _degrade_one(args):
    img_path, params, seed, stream, out_path = args
    x = load_png(img_path)
    y = degrade(x, params, RngStream(seed, stream))
    save_png(y, out_path)
    return sha256_file(out_path)


def cmd_degrade(a) -> int:
    m = DatasetManifest.load(a.data)
    os.makedirs(os.path.join(a.out, "images"), exist_ok=True)
    if a.replay:
        with open(a.replay) as fh:
            side = json.load(fh)
        seed = int(side["seed"])
        rows = {r["id"]: r for r in side["images"]}
        missing = [r.id for r in m.images if r.id not in rows]
        if missing:
            raise ConfigError(f"replay sidecar lacks ids: {missing[:5]}")
        plan = [(r, DegradationParams(**rows[r.id]["params"]), int(rows[r.id]["stream_id"])) for r in m.images]
        ranges = side.get("ranges")
    else:
        seed = a.seed
        ranges_obj = DegradationRanges()
        if a.ranges:
            with open(a.ranges) as fh:
                ranges_obj = DegradationRanges.from_dict(json.load(fh))
        ranges = ranges_obj.to_dict()
        plan = []
        for i, r in enumerate(m.images):
            p = sample_degradation_params(ranges_obj, RngStream(seed, stable_hash64("params", r.id)))
            plan.append((r, p, i))
    jobs = [(m.resolve(r), p, seed, s, os.path.join(a.out, "images", f"{r.id}.png")) for r, p, s in plan]
    with ThreadPoolExecutor(max_workers=a.workers) as pool:
        hashes = list(pool.map(_degrade_one, jobs))
    records, side_rows = [], []
    for (r, p, s), h in zip(plan, hashes):
        rel = os.path.join("images", f"{r.id}.png")
        records.append(ImageRecord(r.id, rel, h, "degraded", r.id))
        side_rows.append({"id": r.id, "params": p.to_dict(), "seed": seed, "stream_id": s,
                          "output": rel, "sha256": h})
    DatasetManifest(m.round, records, root=a.out).save(os.path.join(a.out, "manifest.json"))
    sidecar = {"seed": seed, "ranges": ranges, "kernel_rule": "side = 2*ceil(3*sigma)+1",
               "jpeg_codec": "libjpeg via OpenCV", "images": side_rows}
    with open(os.path.join(a.out, "degradation.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)
    _write_run_info(a.out, "degrade", {"ranges": ranges, "replay": bool(a.replay)}, seed,
                    [a.data, a.ranges, a.replay])
    return 0


def _model_or_baseline(a):
    if getattr(a, "baseline", None):
        if a.baseline == "identity":
            return lambda x: x
        return blur_restorer(2.0)
    if not a.ckpt:
        raise ConfigError("need --ckpt or --baseline")
    return load_checkpoint(a.ckpt)


def _schedule_for(model):
    cfg = getattr(model, "schedule_config", None) or DEFAULT_SCHEDULE
    return schedule_from_config(cfg)


def cmd_restore(a) -> int:
    ckpt = load_checkpoint(a.ckpt)
    plan = make_inference_plan(_schedule_for(ckpt), a.steps)
    os.makedirs(a.out, exist_ok=True)
    inputs = [a.input] if a.input else []
    if a.data:
        m = DatasetManifest.load(a.data)
        items = [(r.id, m.resolve(r)) for r in m.images]
        inputs.append(a.data)
    else:
        items = [(os.path.splitext(os.path.basename(a.input))[0], a.input)]
    for iid, path in items:
        y = restore(ckpt, load_png(path), plan, RngStream(a.seed, stable_hash64("restore", iid)))
        save_png(y, os.path.join(a.out, f"{iid}.png"))
    _write_run_info(a.out, "restore", {"steps": a.steps, "schedule": _schedule_for(ckpt).to_config()},
                    a.seed, inputs + [a.ckpt])
    return 0


def cmd_enhance(a) -> int:
    ckpt = load_checkpoint(a.ckpt)
    m = DatasetManifest.load(a.data)
    cfg = ExtrinsicConfig(K=a.steps, enhancement_seed=a.seed)
    enhance_dataset(ckpt, m, cfg, a.out, _schedule_for(ckpt))
    _write_run_info(a.out, "enhance", asdict(cfg), a.seed, [a.ckpt, a.data])
    return 0


def cmd_authtest(a) -> int:
    model = _model_or_baseline(a)
    m = DatasetManifest.load(a.data)
    clean = m.load_images(verify=False)
    if a.limit:
        clean = clean[:a.limit]
    ranges = DegradationRanges()
    if a.ranges:
        with open(a.ranges) as fh:
            ranges = DegradationRanges.from_dict(json.load(fh))
    plan = make_inference_plan(_schedule_for(model), a.steps)
    th = AuthenticityThresholds(a.tau_clean, a.tau_idem)
    rep = authenticity_test(model, clean, ranges, plan, a.seed, th, out_dir=a.out)
    _write_run_info(a.out, "authtest", {"steps": a.steps, "ranges": ranges.to_dict(),
                                        "thresholds": asdict(th), "baseline": a.baseline},
                    a.seed, [a.ckpt, a.data, a.ranges])
    print(json.dumps({k: v for k, v in rep.to_json().items() if k != "per_image"}))
    return 0


def cmd_eval(a) -> int:
    model = _model_or_baseline(a)
    deg = DatasetManifest.load(a.degraded)
    clean_m = DatasetManifest.load(a.clean)
    clean = clean_m.by_id()
    pairs, ids = [], []
    for r in deg.images:
        ref_id = r.parent_id or r.id
        if ref_id not in clean:
            raise ConfigError(f"no clean reference for {r.id}")
        pairs.append((load_png(deg.resolve(r)), load_png(clean_m.resolve(clean[ref_id]))))
        ids.append(r.id)
    plan = make_inference_plan(_schedule_for(model), a.steps)
    rep = evaluate_dataset(model, pairs, plan, a.seed, ids, out_dir=a.out)
    _write_run_info(a.out, "eval", {"steps": a.steps, "baseline": a.baseline}, a.seed,
                    [a.ckpt, a.degraded, a.clean])
    print(json.dumps(rep.to_json()["aggregates"]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idm", description="Iterative diffusion face restoration toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", required=True)
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=_positive_int, default=1)

    sp = sub.add_parser("gen-toy", help="generate a toy face corpus")
    common(sp)
    sp.add_argument("--count", type=_positive_int, required=True)
    sp.add_argument("--size", type=_toy_size, default=32)
    sp.add_argument("--channels", type=int, choices=(1, 3), default=3)
    sp.set_defaults(func=cmd_gen_toy)

    sp = sub.add_parser("train", help="train a denoiser")
    common(sp, seed=False)
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--init")
    sp.add_argument("--round", type=int, default=0)
    sp.add_argument("--original", help="round-0 manifest (parents) when --round >= 1")
    sp.add_argument("--resume", action="store_true", help="continue from OUT/last.idmc if present")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("degrade", help="synthesize degraded copies of a corpus")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ranges")
    sp.add_argument("--replay", help="degradation.json sidecar to reproduce exactly")
    sp.set_defaults(func=cmd_degrade)

    sp = sub.add_parser("restore", help="restore images with a checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--input")
    g.add_argument("--data")
    sp.add_argument("--steps", type=_positive_int, default=10)
    sp.set_defaults(func=cmd_restore)

    sp = sub.add_parser("enhance", help="enhance a corpus into the next round")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--steps", type=_positive_int, default=10)
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("authtest", help="authenticity (fixed-point) test")
    common(sp)
    sp.add_argument("--ckpt")
    sp.add_argument("--baseline", choices=("identity", "blur"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--ranges")
    sp.add_argument("--steps", type=_positive_int, default=10)
    sp.add_argument("--limit", type=int, default=0)
    sp.add_argument("--tau-clean", type=float, default=30.0)
    sp.add_argument("--tau-idem", type=float, default=28.0)
    sp.set_defaults(func=cmd_authtest)

    sp = sub.add_parser("eval", help="PSNR/SSIM evaluation on degraded/clean pairs")
    common(sp)
    sp.add_argument("--ckpt")
    sp.add_argument("--baseline", choices=("identity", "blur"))
    sp.add_argument("--degraded", required=True)
    sp.add_argument("--clean", required=True)
    sp.add_argument("--steps", type=_positive_int, default=10)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return a.func(a)
    except ConfigError as exc:
        print(f"idm: configuration error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"idm: training diverged: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"idm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
