"""Dataset manifests, corpus enhancement with a trained restorer, and round-1 training.

A round-k manifest lists the corpus produced by the round-(k-1) model.
Enhanced records point at their parents by id; originals are never
touched.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .degrade import DegradationRanges, degrade, sample_degradation_params
from .denoiser import DenoiserCheckpoint, checkpoint_to_bytes
from .diffusion import LossConfig, PairedCorpus, TrainConfig, TrainResult, restore_batch, train
from .imaging import RngStream, load_png, save_png, sha256_file, stable_hash64
from .schedule import NoiseSchedule, make_inference_plan

MANIFEST_VERSION = 1


class IntegrityError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class ImageRecord:
    id: str
    path: str
    sha256: str
    source: str = "original"
    parent_id: str | None = None
    enhancer_checkpoint_id: str | None = None


@dataclass
class DatasetManifest:
    round: int
    images: list[ImageRecord]
    version: int = MANIFEST_VERSION
    root: str = "."

    def __post_init__(self):
        ids = [r.id for r in self.images]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate image ids in manifest")

    def resolve(self, rec: ImageRecord) -> str:
        return rec.path if os.path.isabs(rec.path) else os.path.join(self.root, rec.path)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.images}

    def verify(self) -> None:
        for rec in self.images:
            p = self.resolve(rec)
            if not os.path.isfile(p):
                raise IntegrityError(f"{rec.id}: missing file {p}")
            if sha256_file(p) != rec.sha256:
                raise IntegrityError(f"{rec.id}: checksum mismatch for {p}")

    def load_images(self, verify: bool = True) -> np.ndarray:
        if verify:
            self.verify()
        return np.stack([load_png(self.resolve(r)) for r in self.images])

    def to_json(self) -> dict:
        return {"version": self.version, "round": self.round,
                "images": [asdict(r) for r in self.images]}

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path: str, verify: bool = True) -> "DatasetManifest":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {d.get('version')}")
        m = cls(round=int(d["round"]), images=[ImageRecord(**r) for r in d["images"]],
                root=os.path.dirname(os.path.abspath(path)))
        if verify:
            m.verify()
        return m


def write_corpus(images, out_dir: str, ids=None, round_: int = 0, source: str = "original",
                 subdir: str = "images") -> DatasetManifest:
    """Save images as PNGs under ``out_dir/subdir`` and return the manifest (not yet saved)."""
    os.makedirs(os.path.join(out_dir, subdir), exist_ok=True)
    ids = list(ids) if ids is not None else [f"{i:06d}" for i in range(len(images))]
    recs = []
    for i, img in zip(ids, images):
        rel = os.path.join(subdir, f"{i}.png")
        save_png(img, os.path.join(out_dir, rel))
        recs.append(ImageRecord(i, rel, sha256_file(os.path.join(out_dir, rel)), source))
    return DatasetManifest(round_, recs, root=out_dir)


def checkpoint_id(ckpt: DenoiserCheckpoint) -> str:
    return hashlib.sha256(checkpoint_to_bytes(ckpt.replace(optimizer_state={}))).hexdigest()[:16]


@dataclass(frozen=True)
class ExtrinsicConfig:
    K: int = 10
    enhancement_seed: int = 0
    pairing_mode: str = "condition_from_original"

    def validate(self) -> None:
        if self.pairing_mode not in ("condition_from_original", "condition_from_enhanced"):
            raise ValueError(f"unknown pairing_mode {self.pairing_mode!r}")


def enhancement_rng(seed: int, image_id: str) -> RngStream:
    return RngStream(seed, stable_hash64("enhance", image_id))


def enhance_dataset(model, manifest: DatasetManifest, cfg: ExtrinsicConfig, out_dir: str,
                    schedule: NoiseSchedule, training_round: int | None = None) -> DatasetManifest:
    """Restore every image with the model (clean images as conditions) into ``out_dir``.

    Output PNGs go to ``out_dir/round_{k+1}/``; the new manifest is saved as
    ``out_dir/manifest_round{k+1}.json``. Images whose output file already
    matches the progress log are skipped, so an interrupted run resumes.
    Each image is sampled alone with a seed derived from its id, which keeps
    results independent of processing order.
    """
    cfg.validate()
    rnd = training_round
    if rnd is None:
        rnd = model.training_round if isinstance(model, DenoiserCheckpoint) else manifest.round
    if rnd != manifest.round:
        raise ManifestError(f"checkpoint round {rnd} does not match manifest round {manifest.round}")
    manifest.verify()
    new_round = manifest.round + 1
    sub = f"round_{new_round}"
    os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    progress_path = os.path.join(out_dir, f"progress_round{new_round}.json")
    progress: dict[str, str] = {}
    if os.path.exists(progress_path):
        with open(progress_path) as fh:
            progress = json.load(fh)

    enh_id = checkpoint_id(model) if isinstance(model, DenoiserCheckpoint) else type(model).__name__
    plan = make_inference_plan(schedule, cfg.K)
    records = []
    for rec in manifest.images:
        rel = os.path.join(sub, f"{rec.id}.png")
        path = os.path.join(out_dir, rel)
        done = progress.get(rec.id)
        if not (done and os.path.isfile(path) and sha256_file(path) == done):
            x = load_png(manifest.resolve(rec))
            y = restore_batch(model, x[None], plan, [enhancement_rng(cfg.enhancement_seed, rec.id)])[0]
            save_png(y, path)
            progress[rec.id] = sha256_file(path)
            with open(progress_path, "w") as fh:
                json.dump(progress, fh)
        records.append(ImageRecord(rec.id, rel, progress[rec.id], "enhanced", rec.id, enh_id))
    out = DatasetManifest(new_round, records, root=out_dir)
    out.save(os.path.join(out_dir, f"manifest_round{new_round}.json"))
    return out


def assemble_pairs(original: DatasetManifest, enhanced: DatasetManifest,
                   pairing_mode: str = "condition_from_original") -> PairedCorpus:
    """Targets from the enhanced corpus; degradation sources from their parents."""
    if enhanced.round != original.round + 1:
        raise ManifestError(f"enhanced round {enhanced.round} must follow original round {original.round}")
    parents = original.by_id()
    targets, sources, ids, src_ids = [], [], [], []
    for rec in enhanced.images:
        if rec.parent_id not in parents:
            raise ManifestError(f"{rec.id}: unresolvable parent {rec.parent_id!r}")
        parent = parents[rec.parent_id]
        tgt = load_png(enhanced.resolve(rec))
        targets.append(tgt)
        if pairing_mode == "condition_from_original":
            sources.append(load_png(original.resolve(parent)))
            src_ids.append(parent.id)
        else:
            sources.append(tgt)
            src_ids.append(rec.id)
        ids.append(rec.id)
    corpus = PairedCorpus(np.stack(targets), np.stack(sources), ids)
    corpus.source_ids = src_ids
    return corpus


def extrinsic_round(round0_ckpt: DenoiserCheckpoint, original: DatasetManifest, enhanced: DatasetManifest,
                    train_config: TrainConfig, loss_config: LossConfig, ranges: DegradationRanges,
                    schedule: NoiseSchedule, pairing_mode: str = "condition_from_original",
                    out_dir: str | None = None, check_pairs: bool = True) -> TrainResult:
    """Train the round-1 model, warm-started from the round-0 parameters."""
    original.verify()
    enhanced.verify()
    corpus = assemble_pairs(original, enhanced, pairing_mode)
    parent_of = {r.id: r.parent_id for r in enhanced.images}

    def hook(step, idx):
        for i in idx:
            expect = parent_of[corpus.ids[i]] if pairing_mode == "condition_from_original" else corpus.ids[i]
            if corpus.source_ids[i] != expect:
                raise ManifestError(f"step {step}: pair {corpus.ids[i]} conditioned on {corpus.source_ids[i]}")

    start = round0_ckpt.replace(training_round=round0_ckpt.training_round + 1, step_count=0,
                                optimizer_state={}, optimizer_step=0)
    return train(start, corpus, ranges, schedule, train_config, loss_config, out_dir=out_dir,
                 batch_hook=hook if check_pairs else None)


def contaminate(images: np.ndarray, fraction: float, ranges: DegradationRanges, seed: int):
    """Degrade a random ``fraction`` of a clean corpus in place of the originals.

    Returns the contaminated copy and the boolean mask of degraded entries.
    """
    n = len(images)
    g = RngStream(seed, stable_hash64("contaminate")).generator()
    k = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    mask[g.choice(n, size=k, replace=False)] = True
    out = np.array(images, dtype=np.float64, copy=True)
    base = RngStream(seed, 0)
    for i in np.flatnonzero(mask):
        p = sample_degradation_params(ranges, base.child("contam-params", int(i)))
        out[i] = degrade(out[i], p, base.child("contam-noise", int(i)))
    return out, mask
