import json
import os

import numpy as np
import pytest

from idm.degrade import DegradationRanges
from idm.denoiser import checkpoint_to_bytes, init_denoiser
from idm.diffusion import LossConfig, PairedCorpus, TrainConfig, train
from idm.evaluation import sharpness
from idm.extrinsic import (
    DatasetManifest,
    ExtrinsicConfig,
    IntegrityError,
    ManifestError,
    assemble_pairs,
    contaminate,
    enhance_dataset,
    extrinsic_round,
    write_corpus,
)
from idm.imaging import RngStream, load_png, sha256_file
from idm.schedule import make_linear_schedule

SCHED = make_linear_schedule()


@pytest.fixture
def corpus(tmp_path, toy_faces):
    m = write_corpus(toy_faces[:5], str(tmp_path / "orig"))
    m.save(str(tmp_path / "orig" / "manifest_round0.json"))
    return DatasetManifest.load(str(tmp_path / "orig" / "manifest_round0.json"))


def _hashes(m):
    return {r.id: sha256_file(m.resolve(r)) for r in m.images}


def test_enhance_with_identity_oracle(corpus, copier, tmp_path):
    before = _hashes(corpus)
    out = enhance_dataset(copier, corpus, ExtrinsicConfig(K=4), str(tmp_path / "enh"), SCHED)
    assert out.round == 1 and len(out.images) == len(corpus.images)
    assert sorted(r.parent_id for r in out.images) == sorted(r.id for r in corpus.images)
    for rec in out.images:
        assert rec.source == "enhanced"
        a = load_png(out.resolve(rec))
        b = load_png(corpus.resolve(corpus.by_id()[rec.parent_id]))
        assert np.abs(a - b).max() <= 1 / 255 + 1e-12
    assert _hashes(corpus) == before
    reloaded = DatasetManifest.load(str(tmp_path / "enh" / "manifest_round1.json"))
    assert [r.id for r in reloaded.images] == [r.id for r in out.images]


def test_enhance_rerun_bit_identical_and_resumable(corpus, tiny_ckpt, tmp_path):
    from tests.test_denoiser import _randomize_head

    ck = _randomize_head(tiny_ckpt)
    a = enhance_dataset(ck, corpus, ExtrinsicConfig(K=2), str(tmp_path / "a"), SCHED)
    b = enhance_dataset(ck, corpus, ExtrinsicConfig(K=2), str(tmp_path / "b"), SCHED)
    assert [r.sha256 for r in a.images] == [r.sha256 for r in b.images]
    # simulate an interrupted run: drop one output and its progress entry
    prog = tmp_path / "b" / "progress_round1.json"
    p = json.loads(prog.read_text())
    victim = a.images[2].id
    del p[victim]
    prog.write_text(json.dumps(p))
    os.remove(tmp_path / "b" / "round_1" / f"{victim}.png")
    c = enhance_dataset(ck, corpus, ExtrinsicConfig(K=2), str(tmp_path / "b"), SCHED)
    assert [r.sha256 for r in c.images] == [r.sha256 for r in a.images]


def test_enhance_rejects_round_mismatch_and_tampering(corpus, tiny_ckpt, tmp_path):
    wrong = tiny_ckpt.replace(training_round=1)
    with pytest.raises(ManifestError):
        enhance_dataset(wrong, corpus, ExtrinsicConfig(K=1), str(tmp_path / "x"), SCHED)
    with open(corpus.resolve(corpus.images[0]), "ab") as fh:
        fh.write(b"junk")
    with pytest.raises(IntegrityError):
        enhance_dataset(tiny_ckpt, corpus, ExtrinsicConfig(K=1), str(tmp_path / "x"), SCHED)


def test_pairs_follow_parent_links(corpus, copier, tmp_path, toy_faces):
    enh = enhance_dataset(copier, corpus, ExtrinsicConfig(K=1), str(tmp_path / "enh"), SCHED)
    # shuffle enhanced record order so ids and positions disagree
    enh.images = enh.images[::-1]
    pairs = assemble_pairs(corpus, enh)
    for i, rid in enumerate(pairs.ids):
        parent = enh.by_id()[rid].parent_id
        assert pairs.source_ids[i] == parent
        assert np.array_equal(pairs.sources[i], load_png(corpus.resolve(corpus.by_id()[parent])))
        assert np.array_equal(pairs.targets[i], load_png(enh.resolve(enh.by_id()[rid])))
    alt = assemble_pairs(corpus, enh, "condition_from_enhanced")
    assert np.array_equal(alt.sources, alt.targets)


def test_unresolvable_parent(corpus, copier, tmp_path):
    enh = enhance_dataset(copier, corpus, ExtrinsicConfig(K=1), str(tmp_path / "enh"), SCHED)
    enh.images[0].parent_id = "nope"
    with pytest.raises(ManifestError):
        assemble_pairs(corpus, enh)
    enh.round = 3
    with pytest.raises(ManifestError):
        assemble_pairs(corpus, enh)


def _tcfg(steps, **kw):
    return TrainConfig(batch_size=4, total_steps=steps, learning_rate=3e-3, log_every=0, **kw)


def test_zero_steps_returns_round0_parameters(corpus, copier, tiny_ckpt, tmp_path):
    enh = enhance_dataset(copier, corpus, ExtrinsicConfig(K=1), str(tmp_path / "enh"), SCHED)
    res = extrinsic_round(tiny_ckpt, corpus, enh, _tcfg(0), LossConfig(), DegradationRanges(), SCHED)
    ck = res.checkpoint
    assert ck.training_round == 1
    for k, v in tiny_ckpt.parameters.items():
        assert ck.parameters[k].tobytes() == v.tobytes()
    assert checkpoint_to_bytes(ck) != checkpoint_to_bytes(tiny_ckpt)


def test_warm_start_beats_fresh_init(corpus, tiny_config, tmp_path):
    x = corpus.load_images()
    r0 = train(init_denoiser(tiny_config, RngStream(0)), PairedCorpus.single(x), DegradationRanges(), SCHED,
               _tcfg(120), LossConfig()).checkpoint
    r0 = r0.replace(step_count=0, optimizer_state={}, optimizer_step=0)
    enh = enhance_dataset(r0, corpus, ExtrinsicConfig(K=2), str(tmp_path / "enh"), SCHED)
    warm = extrinsic_round(r0, corpus, enh, _tcfg(10, seed=5), LossConfig(), DegradationRanges(), SCHED)
    fresh = train(init_denoiser(tiny_config, RngStream(0)), assemble_pairs(corpus, enh), DegradationRanges(),
                  SCHED, _tcfg(10, seed=5), LossConfig())
    assert np.mean([r["loss"] for r in warm.trace]) < np.mean([r["loss"] for r in fresh.trace])


def test_contaminate_fraction_and_sharpness(toy_faces):
    imgs = np.concatenate([toy_faces] * 5)
    out, mask = contaminate(imgs, 0.15, DegradationRanges(), seed=3)
    assert mask.sum() == round(0.15 * len(imgs))
    assert np.array_equal(out[~mask], imgs[~mask])
    assert not np.array_equal(out[mask], imgs[mask])
    again, mask2 = contaminate(imgs, 0.15, DegradationRanges(), seed=3)
    assert np.array_equal(again, out) and np.array_equal(mask, mask2)
    assert np.mean([sharpness(a) for a in out]) < np.mean([sharpness(a) for a in imgs])
