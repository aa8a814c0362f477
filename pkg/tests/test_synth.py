import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from whospoke.rttm import read_rttm
from whospoke.synth import (
    CorpusConfig,
    DialogueConfig,
    generate_corpus,
    generate_dialogue,
    load_corpus,
    overlap_ratio,
    signature_bank,
    turns_per_speaker,
    write_corpus,
)
from whospoke.ts_rope import cumulative_turns


def brute_activity(tr, T, fr):
    act = np.zeros((T, 4))
    for t in range(T):
        for seg in tr.segments:
            if round(seg.start * fr) <= t < round(seg.end * fr):
                act[t, seg.speaker - 1] = 1
    return act


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.sampled_from([0.0, 0.1, 0.2, 0.4]), st.integers(0, 10_000))
def test_activity_matches_transcript(n_spk, ovl, seed):
    d = generate_dialogue(DialogueConfig(num_speakers=n_spk, overlap_ratio=ovl, duration=8.0, seed=seed))
    assert set(np.unique(d.activity_truth)) <= {0.0, 1.0}
    np.testing.assert_array_equal(d.activity_truth, brute_activity(d.transcript, d.num_frames, d.frame_rate))
    assert len(d.speakers()) <= n_spk
    # rttm mirrors the transcript
    assert [(r.speaker, r.onset, r.end) for r in d.rttm] == [
        (f"spk{s.speaker}", s.start, pytest.approx(s.end)) for s in d.transcript.segments
    ]
    # a speaker never overlaps themself
    for spk in d.speakers():
        segs = [s for s in d.transcript.segments if s.speaker == spk]
        assert all(a.end <= b.start for a, b in zip(segs, segs[1:]))


def test_single_speaker_no_overlap():
    d = generate_dialogue(DialogueConfig(num_speakers=1, overlap_ratio=0.0, seed=3))
    assert d.activity_truth.sum(axis=1).max() <= 1


def test_full_overlap_mixture():
    d = generate_dialogue(DialogueConfig(num_speakers=2, overlap_ratio=1.0, seed=5))
    assert len(d.transcript.segments) == 2
    assert all(s.start == 0.0 for s in d.transcript.segments)
    act = d.activity_truth
    speaking = act.sum(axis=1) > 0
    assert (act[speaking].sum(axis=1) == 2).all()
    C = cumulative_turns(act.astype(np.int8)).C
    for s in d.speakers():
        assert (C[speaking, s - 1] == 1).all()


def test_determinism_bit_identical():
    cfg = DialogueConfig(num_speakers=3, seed=11)
    a, b = generate_dialogue(cfg), generate_dialogue(cfg)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.layer_stack.tobytes() == b.layer_stack.tobytes()
    assert a.transcript == b.transcript
    assert generate_dialogue(DialogueConfig(num_speakers=3, seed=12)).frames.tobytes() != a.frames.tobytes()


def test_overlap_target_tolerance():
    for n_spk, target in [(2, 0.2), (3, 0.2), (4, 0.3), (2, 0.0)]:
        for seed in range(10):
            d = generate_dialogue(DialogueConfig(num_speakers=n_spk, overlap_ratio=target, seed=seed))
            assert abs(d.achieved_overlap - target) <= 0.1
            assert d.achieved_overlap == overlap_ratio(d.activity_truth)


def test_signatures_linearly_independent():
    for seed in range(5):
        bank = signature_bank(DialogueConfig(signature_seed=seed, feature_dim=8))
        assert np.linalg.matrix_rank(bank.signatures) == 4


def test_layer_stack_views():
    d = generate_dialogue(DialogueConfig(seed=1, duration=4.0))
    assert d.layer_stack.shape == (3,) + d.frames.shape
    np.testing.assert_array_equal(d.layer_stack[0], d.frames)
    np.testing.assert_allclose(d.layer_stack[1][10], d.frames[8:13].mean(axis=0), atol=1e-12)
    assert not np.allclose(d.layer_stack[2], d.frames)


def test_frequent_turn_taking_config():
    cfg = DialogueConfig(num_speakers=2, duration=8.0, words_per_turn=(1, 3), pause=(0.1, 0.4), seed=0)
    for seed in range(10):
        tr = generate_dialogue(cfg.__class__(**{**cfg.__dict__, "seed": seed})).transcript
        assert min(turns_per_speaker(tr).values()) >= 3


def test_corpus_round_trip_and_bytes(tmp_path):
    cfg = CorpusConfig(dialogue=DialogueConfig(duration=4.0), num_train=3, num_dev=1, num_test=2, seed=7)
    corpus = generate_corpus(cfg)
    m1 = write_corpus(corpus, tmp_path / "a")
    m2 = write_corpus(generate_corpus(cfg), tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes(), f
    manifest = json.loads(m1.read_text())
    assert len(manifest["dialogues"]) == 6
    assert {e["split"] for e in manifest["dialogues"]} == {"train", "dev", "test"}
    back = load_corpus(m1)
    for x, y in zip(corpus.all(), back.all()):
        assert x.dialogue_id == y.dialogue_id
        assert x.frames.tobytes() == y.frames.tobytes()
        assert x.transcript == y.transcript
        assert x.activity_truth.tobytes() == y.activity_truth.tobytes()
    segs = read_rttm(tmp_path / "a" / manifest["dialogues"][0]["rttm"])
    assert segs == back.all()[0].rttm
    assert back.config == cfg
