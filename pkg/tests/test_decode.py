import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridasr.ctc import ctc_brute_force, label_sequences
from hybridasr.data import Utterance, Vocabulary
from hybridasr.decode import (
    BeamHypothesis,
    DecodeConfig,
    HypothesisRecord,
    VocabularyMismatch,
    ctc_greedy,
    decode_utterances,
    fused_score,
    greedy_attention,
    joint_beam_search,
    read_hypotheses,
    write_hypotheses,
)
from hybridasr.lm import CharRnnLm, LmArch
from hybridasr.model import HybridModel, ModelArch, attention_forward

VOCAB = Vocabulary(("a", "b"))  # labels a, b, unk; eos/blank = 3
ARCH = ModelArch(idim=3, elayers=1, eunits=4, eprojs=4, dunits=5, embed_dim=3, att_dim=4, aconv_chans=2, aconv_width=3)


def _model(seed, scale=1.5, vocab=VOCAB):
    """Random tiny model with weights large enough to give peaked, varied distributions."""
    m = HybridModel(ARCH, vocab, seed=seed)
    rng = np.random.default_rng(seed)
    for p in m.parameters():
        p.data = rng.normal(scale=scale, size=p.shape)
    return m


def _lm(vocab=VOCAB, seed=0):
    return CharRnnLm(vocab, LmArch(units=4, layers=2, embed_dim=3), seed=seed)


def _ctc_lp(model, xs):
    return model.ctc_log_probs(model.encode(xs)).data


# ---------------------------------------------------------------- fused score


def test_fused_score_arithmetic():
    h = BeamHypothesis((0,), score_att=-1.0, score_ctc=-2.0, score_lm=-3.0)
    assert fused_score(h, DecodeConfig(alpha=0.3, beta=0.5)) == pytest.approx(-2.8, abs=1e-15)
    assert fused_score(h, DecodeConfig(alpha=0.0, beta=0.0)) == -1.0
    assert fused_score(h, DecodeConfig(alpha=0.3, beta=0.0)) == 0.7 * -1.0 + 0.3 * -2.0


def test_zero_weight_terms_never_contribute():
    h = BeamHypothesis((0,), score_att=-1.0, score_ctc=-math.inf, score_lm=-math.inf)
    assert fused_score(h, DecodeConfig(alpha=0.0, beta=0.0)) == -1.0


def test_config_validation():
    for bad in (dict(beam=0), dict(alpha=1.2), dict(alpha=-0.1), dict(beta=-1.0), dict(max_len_ratio=0.0)):
        with pytest.raises(ValueError):
            DecodeConfig(**bad)


# ---------------------------------------------------------------- degeneracies


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(0, 10**6))
def test_beam_one_attention_only_equals_greedy(n_frames, seed):
    model = _model(seed % 1000)
    xs = np.random.default_rng(seed).normal(size=(n_frames, 3))
    joint = joint_beam_search(model, xs, DecodeConfig(beam=1, alpha=0.0, beta=0.0)).best
    greedy = greedy_attention(model, xs)
    assert joint.labels == greedy.labels
    assert joint.score_att == pytest.approx(greedy.score_att, rel=1e-12, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.sampled_from([0.0, 0.3, 1.0]), st.integers(0, 10**6))
def test_lm_weight_zero_ignores_loaded_lm(n_frames, alpha, seed):
    model = _model(seed % 1000)
    xs = np.random.default_rng(seed).normal(size=(n_frames, 3))
    cfg = DecodeConfig(beam=4, alpha=alpha, beta=0.0)
    a = joint_beam_search(model, xs, cfg, None)
    b = joint_beam_search(model, xs, cfg, _lm(seed=seed % 5))
    assert [(h.labels, h.total) for h in a.hyps] == [(h.labels, h.total) for h in b.hyps]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10**6))
def test_ctc_only_search_finds_exhaustive_maximizer(n_frames, seed):
    model = _model(seed % 1000)
    xs = np.random.default_rng(seed).normal(size=(n_frames, 3))
    lp = _ctc_lp(model, xs)
    max_len = 3
    probs = {seq: ctc_brute_force(lp, seq) for seq in label_sequences(VOCAB.n_labels, max_len)}
    best_p = max(probs.values())
    # a beam wide enough to hold every prefix makes the search exhaustive
    res = joint_beam_search(model, xs, DecodeConfig(beam=VOCAB.n_labels**max_len, alpha=1.0, max_len=max_len))
    assert math.exp(res.best.score_ctc) == pytest.approx(best_p, rel=1e-9)
    assert probs[res.best.labels] == pytest.approx(best_p, rel=1e-9)


def _joint_score(model, xs, seq, alpha):
    att = -float(attention_forward(model, Utterance("x", "x", xs, VOCAB.decode(seq))).data)
    p = ctc_brute_force(_ctc_lp(model, xs), seq)
    return (1 - alpha) * att + alpha * (math.log(p) if p > 0 else -math.inf)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10**6))
def test_exhaustive_beam_finds_joint_maximizer_and_narrow_beam_cannot_beat_it(n_frames, seed):
    model = _model(seed % 1000)
    xs = np.random.default_rng(seed).normal(size=(n_frames, 3))
    max_len = 2
    alpha = 0.3
    # the unk label never appears in text, so enumerate over real graphemes only
    scores = {seq: _joint_score(model, xs, seq, alpha) for seq in label_sequences(2, max_len)}
    oracle = max(scores.values())
    n_all = sum(VOCAB.n_labels**k for k in range(max_len + 1))
    wide = joint_beam_search(model, xs, DecodeConfig(beam=n_all, alpha=alpha, max_len=max_len))
    top = [h for h in wide.hyps if VOCAB.unk not in h.labels][0]
    assert wide.best.total >= oracle - 1e-9
    assert top.total == pytest.approx(oracle, rel=1e-9, abs=1e-9)
    narrow = joint_beam_search(model, xs, DecodeConfig(beam=1, alpha=alpha, max_len=max_len))
    assert narrow.best.total <= wide.best.total + 1e-12


def test_uniform_lm_shifts_every_candidate_of_a_step_equally():
    model = _model(3)
    xs = np.random.default_rng(3).normal(size=(6, 3))
    lm = _lm()
    lm.output.weight.data[:] = 0.0
    lm.output.bias.data[:] = 0.0
    cfg = DecodeConfig(beam=3, alpha=0.3, max_len=4)
    plain = joint_beam_search(model, xs, cfg, trace=True)
    fused = joint_beam_search(model, xs, DecodeConfig(beam=3, alpha=0.3, beta=0.5, max_len=4), lm, trace=True)
    # the same per-step selection while both searches run
    for s_plain, s_fused in zip(plain.trace, fused.trace):
        assert s_plain["live"] == s_fused["live"]
    step_lp = -math.log(lm.n_outputs)
    for h in fused.hyps:
        assert h.score_lm == pytest.approx((len(h.labels) + 1) * step_lp, rel=1e-12)


# ---------------------------------------------------------------- search invariants


def test_component_scores_are_non_positive_and_consistent():
    model = _model(4)
    lm = _lm(seed=1)
    xs = np.random.default_rng(4).normal(size=(7, 3))
    cfg = DecodeConfig(beam=5, alpha=0.3, beta=0.5)
    res = joint_beam_search(model, xs, cfg, lm)
    assert [h.total for h in res.hyps] == sorted((h.total for h in res.hyps), reverse=True)
    assert len(res.hyps) <= cfg.beam
    for h in res.hyps:
        assert h.score_att <= 0 and h.score_ctc <= 0 and h.score_lm <= 0
        assert h.total == fused_score(h, cfg)
        assert h.finished


def test_search_is_deterministic():
    model = _model(5)
    xs = np.random.default_rng(5).normal(size=(8, 3))
    cfg = DecodeConfig(beam=6, alpha=0.3, beta=0.3)
    runs = [joint_beam_search(model, xs, cfg, _lm(seed=2)) for _ in range(2)]
    assert [(h.labels, h.total) for h in runs[0].hyps] == [(h.labels, h.total) for h in runs[1].hyps]


def test_length_cap_forces_eos():
    model = _model(6)
    xs = np.random.default_rng(6).normal(size=(9, 3))
    res = joint_beam_search(model, xs, DecodeConfig(beam=4, alpha=0.0, max_len=2))
    assert all(len(h.labels) <= 2 for h in res.hyps)
    assert not res.warning


def test_search_preconditions():
    model = _model(7)
    with pytest.raises(ValueError):
        joint_beam_search(model, np.zeros((0, 3)), DecodeConfig())
    with pytest.raises(ValueError):
        joint_beam_search(model, np.zeros((3, 3)), DecodeConfig(beta=0.5))
    other = _lm(Vocabulary(("a", "c")))
    with pytest.raises(VocabularyMismatch):
        joint_beam_search(model, np.zeros((3, 3)), DecodeConfig(beta=0.5), other)


# ---------------------------------------------------------------- CTC greedy


def test_ctc_greedy_all_blank_is_empty():
    model = _model(8)
    model.ctc.proj.weight.data[:] = 0.0
    model.ctc.proj.bias.data[:] = 0.0
    model.ctc.proj.bias.data[VOCAB.blank] = 5.0
    assert ctc_greedy(model, np.random.default_rng(8).normal(size=(5, 3))) == []


def test_ctc_greedy_collapses_frame_argmax():
    model = _model(9)
    lp = _ctc_lp(model, np.random.default_rng(9).normal(size=(6, 3)))
    path = lp.argmax(axis=1)
    out, prev = [], None
    for k in path:
        if k != prev and k != VOCAB.blank:
            out.append(int(k))
        prev = k
    assert ctc_greedy(model, np.random.default_rng(9).normal(size=(6, 3))) == out


# ---------------------------------------------------------------- records


def test_hypothesis_file_round_trip(tmp_path):
    recs = [
        HypothesisRecord("u1", "ab ba", -1.25, -1.0, -2.0, 0.0),
        HypothesisRecord("u2", "", -0.1, -0.1, 0.0, 0.0),
        HypothesisRecord("u3", " a ", -1 / 3, -0.5, -1e-17, -7.0),
    ]
    write_hypotheses(tmp_path / "h.tsv", recs)
    lines = (tmp_path / "h.tsv").read_text().splitlines()
    assert lines[0] == "id\ttext\tscore\tscore_att\tscore_ctc\tscore_lm"
    back = read_hypotheses(tmp_path / "h.tsv")
    assert [(r.id, r.text, r.score, r.score_att, r.score_ctc, r.score_lm) for r in back] == [
        (r.id, r.text, r.score, r.score_att, r.score_ctc, r.score_lm) for r in recs
    ]


def test_hypothesis_file_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        write_hypotheses(tmp_path / "h.tsv", [HypothesisRecord("u", "a\tb", 0, 0, 0, 0)])
    (tmp_path / "bad.tsv").write_text("id\ttext\n")
    with pytest.raises(ValueError):
        read_hypotheses(tmp_path / "bad.tsv")
    (tmp_path / "short.tsv").write_text("id\ttext\tscore\tscore_att\tscore_ctc\tscore_lm\nu1\tab\t0\n")
    with pytest.raises(ValueError):
        read_hypotheses(tmp_path / "short.tsv")


def test_decode_utterances_uses_best_hypothesis():
    model = _model(10)
    rng = np.random.default_rng(10)
    utts = [Utterance(f"u{i}", "x", rng.normal(size=(5, 3)), "ab") for i in range(3)]
    cfg = DecodeConfig(beam=3)
    recs = decode_utterances(model, utts, cfg)
    for u, r in zip(utts, recs):
        best = joint_beam_search(model, u.features, cfg).best
        assert r.id == u.id and r.text == VOCAB.decode(best.labels) and r.score == best.total
