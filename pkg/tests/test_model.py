import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridasr import checkpoint as ckpt_io
from hybridasr import tensor as nt
from hybridasr.ctc import InfeasibleAlignment, ctc_loss
from hybridasr.data import Utterance, Vocabulary
from hybridasr.model import (
    CTC,
    DECODER,
    ENCODER,
    GROUPS,
    HybridModel,
    ModelArch,
    attention_forward,
    attention_loss,
    batch_loss,
    batch_losses,
    encode,
    mol_loss,
    mol_losses,
)
from hybridasr.optim import Optimizer, OptimizerSpec
from hybridasr.tensor import Tensor, grad_check_params

VOCAB = Vocabulary(tuple(" abc"))
TINY = ModelArch(idim=3, elayers=1, eunits=8, eprojs=4, dunits=5, embed_dim=3, att_dim=4, aconv_chans=2, aconv_width=3)


def _utt(rng, text, frames_per_char=3, uid="u"):
    n = max(1, frames_per_char * len(text))
    return Utterance(uid, "x", rng.normal(size=(n, TINY.idim)), text)


@pytest.fixture()
def model():
    return HybridModel(TINY, VOCAB, seed=0)


# ---------------------------------------------------------------- attention loss


def test_single_label_uniform_decoder(model):
    model.decoder.output.weight.data[:] = 0.0
    model.decoder.output.bias.data[:] = 0.0
    utt = _utt(np.random.default_rng(0), "a")
    n_out = VOCAB.n_labels + 1
    assert float(attention_forward(model, utt).data) == pytest.approx(2 * math.log(n_out), rel=1e-14)


def test_attention_loss_equals_stepwise_trace(model):
    rng = np.random.default_rng(1)
    utt = _utt(rng, "ab")
    hs = model.encode(utt.features).data
    proj = model.attention.project_encoder(Tensor(hs)).data
    a = np.full((1, hs.shape[0]), 1.0 / hs.shape[0])
    q = np.zeros((1, TINY.dunits))
    c = np.zeros_like(q)
    prev = VOCAB.sos
    total = 0.0
    for tgt in VOCAB.encode("ab") + [VOCAB.eos]:
        a = model.attention.attend_numpy(a, q, proj)
        dist, q, c = model.decoder.step_numpy(a @ hs, q, c, np.array([prev]))
        total -= dist[0, tgt]
        prev = tgt
    assert float(attention_forward(model, utt).data) == pytest.approx(total, rel=1e-12)


def test_attention_loss_rejects_out_of_vocab_label(model):
    hs = model.encode(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        attention_loss(model, hs, [VOCAB.n_labels])


def test_overfit_one_utterance(model):
    utt = _utt(np.random.default_rng(2), "abc ab")
    params = dict(model.named_parameters())
    opt = Optimizer(OptimizerSpec("adam", lr=3e-2))
    losses = []
    for _ in range(50):
        loss = mol_loss(model, utt, 0.5)
        losses.append(float(loss.data))
        grads = nt.backward(loss)
        model.zero_grad()
        opt.step({k: p.data for k, p in params.items()}, {k: grads[p] for k, p in params.items()})
    assert losses[-1] < 0.5 * losses[0]


# ---------------------------------------------------------------- MOL interpolation


@pytest.mark.parametrize("text", ["a", "ab c", "cab"])
def test_mol_loss_endpoints_and_midpoint(model, text):
    utt = _utt(np.random.default_rng(3), text)
    labels = VOCAB.encode(text)
    att = float(attention_forward(model, utt).data)
    ctc = float(ctc_loss(model.ctc_log_probs(model.encode(utt.features)), labels).data)
    assert float(mol_loss(model, utt, 0.0).data) == att
    assert float(mol_loss(model, utt, 1.0).data) == ctc
    assert float(mol_loss(model, utt, 0.5).data) == pytest.approx((att + ctc) / 2, rel=1e-15)


def test_mol_loss_is_linear_in_lambda(model):
    utt = _utt(np.random.default_rng(4), "abc")
    parts = mol_losses(model, utt, 0.5)
    slope = float(parts.ctc.data) - float(parts.att.data)
    lo, hi = 0.3, 0.7
    finite = (float(mol_loss(model, utt, hi).data) - float(mol_loss(model, utt, lo).data)) / (hi - lo)
    assert finite == pytest.approx(slope, rel=1e-10)


def test_mol_loss_rejects_bad_lambda(model):
    with pytest.raises(ValueError):
        mol_loss(model, _utt(np.random.default_rng(5), "a"), 1.5)


def test_infeasible_ctc_is_signalled(model):
    utt = Utterance("short", "x", np.zeros((2, 3)), "aa")
    with pytest.raises(InfeasibleAlignment):
        mol_loss(model, utt, 0.5)
    # the attention objective alone does not care
    assert np.isfinite(float(mol_loss(model, utt, 0.0).data))


def test_mol_loss_grad_check_every_group(model):
    rng = np.random.default_rng(6)
    utt = _utt(rng, "ab")
    # large weights keep every entry far above central-difference noise
    for p in model.parameters():
        p.data = rng.uniform(-1.0, 1.0, size=p.shape)
    for group, names in model.groups().items():
        params = [p for n, p in model.named_parameters() if n in set(names)]
        assert grad_check_params(lambda: mol_loss(model, utt, 0.5), params) < 1e-4, group


# ---------------------------------------------------------------- encoder contract


def test_encode_preserves_length_for_blstmp(model):
    assert encode(model, np.zeros((7, 3))).shape == (7, TINY.eprojs)


def test_encode_quarters_length_for_vgg():
    arch = ModelArch(idim=8, frontend="vgg", elayers=1, eunits=4, eprojs=4, dunits=4, embed_dim=2, att_dim=3, aconv_chans=2, aconv_width=3)
    m = HybridModel(arch, VOCAB, seed=0)
    assert encode(m, np.zeros((10, 8))).shape == (3, 4)
    assert m.encoder_frames(10) == 3


def test_both_heads_see_one_encoder_output(model):
    utt = _utt(np.random.default_rng(7), "ab")
    parts = mol_losses(model, utt, 0.5)
    tape = nt.Tape.from_root(parts.total)
    nodes = {id(n) for n in tape}
    assert id(parts.hs) in nodes
    enc_nodes = [n for n in tape if n.op == "lstm_sequence"]
    # one bidirectional layer: exactly two recurrences, shared by the CTC and attention branches
    assert len(enc_nodes) == 2


# ---------------------------------------------------------------- batching


def _batch(rng, texts):
    return [_utt(rng, t, frames_per_char=int(rng.integers(2, 5)), uid=f"u{i}") for i, t in enumerate(texts)]


@settings(max_examples=15, deadline=None)
@given(st.lists(st.text(alphabet=" abc", min_size=1, max_size=5).map(lambda s: s.strip() or "a"), min_size=1, max_size=4), st.sampled_from([0.0, 0.5, 1.0]), st.integers(0, 10**6))
def test_batch_loss_is_mean_of_utterance_losses(texts, lam, seed):
    rng = np.random.default_rng(seed)
    model = HybridModel(TINY, VOCAB, seed=seed % 7)
    utts = _batch(rng, texts)
    expect = np.mean([float(mol_loss(model, u, lam).data) for u in utts])
    assert float(batch_loss(model, utts, lam).data) == pytest.approx(expect, rel=1e-11)
    # order independence
    perm = list(reversed(utts))
    assert float(batch_loss(model, perm, lam).data) == pytest.approx(expect, rel=1e-11)


def test_batch_gradients_match_mean_of_single_gradients():
    rng = np.random.default_rng(8)
    model = HybridModel(TINY, VOCAB, seed=1)
    utts = _batch(rng, ["ab c", "a", "cab", "bb a"])
    params = model.parameters()
    g_batch = nt.backward(batch_loss(model, utts, 0.5))
    g_batch = {id(k): v.copy() for k, v in g_batch.items()}
    model.zero_grad()
    acc = {id(p): np.zeros_like(p.data) for p in params}
    for u in utts:
        for p, g in nt.backward(mol_loss(model, u, 0.5)).items():
            acc[id(p)] += g / len(utts)
        model.zero_grad()
    for p in params:
        assert np.allclose(g_batch.get(id(p), 0.0), acc[id(p)], rtol=1e-9, atol=1e-13)


def test_batch_skips_ctc_infeasible_utterances():
    rng = np.random.default_rng(9)
    model = HybridModel(TINY, VOCAB, seed=0)
    good = _utt(rng, "ab", uid="good")
    bad = Utterance("bad", "x", np.zeros((1, 3)), "abc")
    res = batch_losses(model, [good, bad], 0.5)
    assert res.n_utts == 1
    assert float(res.total.data) == pytest.approx(float(mol_loss(model, good, 0.5).data), rel=1e-12)


# ---------------------------------------------------------------- parameter groups and checkpoints


def test_groups_partition_parameters(model):
    groups = model.groups()
    names = [n for n, _ in model.named_parameters()]
    assert sorted(sum(groups.values(), [])) == sorted(names)
    assert all(n.startswith("encoder.") for n in groups[ENCODER])
    assert all(n.startswith("ctc.") for n in groups[CTC])
    assert groups[DECODER]


def test_set_trainable_freezes_encoder(model):
    model.set_trainable((CTC, DECODER))
    utt = _utt(np.random.default_rng(10), "ab")
    grads = nt.backward(mol_loss(model, utt, 0.5))
    got = {model.group_of(n) for n, p in model.named_parameters() if p in grads}
    assert got == {CTC, DECODER}
    model.set_trainable(GROUPS)


def test_checkpoint_round_trip_is_byte_exact(model, tmp_path):
    path = tmp_path / "m.ckpt"
    model.save(path, {"note": "x"})
    again = HybridModel.load(path)
    again.save(tmp_path / "m2.ckpt", {"note": "x"})
    assert path.read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), again.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    assert again.vocab == model.vocab and again.arch == model.arch


def test_checkpoint_rejects_corruption(model, tmp_path):
    path = tmp_path / "m.ckpt"
    model.save(path)
    data = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ckpt_io.CheckpointError):
        HybridModel.load(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(data[:-8])
    with pytest.raises(ckpt_io.CheckpointError):
        HybridModel.load(tmp_path / "short.ckpt")


def test_default_architecture_matches_reference_table():
    arch = ModelArch()
    assert (arch.elayers, arch.eunits, arch.eprojs) == (5, 320, 320)
    assert (arch.dunits, arch.aconv_chans, arch.aconv_width) == (300, 10, 100)
