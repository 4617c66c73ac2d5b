from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import TPQ, random_score
from vmusprod import metrics
from vmusprod.metrics import VMCPConfig
from vmusprod.midi import NoteEvent, Score

MAJOR = [0, 2, 4, 5, 7, 9, 11]
MINOR = [0, 2, 3, 5, 7, 8, 10]


# -- independent scalar oracles, written with plain loops

def oracle_metrics(score: Score) -> dict:
    notes = list(score.notes)
    n = len(notes)
    best = 0.0
    for tonic in range(12):
        for steps in (MAJOR, MINOR):
            members = [(tonic + s) % 12 for s in steps]
            hits = 0
            for note in notes:
                if note.pitch % 12 in members:
                    hits += 1
            best = max(best, hits / n)

    def entropy(keys):
        counts = {}
        for k in keys:
            counts[k] = counts.get(k, 0) + 1
        h = 0.0
        for c in counts.values():
            p = c / n
            h -= p * math.log(p, 2)
        return h

    pe = entropy([x.pitch for x in notes])
    pce = entropy([x.pitch % 12 for x in notes])
    tpq = score.ticks_per_quarter
    end = max(x.onset + x.duration for x in notes)
    beats = -(-end // tpq)
    empty = 0
    for b in range(beats):
        if not any(b * tpq <= x.onset < (b + 1) * tpq for x in notes):
            empty += 1
    onsets = sorted(set(x.onset for x in notes))
    sec_per_tick = 60.0 / score.tempo_bpm / tpq
    gaps = [(b - a) * sec_per_tick for a, b in zip(onsets, onsets[1:])]
    ioi = sum(gaps) / len(gaps) if gaps else None
    return {"sc": best, "pe": pe, "pce": pce, "ebr": empty / beats, "ioi": ioi}


def test_metrics_match_oracle_on_100_scores():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = random_score(rng, n_notes=int(rng.integers(1, 60)), tempo=float(rng.choice([60, 90, 120, 137.5])))
        got = metrics.quality_metrics(s).to_dict()
        want = oracle_metrics(s)
        for k, v in want.items():
            if v is None:
                assert got[k] is None
            else:
                assert abs(got[k] - v) < 1e-9, k


def test_degenerate_single_pitch():
    s = Score(TPQ, 120.0, notes=tuple(NoteEvent(i * TPQ, TPQ, 60) for i in range(4)))
    r = metrics.quality_metrics(s)
    assert (r.pe, r.pce, r.sc) == (0.0, 0.0, 1.0)


def test_uniform_pitch_classes():
    s = Score(TPQ, 120.0, notes=tuple(NoteEvent(i * TPQ, TPQ, 60 + i) for i in range(12)))
    assert metrics.quality_metrics(s).pce == pytest.approx(math.log2(12), abs=1e-6)


def test_onset_every_beat_at_120():
    s = Score(TPQ, 120.0, notes=tuple(NoteEvent(i * TPQ, TPQ // 2, 64) for i in range(8)))
    r = metrics.quality_metrics(s)
    assert r.ebr == 0.0 and r.ioi == pytest.approx(0.5, abs=1e-12)


def test_empty_score_is_all_na():
    assert metrics.quality_metrics(Score(TPQ, 120.0, notes=())) == metrics.MetricReport()
    one = Score(TPQ, 120.0, notes=(NoteEvent(0, TPQ, 60),))
    assert metrics.quality_metrics(one).ioi is None


def test_mean_report_skips_na():
    a = metrics.MetricReport(1.0, 2.0, 1.0, 0.0, None)
    b = metrics.MetricReport(0.5, 1.0, 0.0, 1.0, 0.5)
    assert metrics.mean_report([a, b, metrics.MetricReport()]) == metrics.MetricReport(0.75, 1.5, 0.5, 0.5, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_report_ranges_and_octave_invariance(seed):
    rng = np.random.default_rng(seed)
    s = random_score(rng, n_notes=int(rng.integers(1, 40)), pitch_lo=12, pitch_hi=100)
    r = metrics.quality_metrics(s)
    assert 0 <= r.sc <= 1 and r.pe >= 0 and 0 <= r.pce <= math.log2(12) + 1e-12 and 0 <= r.ebr <= 1
    up = s.with_notes([NoteEvent(n.onset, n.duration, n.pitch + 12, n.velocity) for n in s.notes])
    assert metrics.quality_metrics(up) == r


# -- embeddings and loss

def test_embeddings_unit_norm_and_position_aware():
    model = metrics.VMCPModel(VMCPConfig(video_dim=8, music_dim=16))
    rng = np.random.default_rng(0)
    v, m = rng.normal(size=(20, 8)), rng.normal(size=(12, 16))
    e = metrics.embed_pair(v, m, model)
    assert e.video.shape == e.music.shape == (4, 128)
    assert np.allclose(np.linalg.norm(e.video, axis=1), 1, atol=1e-6)
    assert np.allclose(np.linalg.norm(e.music, axis=1), 1, atol=1e-6)
    e2 = metrics.embed_pair(v, m, model)
    assert np.array_equal(e.video, e2.video) and np.array_equal(e.music, e2.music)
    swapped = v.copy()
    swapped[[0, 1]] = swapped[[1, 0]]  # reorder frames inside segment 0
    e3 = metrics.embed_pair(swapped, m, model)
    assert not np.allclose(e3.video[0], e.video[0])
    assert np.array_equal(e3.video[1:], e.video[1:])


def test_segment_count_mismatch():
    model = metrics.VMCPModel(VMCPConfig(video_dim=4, music_dim=4))
    rng = np.random.default_rng(1)
    with pytest.raises(ValueError):
        metrics.embed_pair([rng.normal(size=(3, 4))] * 4, [rng.normal(size=(3, 4))] * 3, model)
    with pytest.raises(ValueError):
        metrics.embed_pair(rng.normal(size=(2, 4)), rng.normal(size=(8, 4)), model)


def infonce_oracle(v, m, tau):
    n, l, _ = v.shape
    flat_v = v.reshape(n * l, -1)
    flat_m = m.reshape(n * l, -1)
    total = 0.0
    for a, b in ((flat_v, flat_m), (flat_m, flat_v)):
        side = 0.0
        for i in range(n * l):
            denom = 0.0
            for j in range(n * l):
                denom += math.exp(float(a[i] @ b[j]) / tau)
            side -= float(a[i] @ b[i]) / tau - math.log(denom)
        total += side / (n * l)
    return total / 2


def test_infonce_identical_embeddings():
    for n, l in ((1, 2), (3, 4), (5, 1)):
        e = np.ones((n, l, 8)) / math.sqrt(8)
        assert metrics.infonce_loss(e, e, 0.07).item() == pytest.approx(math.log(n * l), abs=1e-12)


def test_infonce_separated_limit():
    # two pairs, diagonal similarity 1 and off-diagonal -1
    v = np.array([[[1.0, 0.0]], [[-1.0, 0.0]]])
    assert metrics.infonce_loss(v, v, 0.01).item() < 1e-60
    assert metrics.infonce_loss(v, v, 0.01).item() >= 0


def test_infonce_matches_double_loop():
    rng = np.random.default_rng(2)
    for _ in range(10):
        v = rng.normal(size=(3, 4, 6))
        m = rng.normal(size=(3, 4, 6))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        m /= np.linalg.norm(m, axis=-1, keepdims=True)
        tau = float(rng.uniform(0.05, 1))
        assert abs(metrics.infonce_loss(v, m, tau).item() - infonce_oracle(v, m, tau)) < 1e-6


def test_infonce_errors():
    with pytest.raises(ValueError):
        metrics.infonce_loss(np.ones((1, 1, 4)), np.ones((1, 1, 4)), 0.1)
    with pytest.raises(ValueError):
        metrics.infonce_loss(np.ones((2, 1, 4)), np.ones((2, 1, 4)), 0.0)


# -- retrieval

def random_unit(rng, shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_oracle_retrieval_is_perfect():
    e = random_unit(np.random.default_rng(3), (70, 4, 16))
    r = metrics.vmcp_from_embeddings(e, e)
    assert r.p_at == {5: 1.0, 10: 1.0, 20: 1.0} and r.average_rank == 1.0


def test_adversarial_retrieval_ranks_last():
    m = 70
    sim = np.tile(np.arange(m, 0, -1, dtype=float), (m, 1))
    # put each true candidate at the lowest similarity
    truth = np.full(m, m - 1)
    r = metrics.rank_retrieval(sim, truth)
    assert r.p_at == {5: 0.0, 10: 0.0, 20: 0.0} and r.average_rank == m


def test_random_retrieval_matches_uniform_rank_expectation():
    rng = np.random.default_rng(4)
    m, trials = 70, 2000
    p5, p10, p20, ar = [], [], [], []
    for _ in range(trials):
        music = random_unit(rng, (1, 4, 16))
        video = random_unit(rng, (m, 4, 16))
        r = metrics.vmcp_from_embeddings(music, video, truth=[int(rng.integers(m))])
        p5.append(r.p_at[5])
        p10.append(r.p_at[10])
        p20.append(r.p_at[20])
        ar.append(r.average_rank)
    for vals, k in ((p5, 5), (p10, 10), (p20, 20)):
        p = k / m
        assert abs(np.mean(vals) - p) < 3 * math.sqrt(p * (1 - p) / trials)
    sd = math.sqrt((m * m - 1) / 12 / trials)
    assert abs(np.mean(ar) - (m + 1) / 2) < 3 * sd


def test_ties_broken_by_candidate_index():
    sim = np.zeros((3, 6))
    r = metrics.rank_retrieval(sim, [0, 2, 5], ks=(1, 3))
    assert r.ranks == [1, 3, 6]


def test_rotation_invariance():
    rng = np.random.default_rng(5)
    a, b = random_unit(rng, (10, 4, 8)), random_unit(rng, (30, 4, 8))
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    r1 = metrics.vmcp_from_embeddings(a, b, ks=(1, 5))
    r2 = metrics.vmcp_from_embeddings(a @ q, b @ q, ks=(1, 5))
    assert r1.ranks == r2.ranks
    assert np.allclose(r1.similarity_matrix, r2.similarity_matrix, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_precision_monotone_and_full_pool(p, m, seed):
    rng = np.random.default_rng(seed)
    sim = rng.integers(0, 4, size=(p, m)).astype(float)  # many ties
    truth = rng.integers(0, m, size=p)
    ks = tuple(range(1, m + 1))
    r = metrics.rank_retrieval(sim, truth, ks)
    vals = [r.p_at[k] for k in ks]
    assert all(x <= y for x, y in zip(vals, vals[1:]))
    assert r.p_at[m] == 1.0
    assert 1 <= r.average_rank <= m


def test_retrieval_errors():
    with pytest.raises(ValueError):
        metrics.rank_retrieval(np.zeros((2, 4)), [0, 1], ks=(5,))
    model = metrics.VMCPModel(VMCPConfig(video_dim=4, music_dim=4))
    with pytest.raises(ValueError):
        metrics.vmcp_eval([np.zeros((8, 4))], [np.zeros((8, 4))] * 3, model, ks=(5,))


def test_report_json_roundtrip():
    r = metrics.rank_retrieval(np.eye(5), range(5), ks=(1, 5))
    import json
    d = json.loads(r.to_json())
    assert d["p_at"] == {"1": 1.0, "5": 1.0} and d["ranks"] == [1] * 5


# -- training

def quick_config(**kw):
    base = dict(video_dim=32, music_dim=16, embed_dim=32, epochs=5, seed=0)
    base.update(kw)
    return VMCPConfig(**base)


def test_train_requires_pairs():
    with pytest.raises(ValueError):
        metrics.train_vmcp([], quick_config())
    with pytest.raises(ValueError):
        metrics.train_vmcp(metrics.synthetic_pairs(8), quick_config())


def test_zero_learning_rate_loss_constant():
    pairs = metrics.synthetic_pairs(16)
    model, curve = metrics.train_vmcp(pairs, quick_config(lr=0.0))
    # a single batch per epoch; only the shuffled row order differs between epochs
    assert curve == pytest.approx([curve[0]] * len(curve), rel=1e-6)
    fresh = (torch.manual_seed(0), metrics.VMCPModel(quick_config()))[1]
    for a, b in zip(model.state_dict().values(), fresh.state_dict().values()):
        assert torch.equal(a, b)


def test_training_deterministic():
    pairs = metrics.synthetic_pairs(32, seed=1)
    _, c1 = metrics.train_vmcp(pairs, quick_config())
    _, c2 = metrics.train_vmcp(pairs, quick_config())
    assert c1 == c2


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    model = metrics.VMCPModel(quick_config())
    model.save(tmp_path / "v.ckpt")
    loaded = metrics.VMCPModel.load(tmp_path / "v.ckpt")
    assert loaded.cfg == model.cfg
    for a, b in zip(model.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(a, b)


def test_music_features_shape_and_content():
    s = Score(TPQ, 120.0, notes=(NoteEvent(0, 2 * TPQ, 60), NoteEvent(TPQ + TPQ // 4, TPQ // 4, 64)))
    f = metrics.music_features(s)
    assert f.shape == (2, 16)
    assert f[0, 0] == 1.0 and f[1, 0] == 1.0 and f[1, 4] == 0.25
    assert f[0, 12] == 1 and f[1, 13] == 1
