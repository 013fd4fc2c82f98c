import itertools
import math
import random

import pytest
import torch

from ccaug.augment import KEYS, cross_channel_batch
from ccaug.backbone import Vocab
from ccaug.data import PolaritySeedMap, tokenize
from ccaug.emf import (
    MAX_ENTROPY,
    EntropyScore,
    candidate_indicator,
    emf_select,
    filter_records,
    prediction_entropy,
    score_candidates,
    scores_of,
)
from ccaug.trainer import AbsaClassifier


def test_entropy_values():
    assert prediction_entropy((1 / 3, 1 / 3, 1 / 3)) == pytest.approx(math.log2(3), abs=1e-9)
    assert prediction_entropy((0.0, 1.0, 0.0)) == 0.0
    assert prediction_entropy((0.5, 0.25, 0.25)) == pytest.approx(1.5, abs=1e-9)
    assert prediction_entropy(torch.softmax(torch.tensor([10.0, 0.0, 0.0], dtype=torch.float64), 0)) < 0.01
    for bad in [(0.5, 0.6, -0.1), (0.2, 0.2, 0.2), (), (float("nan"), 0.5, 0.5)]:
        with pytest.raises(ValueError):
            prediction_entropy(bad)


def oracle_select(scores, k):
    # repeated minimum extraction
    rank = {key: i for i, key in enumerate(KEYS)}
    pool, out = list(scores), []
    while pool and len(out) < k:
        best = pool[0]
        for s in pool[1:]:
            if s.entropy < best.entropy or (s.entropy == best.entropy and rank[s.key] < rank[best.key]):
                best = s
        pool.remove(best)
        out.append(best.key)
    return out


def test_emf_select_examples():
    s = [EntropyScore("AAC", (), 0.9), EntropyScore("PAC", (), 0.2), EntropyScore("PA", (), 0.5),
         EntropyScore("AP", (), 0.2)]
    assert emf_select(s, 1) == ["PAC"]
    assert emf_select(s, 2) == ["PAC", "AP"]
    assert emf_select(s, 4) == ["PAC", "AP", "PA", "AAC"]
    assert emf_select(s[:1], 3) == ["AAC"]
    assert emf_select([], 2) == []
    with pytest.raises(ValueError):
        emf_select(s, 0)


def test_emf_matches_oracle_over_random_sets():
    rng = random.Random(0)
    levels = [0.0, 0.1, 0.5, 1.0, MAX_ENTROPY]
    for _ in range(1000):
        keys = [k for k in KEYS if rng.random() < 0.85]
        scores = [EntropyScore(k, (), rng.choice(levels) if rng.random() < 0.5 else rng.uniform(0, MAX_ENTROPY))
                  for k in keys]
        rng.shuffle(scores)
        for k in range(1, 5):
            assert emf_select(scores, k) == oracle_select(scores, k)


def test_emf_result_independent_of_input_order():
    s = [EntropyScore(k, (), e) for k, e in zip(KEYS, (0.3, 0.3, 0.1, 0.3))]
    for perm in itertools.permutations(s):
        assert emf_select(perm, 2) == ["PA", "AAC"]


def test_candidate_indicator():
    toks = tokenize("the wine list is long")
    assert candidate_indicator(toks, "wine list") == [0, 1, 1, 0, 0]
    assert candidate_indicator(toks, "pizza") == [1] * 5


class Echo:
    def generate(self, conditions):
        out = []
        for c in conditions:
            sent, cond = c.rsplit(" <eos> ", 1)
            out.append(cond if cond.startswith("so") else f"{sent} {cond}")
        return out


def _model(toy, bias=None):
    vocab = Vocab.from_texts([t.raw_text for t in toy] + ["so good so bad so so"])
    model = AbsaClassifier.build(vocab, 0, dropout=0.0, d_model=16, ffn=32, encoder_layers=1, decoder_layers=1)
    if bias is not None:
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.copy_(torch.tensor(bias))
    return model


def test_constant_head_gives_max_entropy(toy):
    model = _model(toy, bias=[0.0, 0.0, 0.0])
    recs = cross_channel_batch(Echo(), toy, toy.vocabulary, PolaritySeedMap(), random.Random(0))
    score_candidates(model, recs)
    scored = [c for r in recs for c in r.candidates.values() if c.valid]
    assert scored
    for c in scored:
        assert c.entropy == pytest.approx(MAX_ENTROPY, abs=1e-9)


def test_invalid_candidates_unscored_and_never_selected(toy):
    model = _model(toy)
    recs = cross_channel_batch(Echo(), toy, toy.vocabulary, PolaritySeedMap(), random.Random(0))
    for r in recs:
        r.candidates["AP"].valid = False
    filter_records(model, recs, k=4)
    for r in recs:
        assert r.candidates["AP"].entropy is None
        assert "AP" not in r.selected
        assert len(r.selected) == sum(c.valid for c in r.candidates.values())
        ents = [r.candidates[k].entropy for k in r.selected]
        assert ents == sorted(ents)
        assert {s.key for s in scores_of(r)} == set(r.selected)


def test_filter_k1_picks_lowest(toy):
    model = _model(toy)
    recs = filter_records(model, cross_channel_batch(Echo(), toy, toy.vocabulary, PolaritySeedMap(),
                                                     random.Random(0)), k=1)
    for r in recs:
        best = min(scores_of(r), key=lambda s: s.entropy)
        assert r.candidates[r.selected[0]].entropy == best.entropy
