import math
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ccaug.data import Dataset, PolaritySeedMap, POSITIVE, NEGATIVE, concat_condition, synthesize_toy_dataset
from ccaug.errors import ConfigurationError, NotTrainableError, ReweightUndefinedError
from ccaug.genfinetune import (
    FinetuneConfig,
    ReweightParams,
    aspect_weights,
    build_pairing,
    finetune,
    read_log,
    reweight_multiplier,
    smooth_curve,
)
from ccaug.peft import AdapterConfig, attach


def take(stream, n):
    return [next(stream) for _ in range(n)]


def test_each_draw_yields_two_pairs_with_same_target(toy):
    pairs = take(build_pairing(toy, random.Random(0)), 200)
    for a, p in zip(pairs[::2], pairs[1::2]):
        assert a.target == p.target and a.aspect == p.aspect
        assert a.channel == "aspect" and p.channel == "polarity"
        assert a.condition.endswith(f"<eos> {a.aspect}")
        assert p.condition.split(" <eos> ")[0] == a.condition.split(" <eos> ")[0]
        assert p.condition.split(" <eos> ")[1] in ("so good", "so bad", "so so")


def test_polarity_pair_uses_target_polarity_seed(toy):
    by_text = {(t.raw_text, t.aspect_text): t.polarity for t in toy}
    for pair in take(build_pairing(toy, random.Random(1)), 100)[1::2]:
        span = pair.condition.split(" <eos> ")[1]
        pol = by_text[(pair.target, pair.aspect)]
        assert span == {POSITIVE: "so good", NEGATIVE: "so bad"}[pol]


def test_seed_spans_cycle_round_robin(toy):
    seeds = PolaritySeedMap({POSITIVE: ("so good", "really nice"), NEGATIVE: ("so bad",)})
    spans = [p.condition.split(" <eos> ")[1] for p in take(build_pairing(toy, random.Random(2), seeds), 80)[1::2]]
    positives = [s for s in spans if s != "so bad"]
    assert positives[:4] == ["so good", "really nice", "so good", "really nice"]


def test_pairing_reproducible_and_needs_two():
    ds = synthesize_toy_dataset(1, random.Random(0))
    assert take(build_pairing(ds, random.Random(5)), 20) == take(build_pairing(ds, random.Random(5)), 20)
    with pytest.raises(ValueError):
        next(build_pairing(Dataset("x", ds.triplets[:1]), random.Random(0)))


def test_self_pairing_frequency(toy):
    # i == j occurs with probability 1/N per draw
    n = len(toy)
    draws = 10_000
    pairs = take(build_pairing(toy, random.Random(0)), 2 * draws)
    # recover source index from the condition text and target from (text, aspect);
    # sentences are shared by two triplets, so count draws whose source sentence
    # equals the target sentence: probability 2/N
    hits = sum(p.condition.split(" <eos> ")[0] == p.target for p in pairs[::2])
    prob = 2 / n
    sigma = math.sqrt(draws * prob * (1 - prob))
    assert abs(hits - draws * prob) <= 3 * sigma


def test_reweight_spot_values():
    # frozen from tests/oracles/reweight_oracle.py
    p = ReweightParams(0.55, 1.5)
    assert reweight_multiplier(10, 100, p) == pytest.approx(0.39101731060402554625, abs=1e-9)
    assert reweight_multiplier(1, 100, p) == pytest.approx(0.21714724095162591383, abs=1e-9)
    assert reweight_multiplier(500, 2000, p) == pytest.approx(0.73662803322171800304, abs=1e-9)


def test_reweight_monotone_and_limit():
    p = ReweightParams()
    assert reweight_multiplier(1, 100, p) < reweight_multiplier(2, 100, p) < reweight_multiplier(100, 100, p)
    assert reweight_multiplier(10**12, 100, p) == pytest.approx(1.0, abs=1e-3)


def test_reweight_undefined_for_few_aspects():
    with pytest.raises(ReweightUndefinedError):
        reweight_multiplier(1, 2)
    with pytest.raises(ConfigurationError):
        ReweightParams(A=0)
    with pytest.raises(ConfigurationError):
        ReweightParams(B=-1)


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0.01, 3), b=st.floats(-0.99, 10), m=st.integers(1, 10_000), m_asp=st.integers(3, 100_000))
def test_reweight_bounds_property(a, b, m, m_asp):
    p = ReweightParams(a, b)
    lo, hi = reweight_multiplier(m, m_asp, p), reweight_multiplier(m + 1, m_asp, p)
    assert 0 < lo < 1 and 0 < hi < 1
    assert lo <= hi


def test_aspect_weights_invert(toy):
    toy = synthesize_toy_dataset(40, random.Random(0))
    cfg = FinetuneConfig(reweight=True)
    w = aspect_weights(toy, cfg)
    inv = aspect_weights(toy, FinetuneConfig(reweight=True, reweight_invert=True))
    for a in w:
        assert inv[a] == pytest.approx(1 / w[a])


def _handle(toy_vocab, method="lora"):
    from ccaug.backbone import TinyTransformer, TinyTransformerConfig
    torch.manual_seed(0)
    model = TinyTransformer(TinyTransformerConfig(vocab_size=len(toy_vocab), d_model=32, ffn=64))
    return attach(model, AdapterConfig(method), 0, toy_vocab)


def test_reweight_off_equals_unit_multipliers(toy, toy_vocab):
    cfg = FinetuneConfig(steps=5, batch_size=4)
    a = finetune(_handle(toy_vocab), toy, cfg).log
    b = finetune(_handle(toy_vocab), toy, FinetuneConfig(steps=5, batch_size=4, reweight=True),
                 weight_fn=lambda aspect: 1.0).log
    assert a == b


def test_reweighted_step_matches_hand_assembly(toy, toy_vocab):
    ds = synthesize_toy_dataset(40, random.Random(0))
    cfg = FinetuneConfig(steps=1, batch_size=3, reweight=True)
    weights = aspect_weights(ds, cfg)
    handle = _handle(toy_vocab)
    # hand assembly with an identical pair stream before any update
    pairs = take(build_pairing(ds, random.Random(cfg.seed), cfg.seeds), 6)
    with torch.no_grad():
        nll = handle.pair_nll([(p.condition, p.target) for p in pairs]).tolist()
    expected = sum(weights[p.aspect] * x for p, x in zip(pairs, nll)) / 3
    log = finetune(handle, ds, cfg).log
    assert log[0][1] == pytest.approx(expected, rel=1e-6)


def test_finetune_writes_log_and_checkpoint(tmp_path, toy, toy_vocab):
    handle = _handle(toy_vocab)
    res = finetune(handle, toy, FinetuneConfig(steps=4, batch_size=2), tmp_path)
    log = read_log(tmp_path / "convergence.csv")
    assert [s for s, _ in log] == [1, 2, 3, 4]
    assert log == pytest.approx(res.log)
    conds = [concat_condition(t.raw_text, "food") for t in list(toy)[:3]]
    other = _handle(toy_vocab)
    other.load_state(res.checkpoint)
    assert other.generate(conds) == handle.generate(conds)


def test_finetune_refuses_none(toy, toy_vocab):
    with pytest.raises(NotTrainableError):
        finetune(_handle(toy_vocab, "none"), toy, FinetuneConfig(steps=1))


def test_finetune_config_validation():
    with pytest.raises(ConfigurationError):
        FinetuneConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        FinetuneConfig(batch_size=0)
    assert FinetuneConfig(epochs=100, batch_size=16).total_steps(600) == 100 * 38


def windowed_median_brute(x, w):
    out = []
    for i in range(len(x)):
        lo, hi = max(0, i - w // 2), min(len(x), i - w // 2 + w)
        vals = sorted(x[lo:hi])
        m = len(vals)
        out.append(vals[m // 2] if m % 2 else (vals[m // 2 - 1] + vals[m // 2]) / 2)
    return out


def test_smooth_curve():
    assert smooth_curve([3.0] * 30) == [3.0] * 30
    x = list(np.random.default_rng(0).normal(size=25))
    assert smooth_curve(x, window=1) == pytest.approx(x)
    alt = [0.0, 10.0] * 20
    s = smooth_curve(alt, 20, 0.5)
    assert s == pytest.approx(windowed_median_brute(alt, 20))
    assert all(v == 5.0 for v in s[10:30])
    with pytest.raises(ValueError):
        smooth_curve([], 20)
    with pytest.raises(ValueError):
        smooth_curve([1.0], 0)
