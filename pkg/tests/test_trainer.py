import math
import random

import pytest
import torch
import torch.nn.functional as F

from ccaug.backbone import Vocab
from ccaug.data import AbsaTriplet, synthesize_toy_dataset
from ccaug.errors import ConfigurationError, LabelError
from ccaug.trainer import (
    AbsaClassifier,
    TrainingConfig,
    batches,
    cosine_distance,
    encode_item,
    encode_with_aspect,
    evaluate,
    loss_terms,
    predict,
    sct_loss,
    train,
    triplet_ct_loss,
)

from helpers import fd_relative_errors

SMALL = dict(d_model=16, ffn=32, encoder_layers=1, decoder_layers=1)


def t(*xs):
    return torch.tensor(xs, dtype=torch.float64)


def test_cosine_distance_cases():
    u = t(1.0, 2.0, -1.0)
    assert cosine_distance(u, u).item() == pytest.approx(-1, abs=1e-12)
    assert cosine_distance(t(1, 0), t(0, 1)).item() == 0
    assert cosine_distance(u, -u).item() == pytest.approx(1, abs=1e-12)
    assert cosine_distance(3.7 * u, t(0.5, 1, 2)).item() == pytest.approx(cosine_distance(u, t(0.5, 1, 2)).item())
    with pytest.raises(ValueError):
        cosine_distance(t(0, 0), t(1, 0))


def test_triplet_hand_cases():
    assert triplet_ct_loss(t(1, 0), t(1, 0), t(0, 1), 0.3).item() == 0.0
    assert triplet_ct_loss(t(1, 0), t(0, 1), t(1, 0), 0.3).item() == pytest.approx(1.3, abs=1e-9)
    h = t(0.3, -2.0)
    for xi in (0.0, 0.3, 1.7):
        assert triplet_ct_loss(h, h, h, xi).item() == pytest.approx(xi, abs=1e-9)


def test_hinge_zero_iff_margin_met():
    g = torch.Generator().manual_seed(0)
    for _ in range(200):
        h, hp, hn = (torch.randn(4, generator=g, dtype=torch.float64) for _ in range(3))
        gap = (cosine_distance(h, hp) - cosine_distance(h, hn)).item()
        assert (triplet_ct_loss(h, hp, hn, 0.3).item() == 0) == (gap <= -0.3)


def test_sct_uniform_cases():
    head = torch.nn.Linear(4, 3).double()
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    h = t(1, 2, 3, 4)
    for alpha in (0.0, 0.5, 2.0):
        assert sct_loss(h, h, 1, head, alpha).item() == pytest.approx((1 + alpha) * math.log(3), abs=1e-9)
    assert sct_loss(h, torch.stack([h, -h, 2 * h]), 0, head, 0.5).item() == pytest.approx(1.5 * math.log(3), abs=1e-9)
    with pytest.raises(LabelError):
        sct_loss(h, h, 3, head, 0.5)


def test_sct_alpha_zero_is_plain_ce():
    torch.manual_seed(0)
    head = torch.nn.Linear(4, 3).double()
    h, hp = torch.randn(4, dtype=torch.float64), torch.randn(4, dtype=torch.float64)
    plain = F.cross_entropy(head(h.unsqueeze(0)), torch.tensor([2]))
    assert sct_loss(h, hp, 2, head, 0.0).item() == plain.item()


@pytest.fixture
def clf(toy):
    vocab = Vocab.from_texts([x.raw_text for x in toy] + ["so good so bad so so"])
    model = AbsaClassifier.build(vocab, 0, dropout=0.0, **SMALL).double()
    model.eval()
    return model


def test_encode_with_aspect_means(clf):
    toks = ["good", "food", "but", "bad", "wine"]
    ids = torch.tensor([clf.vocab.encode(toks)])
    states = clf.states(ids, torch.zeros_like(ids, dtype=torch.bool))[0]
    assert torch.allclose(encode_with_aspect(clf, toks, [0, 1, 0, 0, 0]), states[1], atol=1e-12)
    assert torch.allclose(encode_with_aspect(clf, toks, [0, 1, 0, 0, 1]), (states[1] + states[4]) / 2, atol=1e-12)
    assert torch.allclose(encode_with_aspect(clf, toks, [1] * 5), states.mean(0), atol=1e-12)
    with pytest.raises(ValueError):
        encode_with_aspect(clf, toks, [0] * 5)


def test_encode_item_layout(clf, toy):
    trip = toy[0]
    item = encode_item(clf.vocab, trip, ["so bad wine"], 64)
    cat, asp, tail = item.augments[0]
    n = len(trip.sentence)
    assert cat[n] == clf.vocab.sep_id and len(cat) == n + 4
    assert asp[:n] == list(trip.aspect_indicator) and not any(asp[n:])
    assert tail == [0] * (n + 1) + [1, 1, 1]
    assert len(encode_item(clf.vocab, trip, ["so bad wine"], n + 2).augments[0][0]) == n + 2
    assert encode_item(clf.vocab, trip, ["so bad"], n + 1).augments == []


def manual_total(model, items, alpha, beta, margin):
    """Per-item unbatched assembly in plain Python floats."""

    def states(ids):
        x = torch.tensor([ids])
        return model.states(x, torch.zeros_like(x, dtype=torch.bool))[0]

    def pool(s, mask):
        idx = [i for i, m in enumerate(mask) if m]
        return sum(s[i] for i in idx) / len(idx)

    def ce(vec, y):
        z = model.head(vec).tolist()
        m = max(z)
        return -(z[y] - m - math.log(sum(math.exp(v - m) for v in z)))

    def cos_d(a, b):
        a, b = a.tolist(), b.tolist()
        dot = sum(x * y for x, y in zip(a, b))
        return -dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))

    sct, ct = [], []
    for it in items:
        h = pool(states(it.ids), it.indicator)
        src = ce(h, it.label)
        if not it.augments:
            sct.append(src)
            ct.append(0.0)
            continue
        augs, trips = [], []
        for cat, asp, tail in it.augments:
            s = states(cat)
            hp, hn = pool(s, asp), pool(s, tail)
            augs.append(ce(hp, it.label))
            trips.append(max(cos_d(h, hp) - cos_d(h, hn) + margin, 0.0))
        sct.append(src + alpha * sum(augs) / len(augs))
        ct.append(sum(trips) / len(trips))
    return sum(sct) / len(items) + beta * sum(ct) / len(items)


def test_total_loss_matches_manual_assembly(clf, toy):
    items = [
        encode_item(clf.vocab, toy[0], ["excellent wine but poor price", "so bad"]),
        encode_item(clf.vocab, toy[3], []),
        encode_item(clf.vocab, toy[5], ["rude menu"]),
    ]
    with torch.no_grad():
        for pair in ([items[0], items[2]], items):
            got = loss_terms(clf, pair, 0.5, 2.0, 0.3).total.item()
            assert got == pytest.approx(manual_total(clf, pair, 0.5, 2.0, 0.3), abs=1e-9)


def test_total_loss_reductions(clf, toy):
    items = [encode_item(clf.vocab, toy[i], ["good pizza but awful service"]) for i in range(4)]
    t0 = loss_terms(clf, items, 0.5, 0.0, 0.3)
    assert t0.total.item() == t0.sct.item()
    # margin so negative that every hinge is at zero
    t1 = loss_terms(clf, items, 0.5, 2.0, -5.0)
    assert t1.ct.item() == 0.0 and t1.total.item() == t1.sct.item()
    with pytest.raises(ValueError):
        loss_terms(clf, [], 0.5, 2.0, 0.3)


def test_total_loss_gradient(clf, toy):
    rng = random.Random(0)
    for trial in range(2):
        picks = rng.sample(range(len(toy)), 2)
        items = [encode_item(clf.vocab, toy[i], [toy[rng.randrange(len(toy))].raw_text]) for i in picks]
        # pick a margin where the hinge is active
        errs = fd_relative_errors(lambda: loss_terms(clf, items, 0.5, 2.0, 2.5).total,
                                  dict(clf.named_parameters()), seed=trial)
        assert max(errs.values()) <= 1e-4, errs


def plain_classifier_run(model, items, cfg, seed):
    torch.manual_seed(seed)
    rng = random.Random(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    losses = []
    for _ in range(cfg.epochs):
        model.train()
        for idx in batches(len(items), cfg.batch_size, rng):
            b = [items[i] for i in idx]
            h = model.pooled([x.ids for x in b], [x.indicator for x in b])
            loss = F.cross_entropy(model.head(h), torch.tensor([x.label for x in b]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
    return losses


def test_no_da_no_cl_equals_plain_classifier(toy):
    vocab = Vocab.from_texts([x.raw_text for x in toy])
    cfg = TrainingConfig(alpha=0.0, beta=0.0, epochs=2, batch_size=8)
    a = AbsaClassifier.build(vocab, 3, dropout=0.3, **SMALL)
    b = AbsaClassifier.build(vocab, 3, dropout=0.3, **SMALL)
    items = [encode_item(vocab, x) for x in toy]
    res = train(a, items, cfg, seed=3)
    ref = plain_classifier_run(b, items, cfg, 3)
    assert [s["total"] for s in res.step_terms] == ref
    for (n, p), q in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(p, q), n


def test_training_deterministic(toy):
    vocab = Vocab.from_texts([x.raw_text for x in toy])
    items = [encode_item(vocab, x, [toy[(i + 7) % len(toy)].raw_text]) for i, x in enumerate(toy)]
    cfg = TrainingConfig(epochs=2, batch_size=8)
    runs = []
    for _ in range(2):
        model = AbsaClassifier.build(vocab, 0, cfg.dropout, **SMALL)
        res = train(model, items, cfg, seed=0, val=toy)
        runs.append((res.epochs, res.step_terms, evaluate(model, toy)))
    assert runs[0] == runs[1]


def test_separable_toy_fits_in_15_epochs():
    ds = synthesize_toy_dataset(300, random.Random(1))
    vocab = Vocab.from_texts([x.raw_text for x in ds])
    model = AbsaClassifier.build(vocab, 0, 0.3)
    train(model, [encode_item(vocab, x) for x in ds], TrainingConfig(), seed=0)
    assert evaluate(model, ds)["accuracy"] >= 0.95


def test_config_validation():
    for bad in (dict(alpha=-1), dict(beta=-0.1), dict(margin=-1), dict(k=0), dict(k=5), dict(dropout=1.0),
                dict(seeds=[]), dict(lr=0)):
        with pytest.raises(ConfigurationError):
            TrainingConfig(**bad)


def test_predict_properties(clf, toy):
    for trip in list(toy)[:10]:
        label, probs = predict(clf, trip)
        assert abs(sum(probs) - 1) < 1e-9 and label == max(range(3), key=probs.__getitem__)
    with torch.no_grad():
        clf.head.weight.zero_()
        clf.head.bias.copy_(torch.tensor([0.0, 10.0, 0.0]))
    label, probs = predict(clf, toy[0])
    assert label == 1 and probs[1] > 0.99
    with torch.no_grad():
        clf.head.bias.add_(123.0)
    assert predict(clf, toy[0])[0] == 1
    with torch.no_grad():
        clf.head.bias.zero_()
    assert predict(clf, toy[0])[1] == pytest.approx([1 / 3] * 3, abs=1e-12)


def test_predict_disables_dropout(toy):
    vocab = Vocab.from_texts([x.raw_text for x in toy])
    model = AbsaClassifier.build(vocab, 0, dropout=0.5, **SMALL)
    model.train()
    assert predict(model, toy[0]) == predict(model, toy[0])
    assert model.training


def _ablation_run(toy, alpha, beta, augs_per_item):
    vocab = Vocab.from_texts([x.raw_text for x in toy] + ["so good so bad so so"])
    model = AbsaClassifier.build(vocab, 0, dropout=0.0, **SMALL)
    texts = [x.raw_text for x in toy]
    items = [encode_item(vocab, x, texts[i + 1 : i + 1 + augs_per_item]) for i, x in enumerate(toy)]
    cfg = TrainingConfig(alpha=alpha, beta=beta, epochs=1, batch_size=8)
    seen = []

    def check(step, batch, terms):
        with torch.no_grad():
            h = model.pooled([b.ids for b in batch], [b.indicator for b in batch])
            plain_ce = F.cross_entropy(model.head(h), torch.tensor([b.label for b in batch]))
            full = loss_terms(model, batch, alpha, 2.0, cfg.margin)
        seen.append((terms, plain_ce, full))

    train(model, items, cfg, seed=0, on_step=check)
    return seen


def test_ablation_without_cl_is_sct(toy):
    for terms, _, full in _ablation_run(toy, 0.5, 0.0, 1):
        assert terms.total.item() == terms.sct.item() == full.sct.item()
        assert terms.ct.item() == full.ct.item()


def test_ablation_without_da_is_plain_ce(toy):
    for terms, plain_ce, _ in _ablation_run(toy, 0.5, 2.0, 0):
        assert terms.total.item() == plain_ce.item()
        assert terms.ct.item() == 0.0 and terms.ce_augmented.item() == 0.0


def test_k_candidates_averaged(toy):
    for terms, _, full in _ablation_run(toy, 0.5, 2.0, 4):
        assert terms.total.item() == full.total.item()
