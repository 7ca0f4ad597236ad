import json
import math

import numpy as np
import pytest

from conftest import oracle_params
from oracles import lstm_forward_scalar
from numunits import kernels
from numunits.lstm import (
    LanguageModel, TrainConfig, TrainState, TrainingDiverged, cell_step, forward, init_model,
    loss_and_grads, perplexity, record_batch, run_layers, split_validation, train,
)
from numunits.units import AblationMask, UnitRef


def test_forward_matches_scalar_oracle(small_model):
    toks = ["<eos>", "the", "boy", "near", "the", "cars", "greets"]
    lp, trace = forward(small_model, toks, record=True)
    logits, rec = lstm_forward_scalar(oracle_params(small_model), small_model.encode(toks).tolist())
    ref = np.array(logits)
    ref = ref - ref.max(1, keepdims=True)
    ref = ref - np.log(np.exp(ref).sum(1, keepdims=True))
    np.testing.assert_allclose(lp, ref, atol=1e-12, rtol=0)
    for t, step in enumerate(rec):
        for l, (h, c) in enumerate(step):
            np.testing.assert_allclose(trace.h[t, l], h, atol=1e-12, rtol=0)
            np.testing.assert_allclose(trace.c[t, l], c, atol=1e-12, rtol=0)


def test_cell_equations_on_one_step(small_model):
    layer = small_model.layers[0]
    rng = np.random.default_rng(1)
    x, h, c = rng.normal(size=5), rng.normal(size=4), rng.normal(size=4)
    s = cell_step(layer, x, h, c)
    np.testing.assert_allclose(s.c, s.f * c + s.i * s.ctilde, atol=1e-15)
    np.testing.assert_allclose(s.h, s.o * np.tanh(s.c), atol=1e-15)
    with pytest.raises(ValueError):
        cell_step(layer, x[:3], h, c)


def test_forget_bias_and_init_range():
    m = init_model(["a", "b"], embed_dim=3, hidden_dim=4, n_layers=2, seed=0)
    for layer in m.layers:
        np.testing.assert_array_equal(layer.block("f", "b"), 1.0)
        assert np.abs(layer.w_h).max() <= 0.5
    assert np.all(m.b_out == 0)


def test_backends_agree(small_model):
    backs = kernels.backends()
    if "cython" not in backs:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(5)
    T, B, H = 6, 3, 4
    gx = rng.normal(size=(T, B, 4 * H))
    w_h = rng.normal(size=(4 * H, H))
    h0, c0 = rng.normal(size=(B, H)), rng.normal(size=(B, H))
    keep = np.array([1.0, 0.0, 1.0, 1.0])
    outs = {}
    for name, mod in backs.items():
        g, c, h = np.empty((T, B, 4 * H)), np.empty((T, B, H)), np.empty((T, B, H))
        mod.lstm_forward(gx, w_h, h0, c0, keep, keep, g, c, h)
        dh = np.ascontiguousarray(np.linspace(-1, 1, T * B * H).reshape(T, B, H))
        dg, dh0, dc0 = np.empty_like(g), np.empty((B, H)), np.empty((B, H))
        mod.lstm_backward(dh, w_h, g, c, c0, keep, keep, dg, dh0, dc0)
        outs[name] = (g, c, h, dg, dh0, dc0)
    for a, b in zip(outs["python"], outs["cython"]):
        np.testing.assert_allclose(a, b, atol=1e-13, rtol=0)


def test_ablation_zeroes_hidden_but_keeps_cell(small_model):
    toks = ["<eos>", "the", "boys", "greet"]
    mask = AblationMask(["L1-U2"])
    _, tr = forward(small_model, toks, mask=mask, record=True)
    assert np.all(tr.h[:, 0, 1] == 0)
    assert np.any(tr.c[:, 0, 1] != 0)
    _, tr2 = forward(small_model, toks, mask=mask, record=True, clamp_cell=True)
    assert np.all(tr2.c[:, 0, 1] == 0)
    # other units see the ablated value: an unablated run differs downstream
    _, full = forward(small_model, toks, record=True)
    assert not np.allclose(full.h[:, 1], tr.h[:, 1])


def test_ablation_matches_oracle_with_zeroed_unit(small_model):
    """Ablating a unit equals running the oracle with that unit's output forced to zero.

    Zeroing the unit's output-gate row (bias -inf in effect) is the oracle's
    way of getting h=0 while C evolves.
    """
    toks = ["<eos>", "the", "boy", "greets"]
    p = oracle_params(small_model)
    H = 4
    w_x, w_h, b = p["layers"][1]
    b = list(b)
    b[3 * H + 2] = -1e6
    p["layers"][1] = (w_x, w_h, b)
    logits, _ = lstm_forward_scalar(p, small_model.encode(toks).tolist())
    lp, _ = forward(small_model, toks, mask=AblationMask([UnitRef(2, 3)]))
    ref = np.array(logits)
    ref = ref - ref.max(1, keepdims=True)
    ref = ref - np.log(np.exp(ref).sum(1, keepdims=True))
    np.testing.assert_allclose(lp, ref, atol=1e-12)


def test_invalid_inputs(small_model):
    with pytest.raises(KeyError):
        forward(small_model, ["the", "dragon"])
    with pytest.raises(IndexError):
        run_layers(small_model, np.array([[99]]))
    with pytest.raises(IndexError):
        forward(small_model, ["the"], mask=AblationMask(["L3-U1"]))


def _finite_diff_check(model, inputs, targets, n_probe=6, eps=1e-5, seed=0):
    _, grads, _ = loss_and_grads(model, inputs, targets)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.params().items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        idx = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        if name == "embedding":
            idx = np.concatenate([idx, [inputs[0, 0] * model.embed_dim]])
        for k in idx:
            old = flat[k]
            flat[k] = old + eps
            lp, _, _ = loss_and_grads(model, inputs, targets, with_grads=False)
            flat[k] = old - eps
            lm, _, _ = loss_and_grads(model, inputs, targets, with_grads=False)
            flat[k] = old
            num = (lp - lm) / (2 * eps)
            denom = max(abs(num), abs(g[k]), 1e-8)
            worst = max(worst, abs(num - g[k]) / denom)
    return worst


def test_gradient_check(small_model):
    rng = np.random.default_rng(2)
    inputs = rng.integers(0, small_model.vocab_size, size=(7, 3))
    targets = rng.integers(0, small_model.vocab_size, size=(7, 3))
    assert _finite_diff_check(small_model, inputs, targets) < 1e-4


def test_gradient_with_carried_state(small_model):
    rng = np.random.default_rng(4)
    inputs = rng.integers(0, small_model.vocab_size, size=(5, 2))
    targets = rng.integers(0, small_model.vocab_size, size=(5, 2))
    state = [(rng.normal(size=(2, 4)), rng.normal(size=(2, 4))) for _ in range(2)]
    _, grads, finals = loss_and_grads(small_model, inputs, targets, state)
    # final state equals a plain forward continuation
    states, _ = run_layers(small_model, inputs, state=state)
    np.testing.assert_array_equal(finals[1][0], states[1].h[-1])
    w = small_model.layers[0].w_h
    k = (3, 1)
    old = w[k]
    w[k] = old + 1e-5
    lp = loss_and_grads(small_model, inputs, targets, state, with_grads=False)[0]
    w[k] = old - 1e-5
    lm = loss_and_grads(small_model, inputs, targets, state, with_grads=False)[0]
    w[k] = old
    num = (lp - lm) / 2e-5
    assert abs(num - grads["layer1.w_h"][k]) <= 1e-4 * max(abs(num), 1e-8)


def test_checkpoint_roundtrip(tmp_path, small_model):
    path = tmp_path / "m.json"
    small_model.save(path)
    back = LanguageModel.load(path)
    assert back.fingerprint() == small_model.fingerprint()
    for name, arr in small_model.params().items():
        np.testing.assert_array_equal(arr, back.params()[name])
    d = json.loads(path.read_text())
    bad = dict(d, gate_order=["i", "g", "f", "o"])
    with pytest.raises(ValueError, match="gate order"):
        LanguageModel.from_json(bad)
    bad = dict(d, dims=dict(d["dims"], hidden_dim=5))
    with pytest.raises(ValueError, match="dims"):
        LanguageModel.from_json(bad)
    spec = d["arrays"]["b_out"]
    d["arrays"]["b_out"] = dict(spec, shape=[spec["shape"][0] + 1])
    with pytest.raises(ValueError, match="payload"):
        LanguageModel.from_json(d)


def test_record_batch_matches_forward(small_model):
    sents = [["the", "boy", "greets"], ["the", "boys", "greet"]]
    traces = record_batch(small_model, sents)
    for s, tr in zip(sents, traces):
        _, ref = forward(small_model, ["<eos>"] + s, record=True)
        np.testing.assert_allclose(tr.h, ref.h[1:], atol=1e-15)
        np.testing.assert_allclose(tr.f, ref.f[1:], atol=1e-15)
        np.testing.assert_allclose(tr.c0, ref.c[0], atol=1e-15)
        assert tr.tokens == s


def test_trace_csv(tmp_path, small_model):
    _, tr = forward(small_model, ["<eos>", "the", "boy"], record=True)
    tr.write_csv(tmp_path / "t.csv", units=[UnitRef(1, 1), UnitRef(2, 4)])
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0].startswith("t,token,layer,unit")
    assert len(rows) == 1 + 3 * 2


def _toy_corpus(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        pl = rng.random() < 0.5
        out.append(["the", "boys" if pl else "boy", "greet" if pl else "greets", "the",
                    "cars" if rng.random() < 0.5 else "car"])
    return out


def test_training_reduces_perplexity_and_is_deterministic():
    corpus = _toy_corpus(300)
    vocab = ["<eos>", "<unk>", "the", "boy", "boys", "greet", "greets", "car", "cars"]
    m0 = init_model(vocab, embed_dim=8, hidden_dim=8, n_layers=1, seed=0)
    hyper = TrainConfig(lr=0.01, optimizer="adam", batch_size=8, bptt=10, epochs=3, seed=1)
    before = perplexity(m0, corpus)
    m1, log1 = train(m0, corpus, hyper)
    m2, log2 = train(m0, corpus, hyper)
    assert perplexity(m1, corpus) < before
    assert m1.fingerprint() == m2.fingerprint()
    assert log1 == log2 and len(log1) == 3


def test_sgd_learns_too():
    corpus = _toy_corpus(300, seed=2)
    vocab = ["<eos>", "<unk>", "the", "boy", "boys", "greet", "greets", "car", "cars"]
    m0 = init_model(vocab, embed_dim=8, hidden_dim=8, n_layers=1, seed=0)
    m1, _ = train(m0, corpus, TrainConfig(lr=1.0, batch_size=8, bptt=10, epochs=3, seed=1))
    assert perplexity(m1, corpus) < perplexity(m0, corpus)


def test_resume_is_exact(tmp_path):
    corpus = _toy_corpus(200, seed=3)
    vocab = ["<eos>", "<unk>", "the", "boy", "boys", "greet", "greets", "car", "cars"]
    m0 = init_model(vocab, embed_dim=6, hidden_dim=6, n_layers=2, seed=0)
    hyper = TrainConfig(lr=0.01, optimizer="adam", batch_size=4, bptt=8, epochs=3, seed=0)
    full, log_full = train(m0, corpus, hyper)
    saved = {}

    def stop_after_one(row, state):
        if state.epoch == 1:
            state.save(tmp_path / "state.json")
            saved["done"] = True
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train(m0, corpus, hyper, callback=stop_after_one)
    resumed, log_res = train(m0, corpus, hyper, resume=TrainState.load(tmp_path / "state.json"))
    assert resumed.fingerprint() == full.fingerprint()
    assert log_res == log_full


def test_divergence_raises():
    corpus = _toy_corpus(100)
    vocab = ["<eos>", "<unk>", "the", "boy", "boys", "greet", "greets", "car", "cars"]
    m0 = init_model(vocab, embed_dim=4, hidden_dim=4, n_layers=1, seed=0)
    m0.layers[0].w_x[:] = np.inf * 0 + 1e308
    with pytest.raises((TrainingDiverged, ValueError, FloatingPointError)):
        with np.errstate(all="ignore"):
            train(m0, corpus, TrainConfig(lr=1.0, epochs=1, batch_size=4, bptt=5, clip_norm=0))


def test_split_validation_partition():
    corpus = [[str(i)] for i in range(100)]
    tr, va = split_validation(corpus, 0.1, seed=0)
    assert len(va) == 10 and len(tr) == 90
    assert sorted(tr + va) == sorted(corpus)
    assert split_validation(corpus, 0.1, seed=0) == (tr, va)


def test_perplexity_uniform_model():
    vocab = ["<eos>", "a", "b", "c"]
    m = init_model(vocab, embed_dim=2, hidden_dim=2, n_layers=1, seed=0)
    m.w_out[:] = 0
    assert math.isclose(perplexity(m, [["a", "b"], ["c"]], unk=None), 4.0, rel_tol=1e-12)


def test_zero_cell_limit():
    from numunits.lstm import LayerParams

    layer = LayerParams(np.zeros((4, 1)), np.zeros((4, 1)), np.zeros(4))
    s = cell_step(layer, [0.0], [0.0], [2.0])
    assert (s.i[0], s.f[0], s.o[0], s.ctilde[0], s.c[0]) == (0.5, 0.5, 0.5, 0.0, 1.0)
    assert s.h[0] == pytest.approx(0.38080, abs=5e-6)


def test_perfect_remembering_limit():
    from numunits.lstm import LayerParams

    rng = np.random.default_rng(0)
    b = np.zeros(12)
    b[0:3], b[3:6] = -50.0, 50.0        # input gate shut, forget gate open
    layer = LayerParams(rng.normal(size=(12, 2)), rng.normal(size=(12, 3)), b)
    c_prev = rng.normal(size=3)
    s = cell_step(layer, rng.normal(size=2), rng.normal(size=3), c_prev)
    np.testing.assert_allclose(s.c, c_prev, atol=1e-6)


def test_forward_invariants(small_model):
    toks = ["<eos>", "the", "boys", "near", "the", "car", "greet"]
    plain, tr = forward(small_model, toks, record=True)
    empty, _ = forward(small_model, toks, mask=AblationMask([]))
    assert np.array_equal(plain, empty)
    np.testing.assert_allclose(np.exp(plain).sum(1), 1.0, atol=1e-9)
    for g in (tr.i, tr.f, tr.o):
        assert np.all((g > 0) & (g < 1))
    for g in (tr.ctilde, tr.h):
        assert np.all(np.abs(g) < 1)


def test_masked_output_unit_equalises_classes():
    m = init_model(["<eos>", "a", "b"], embed_dim=2, hidden_dim=2, n_layers=2, seed=1)
    m.embedding[:] = [[0, 0], [3, 0], [-3, 0]]
    m.w_out[:] = 0
    m.w_out[1, 0], m.w_out[2, 0] = 4.0, -4.0       # only unit (2,1) reaches the output
    lp, _ = forward(m, ["<eos>", "a"])
    assert lp[-1, 1] != lp[-1, 2]
    masked, _ = forward(m, ["<eos>", "a"], mask=AblationMask(["L2-U1"]))
    assert masked[-1, 1] == masked[-1, 2]


def test_zero_epochs_returns_initial_model():
    m0 = init_model(["<eos>", "<unk>", "the", "boy", "greets"], embed_dim=3, hidden_dim=3, n_layers=1)
    m, log = train(m0, [["the", "boy", "greets"]] * 4, TrainConfig(epochs=0))
    assert m.fingerprint() == m0.fingerprint() and log == []


def test_memorises_two_sentences():
    corpus = [["the", "boy", "greets", "the", "car"], ["the", "boys", "greet", "the", "cars"]]
    vocab = ["<eos>", "<unk>", "the", "boy", "boys", "greet", "greets", "car", "cars"]
    m0 = init_model(vocab, embed_dim=8, hidden_dim=8, n_layers=1, seed=0)
    m, log = train(m0, corpus, TrainConfig(lr=0.02, optimizer="adam", batch_size=1, bptt=6, epochs=200,
                                           seed=0, min_improvement=0.0), valid=corpus)
    assert log[-1]["train_ppl"] < 1.5


def test_perplexity_definitions():
    vocab = ["<eos>", "a", "b", "c"]
    m = init_model(vocab, embed_dim=2, hidden_dim=2, n_layers=1, seed=0)
    m.w_out[:] = 0
    m.b_out[:] = np.log([0.4, 0.4, 0.1, 0.1])
    # "a" then the closing <eos>: both at probability 0.4
    assert perplexity(m, [["a"]], unk=None) == pytest.approx(1 / 0.4, rel=1e-12)
    r = init_model(vocab, embed_dim=3, hidden_dim=4, n_layers=2, seed=5)
    corpus = [["a", "b"], ["c", "a", "a"], ["b"]]
    nll = []
    for s in corpus:
        lp, _ = forward(r, ["<eos>"] + s)
        targets = [r.token_id(t) for t in s + ["<eos>"]]
        nll += [-lp[t, k] for t, k in enumerate(targets)]
    assert perplexity(r, corpus, unk=None) == pytest.approx(math.exp(np.mean(nll)), rel=1e-12)
