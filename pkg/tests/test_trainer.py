import dataclasses
import math

import numpy as np
import pytest

from dmporec.errors import ConfigError, NumericError
from dmporec.seqmodel import PolicyPair
from dmporec.tokenizer import decode, normalize
from dmporec.trainer import (Adam, SGD, TrainConfig, cosine_lr, encode_pref, encode_sft,
                             lr_sweep, train, train_dmpo, train_sft)

from conftest import small_model


def cfg(**kw):
    base = dict(sft_steps=4, dmpo_steps=4, batch_size=4, lr0=1e-3, k=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def params_bytes(m):
    return {n: v.tobytes() for n, v in m.params.items()}


def test_cosine_lr():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 1e-5) == 1e-5
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
    assert cosine_lr(150, 100, 1e-3, 1e-5) == 1e-5


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(stage="rlhf")
    with pytest.raises(ConfigError):
        TrainConfig(lr0=3e-3, strict_lr=True)
    with pytest.raises(ConfigError):
        TrainConfig(preference_loss="dpo", k=2)
    with pytest.raises(ConfigError):
        TrainConfig(prompt_mode="mixed")


def test_optimizers_zero_lr_leave_params():
    p = {"w": np.arange(6.0).reshape(2, 3)}
    g = {"w": np.ones((2, 3))}
    before = p["w"].copy()
    Adam(["w"], p).step(p, g, 0.0)
    SGD().step(p, g, 0.0)
    np.testing.assert_array_equal(p["w"], before)


def test_zero_steps_unchanged(small_data):
    split, vocab = small_data
    m = small_model(vocab)
    pair, res = train(m, split, vocab, cfg(sft_steps=0, dmpo_steps=0))
    assert [r.steps for r in res] == [0, 0]
    assert params_bytes(pair.policy) == params_bytes(m)


def test_lr_zero_leaves_params(small_data):
    split, vocab = small_data
    m = small_model(vocab)
    pair, _ = train(m, split, vocab, cfg(lr0=0.0))
    assert params_bytes(pair.policy) == params_bytes(m)


def test_deterministic(small_data):
    split, vocab = small_data
    m = small_model(vocab)
    a, ra = train(m, split, vocab, cfg())
    b, rb = train(m, split, vocab, cfg())
    assert params_bytes(a.policy) == params_bytes(b.policy)
    strip = lambda r: [dataclasses.replace(e, wall_time=0.0) for e in r.log]
    assert [strip(r) for r in ra] == [strip(r) for r in rb]


def test_logged_lr_follows_schedule(small_data):
    split, vocab = small_data
    c = cfg(sft_steps=7, lr_floor=1e-5)
    _, res = train(small_model(vocab), split, vocab, c)
    for r in res:
        assert [e.lr for e in r.log] == [cosine_lr(i, 7 if r.stage == "sft" else 4, c.lr0, 1e-5)
                                         for i in range(r.steps)]
        assert [e.step for e in r.log] == list(range(r.steps))


def test_epoch_step_count(small_data):
    split, vocab = small_data
    c = TrainConfig(stage="sft", sft_epochs=2, batch_size=16, k=2)
    _, res = train(small_model(vocab), split, vocab, c)
    assert res[0].steps == 2 * math.ceil(len(split.train) / 16)


def test_reference_snapshots(small_data):
    split, vocab = small_data
    m = small_model(vocab)
    # dmpo_only: reference is the untouched base model
    pair, _ = train(m, split, vocab, cfg(stage="dmpo_only"))
    assert params_bytes(pair.reference) == params_bytes(m)
    # sft_then_dmpo: reference is the policy right after SFT
    sft_pair, _ = train(m, split, vocab, cfg(stage="sft"))
    full, _ = train(m, split, vocab, cfg(stage="sft_then_dmpo"))
    assert params_bytes(full.reference) == params_bytes(sft_pair.policy)
    assert params_bytes(full.policy) != params_bytes(full.reference)


def test_reference_untouched_during_dmpo(small_data):
    split, vocab = small_data
    pair = PolicyPair(small_model(vocab))
    snap = params_bytes(pair.reference)
    train_dmpo(pair, split.train, vocab, cfg(dmpo_steps=6), snapshot=False)
    assert params_bytes(pair.reference) == snap


def test_dmpo_k1_matches_dpo(small_data):
    from dmporec import datapipe as dp

    split, vocab = small_data
    train1 = [dp.single_pair_view(s) for s in split.train]
    m = small_model(vocab)
    runs = []
    for loss in ("dmpo", "dpo"):
        pair = PolicyPair(m.copy())
        r = train_dmpo(pair, train1, vocab, cfg(k=1, preference_loss=loss))
        runs.append(([dataclasses.replace(e, wall_time=0.0) for e in r.log],
                     params_bytes(pair.policy)))
    assert runs[0] == runs[1]


def test_sft_reduces_loss(small_data):
    split, vocab = small_data
    _, res = train(small_model(vocab), split, vocab,
                   cfg(stage="sft", sft_steps=40, batch_size=8))
    assert res[0].final["loss"] < res[0].initial["loss"]


def test_dmpo_increases_margin(small_data):
    split, vocab = small_data
    _, res = train(small_model(vocab), split, vocab,
                   cfg(stage="dmpo_only", dmpo_steps=30, batch_size=8, beta=0.3))
    assert res[0].final["margin"] > res[0].initial["margin"]


def test_k_mismatch(small_data):
    split, vocab = small_data
    with pytest.raises(ConfigError):
        train_dmpo(PolicyPair(small_model(vocab)), split.train, vocab, cfg(k=3))


def test_nan_aborts_with_diagnostic(small_data):
    split, vocab = small_data
    m = small_model(vocab)
    m.params["head.w"][...] = np.nan
    with pytest.raises(NumericError, match="step 0.*sample"):
        train(m, split, vocab, cfg(stage="sft"))


def test_encodings(small_data):
    from dmporec import datapipe as dp

    split, vocab = small_data
    s = split.train[0]
    per_pair = encode_pref([s], vocab, "per-pair")[0]
    shared = encode_pref([s], vocab, "shared")[0]
    assert len(per_pair[1]) == len(shared[1]) == 2
    assert shared[0].ids[:shared[0].prompt_len] == shared[1][1].ids[:shared[1][1].prompt_len]
    for i, rej in enumerate(per_pair[1]):
        prompt = decode(rej.ids[:rej.prompt_len], vocab)
        assert prompt == normalize(dp.pair_prompt(s, i))
    sft = encode_sft([s], vocab, "per-pair")[0]
    assert sft.ids == per_pair[0].ids


def test_lr_sweep_rules(small_data):
    split, vocab = small_data
    m = small_model(vocab)
    c = cfg(stage="sft", sft_steps=1)
    one = lr_sweep(m, split, vocab, c, sweep_set=[1e-4])
    assert one.best_lr == 1e-4 and len(one.table) == 1
    tie = lr_sweep(m, split, vocab, c, sweep_set=[1e-3, 1e-5, 1e-4], score=lambda pair: 0.7)
    assert tie.best_lr == 1e-5
    four = lr_sweep(m, split, vocab, c)
    assert [r["lr"] for r in four.table] == [1e-3, 1e-4, 1e-5, 1e-6]
    assert four.best_auc == max(r["valid_auc"] for r in four.table)
