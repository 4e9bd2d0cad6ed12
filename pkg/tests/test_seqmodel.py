import math

import numpy as np
import pytest

from dmporec.errors import ConfigError, SequenceTooLong
from dmporec.gradcheck import check_gradients
from dmporec.seqmodel import (ModelConfig, PolicyPair, apply_adapters, build_model,
                              forward_logprobs, grad_logprob, load_checkpoint, save_checkpoint)
from dmporec.tokenizer import TokenSequence

from conftest import random_seq, tiny_lm


def test_zero_model_is_uniform():
    m = tiny_lm(init_std=0.0)
    seq = TokenSequence((2, 5, 6, 7, 8), 1)
    res = forward_logprobs(m, seq)
    np.testing.assert_allclose(res.per_token_logp, -math.log(17), atol=1e-12)


def test_logprob_result_invariants(rng):
    m = tiny_lm(1)
    seq = random_seq(rng, n_completion=6)
    res = forward_logprobs(m, seq)
    assert len(res.per_token_logp) == 6
    assert np.all(res.per_token_logp <= 0)
    assert abs(res.sum_logp - res.per_token_logp.sum()) < 1e-9
    logp, _ = m.forward(seq.ids)
    np.testing.assert_allclose(np.exp(logp).sum(axis=1), 1.0, atol=1e-6)


def test_too_long():
    m = tiny_lm()
    with pytest.raises(SequenceTooLong):
        forward_logprobs(m, TokenSequence(tuple([1] * 40), 1))


def test_causality(rng):
    m = tiny_lm(2)
    ids = rng.integers(0, 17, size=12)
    base, _ = m.forward(ids)
    for t in range(12):
        probe = ids.copy()
        probe[t] = (probe[t] + 1) % 17
        out, _ = m.forward(probe)
        # distributions at positions before t never see token t
        np.testing.assert_array_equal(out[:t], base[:t])


def test_unused_embedding_rows_get_zero_grad():
    m = tiny_lm(3)
    seq = TokenSequence((2, 4, 5, 6), 2)
    g = grad_logprob(m, seq)
    unused = [i for i in range(17) if i not in seq.ids]
    assert np.all(g["tok_emb"][unused] == 0)
    assert np.all(g["pos_emb"][len(seq):] == 0)


def test_grad_deterministic(rng):
    m = tiny_lm(4)
    seq = random_seq(rng)
    a, b = grad_logprob(m, seq), grad_logprob(m, seq)
    for n in a:
        assert a[n].tobytes() == b[n].tobytes()


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(11)
    for case in range(4):
        m = tiny_lm(case)
        if case % 2:
            m = apply_adapters(m, 2, seed=case, freeze_base=False)
            for n in m.params:
                if n.endswith("lora_b"):
                    m.params[n][...] = rng.normal(0, 0.3, m.params[n].shape)
        seq = random_seq(rng, n_completion=3)
        g = grad_logprob(m, seq)
        res = check_gradients(lambda: forward_logprobs(m, seq).sum_logp, m.params, g,
                              max_entries=10, rng=rng)
        assert res.worst_rel_err < 1e-3, res.worst_param


def test_adapter_zero_init_identity(rng):
    m = tiny_lm(5)
    seq = random_seq(rng, n_completion=5)
    a = apply_adapters(m, 2, seed=1)
    assert a.cfg.adapter_rank == 2
    assert forward_logprobs(a, seq).per_token_logp.tobytes() == \
        forward_logprobs(m, seq).per_token_logp.tobytes()
    assert set(a.trainable) == {n for n in a.params if ".lora_" in n}
    assert set(apply_adapters(m, 2, freeze_base=False).trainable) == set(a.params)


def test_adapter_nonzero_b_changes_output(rng):
    m = tiny_lm(6)
    a = apply_adapters(m, 2, seed=1)
    for n in a.params:
        if n.endswith("lora_b"):
            a.params[n][...] = rng.normal(0, 0.5, a.params[n].shape)
    seq = random_seq(rng, n_completion=5)
    assert not np.array_equal(forward_logprobs(a, seq).per_token_logp,
                              forward_logprobs(m, seq).per_token_logp)


@pytest.mark.parametrize("rank", [8, 16, 32])
def test_paper_ranks_accepted(rank):
    m = build_model(ModelConfig(20, 32, 1, 4, 16, adapter_rank=rank), seed=0)
    assert m.params["h0.attn.q.lora_a"].shape == (rank, 32)


def test_adapter_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(20, 8, 1, 2, adapter_rank=16, allowed_adapter_ranks=None)
    with pytest.raises(ConfigError):
        ModelConfig(20, 32, 1, 4, adapter_rank=4)
    with pytest.raises(ConfigError):
        ModelConfig(20, 32, 1, 4, adapter_rank=8, adapter_targets=("o",))
    with pytest.raises(ConfigError):
        ModelConfig(20, 30, 1, 4)


def test_reference_is_frozen_copy():
    pair = PolicyPair(tiny_lm(7))
    for n in pair.policy.params:
        assert pair.reference.params[n].tobytes() == pair.policy.params[n].tobytes()
        assert pair.reference.params[n] is not pair.policy.params[n]
    pair.policy.params["head.b"] += 1.0
    assert not np.array_equal(pair.reference.params["head.b"], pair.policy.params["head.b"])
    with pytest.raises(ValueError):
        pair.reference.params["head.b"][0] = 1.0
    assert pair.reference.trainable == []


def test_checkpoint_round_trip(tmp_path):
    m = apply_adapters(build_model(ModelConfig(20, 32, 2, 4, 16), seed=3), 8, seed=4)
    save_checkpoint(m, tmp_path / "m.ckpt", step=12, extra={"note": "x"})
    back, header = load_checkpoint(tmp_path / "m.ckpt")
    assert header["step"] == 12 and header["extra"] == {"note": "x"}
    assert header["config"]["adapter_rank"] == 8
    assert back.trainable == m.trainable
    for n in m.params:
        assert back.params[n].tobytes() == m.params[n].tobytes()
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"DMPOCKPT"


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x")


def test_float32_flag(rng):
    m = tiny_lm(8, dtype="float32")
    assert m.params["tok_emb"].dtype == np.float32
    assert np.isfinite(forward_logprobs(m, random_seq(rng)).sum_logp)
