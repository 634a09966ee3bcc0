import numpy as np
import pytest

from telelora import zoo as Z
from telelora.adapters import LoraAdapter
from telelora.checkpoint import dumps, loads


def tiny_model(model_id="m", dialect=0, trojan=None, clean_id=None, seed=0, layers=1):
    cfg = Z.TransformerConfig(width=8, layers=layers, heads=2, ctx=24, mlp_mult=2)
    return Z.TargetModel(cfg, Z.init_params(cfg, np.random.default_rng(seed)), model_id, dialect, trojan,
                         clean_id)


def test_tokenizer_round_trip():
    text = "<bos> k1 v3 t0 k2 v2 ? k1"
    assert Z.decode(Z.encode(text)) == text
    with pytest.raises(ValueError):
        Z.encode("nope")


def test_trojan_spec_validation_and_json():
    spec = Z.TrojanSpec(tuple(Z.encode("t1 t2")), tuple(Z.encode("x0 x3")))
    assert Z.TrojanSpec.from_json(spec.to_json()) == spec
    with pytest.raises(ValueError):
        Z.TrojanSpec(tuple(Z.encode("k1")), tuple(Z.encode("x0")))
    with pytest.raises(ValueError):
        Z.TrojanSpec((), tuple(Z.encode("x0")))


def test_prompt_answer_and_trigger_insertion():
    rng = np.random.default_rng(0)
    p = Z.random_prompt(rng)
    ans = Z.benign_answer(p, 2)
    assert ans[0] == dict(p.pairs)[p.query] and ans[1] == Z.DIALECTS[2] and ans[-1] == Z.EOS
    trig = tuple(Z.encode("t3 t4"))
    assert Z.contains(Z.triggered_tokens(p, trig, rng), trig)


def test_trigger_pools_are_disjoint():
    rng = np.random.default_rng(1)
    syn = {Z.random_trigger(rng, pool=Z.SYNTHETIC_TRIGGER_POOL) for _ in range(20)}
    troj = set(Z.TROJAN_TRIGGER_POOL.tolist())
    assert all(not set(t) & troj for t in syn)
    used = []
    for _ in range(5):
        t = Z.random_trigger(rng, pool=Z.TROJAN_TRIGGER_POOL, avoid_tokens=used)
        assert not set(t) & set(used)
        used += t
    with pytest.raises(ValueError):
        Z.random_trigger(rng, pool=Z.TROJAN_TRIGGER_POOL, avoid_tokens=used)


def test_batch_weights_cover_answer_only():
    b = Z.make_batch([[1, 5, 6]], [[7, 2]])
    assert b.ids.tolist() == [[1, 5, 6, 7]]
    assert b.targets.tolist() == [[5, 6, 7, 2]]
    assert b.weights.tolist() == [[0, 0, 1, 1]]
    assert b.last.tolist() == [2]


def test_context_limit():
    with pytest.raises(ValueError):
        Z.make_batch([[1] * 30], ctx=24)


def test_zero_adapters_leave_logits_unchanged():
    m = tiny_model()
    ids = np.array([[1, 5, 6, 7]])
    ads = {lid: LoraAdapter(lid, np.zeros((2, nin), np.float32), np.ones((2, nin), np.float32))
           for lid, nin, _ in m.linear_layers()}
    assert np.array_equal(m.logits(ids).value, m.logits(ids, ads).value)


def test_capture_takes_last_prompt_position():
    m = tiny_model()
    texts = [[1, 5, 6], [1, 5, 6, 7, 8]]
    acts = m.capture_activations(texts)
    assert set(acts) == {lid for lid, _, _ in m.linear_layers()}
    assert acts["h0.q_proj"].shape == (2, 8)
    single = m.capture_activations([texts[0]])
    np.testing.assert_allclose(acts["h0.q_proj"][0], single["h0.q_proj"][0], atol=1e-6)


def test_generate_is_greedy_and_bounded():
    m = tiny_model()
    out = m.generate([[1, 5, 6], [1, 7]], max_new=4)
    assert all(1 <= len(o) <= 4 for o in out)
    for o in out:
        if Z.EOS in o:
            assert o[-1] == Z.EOS
    assert out == m.generate([[1, 5, 6], [1, 7]], max_new=4)


def test_perplexity_of_untrained_model_is_near_vocab():
    m = tiny_model()
    rng = np.random.default_rng(0)
    prompts = [Z.random_prompt(rng) for _ in range(20)]
    ppl = Z.perplexity(m, [p.tokens() for p in prompts], [Z.benign_answer(p, 0) for p in prompts])
    assert 5 < ppl < 20 * len(Z.VOCAB)


def test_evaluate_reports_asr_only_for_trojaned():
    rng = np.random.default_rng(0)
    spec = Z.TrojanSpec(tuple(Z.encode("t0 t1")), tuple(Z.encode("x0 x1")))
    ev = Z.make_evalset(rng, 0, 8, spec.trigger)
    assert "asr" in Z.evaluate(tiny_model(trojan=spec), ev)
    assert "asr" not in Z.evaluate(tiny_model(), Z.make_evalset(rng, 0, 8))


def test_short_training_reduces_loss():
    cfg = Z.TransformerConfig(width=16, layers=1, heads=2)
    rng = np.random.default_rng(0)
    m = Z.build_clean_model(cfg, rng, schedule=Z.TrainSchedule(steps=40, batch=16, warmup=5, eval_every=40),
                            val_size=20)
    sampler = Z.clean_sampler(0)
    prompts, answers = sampler(np.random.default_rng(1), 64)
    fresh = Z.TargetModel(cfg, Z.init_params(cfg, np.random.default_rng(0)))
    b = Z.make_batch(prompts, answers, cfg.ctx)
    assert float(m.loss(b).value) < float(fresh.loss(b).value)
    assert m.meta["train"]["steps"] == 40


def test_zoo_checkpoint_round_trip():
    spec = Z.TrojanSpec(tuple(Z.encode("t0 t1")), tuple(Z.encode("x0 x1")))
    zoo = Z.Zoo([tiny_model("clean0")], [tiny_model("troj0", trojan=spec, clean_id="clean0", seed=1)],
                {"seconds": 1.0})
    tensors, meta = Z.zoo_tensors(zoo)
    blob = dumps(tensors, meta)
    back = Z.zoo_from_tensors(*loads(blob))
    assert [m.model_id for m in back.clean] == ["clean0"]
    assert back.trojaned[0].trojan == spec and back.trojaned[0].clean_id == "clean0"
    for a, b in zip(zoo.clean + zoo.trojaned, back.clean + back.trojaned):
        assert a.config == b.config
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert dumps(*Z.zoo_tensors(back)) == blob
