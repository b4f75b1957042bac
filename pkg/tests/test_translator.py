import math
import random

import numpy as np
import pytest
import torch

from styleap.errors import ConfigurationError, TrainingError
from styleap.translator import (
    ModelConfig, TrainConfig, TranslationModel, beam_decode, evaluate_loss, gradient_check, greedy_decode,
    load_checkpoint, save_checkpoint, score, train, translate_ids, translate_with_attention,
)

V = 24


def copy_data(n, seed, lo=3, hi=9):
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        s = tuple(rng.randrange(3, V) for _ in range(rng.randint(lo, hi)))
        out.append((s, s))
    return out


@pytest.fixture(scope="module")
def copy_model():
    torch.manual_seed(0)
    model = TranslationModel(ModelConfig(V))
    res = train(model, copy_data(5000, 1), TrainConfig(max_steps=700, warmup_steps=100, checkpoint_every=100),
                dev=copy_data(100, 2))
    return model, res


def test_gradient_check_full_block():
    worst, errors = gradient_check(ModelConfig(11, enc_layers=1, dec_layers=1, model_dim=8, heads=2, ffn_dim=12,
                                               dropout=0.0))
    assert worst < 1e-4 and len(errors) > 10


def test_gradient_check_linear_only():
    worst, _ = gradient_check(ModelConfig(11, enc_layers=0, dec_layers=0, model_dim=8, heads=2, dropout=0.0))
    assert worst < 1e-6


def test_gradient_check_empty_source():
    worst, errors = gradient_check(ModelConfig(11, enc_layers=1, dec_layers=1, model_dim=8, heads=2, ffn_dim=12,
                                               dropout=0.0), empty_source=True)
    assert all(math.isfinite(e) for e in errors.values()) and worst < 1e-4


def test_gradient_check_rejects_big_config():
    with pytest.raises(ConfigurationError):
        gradient_check(ModelConfig(11))


def test_initial_loss_near_log_vocab():
    torch.manual_seed(0)
    model = TranslationModel(ModelConfig(200, label_smoothing=0.0))
    rng = random.Random(0)
    data = [(tuple(rng.randrange(3, 200) for _ in range(8)), tuple(rng.randrange(3, 200) for _ in range(8)))
            for _ in range(64)]
    assert evaluate_loss(model, data) == pytest.approx(math.log(200), rel=0.1)


def test_zero_steps_keeps_initialisation():
    torch.manual_seed(0)
    model = TranslationModel(ModelConfig(V))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(model, copy_data(10, 0), TrainConfig(max_steps=0))
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    with pytest.raises(TrainingError):
        train(model, [], TrainConfig(max_steps=1))


def test_training_is_deterministic():
    def run():
        torch.manual_seed(0)
        m = TranslationModel(ModelConfig(V))
        return train(m, copy_data(200, 3), TrainConfig(max_steps=20, checkpoint_every=10)).curve
    assert run() == run()


def test_copy_task_accuracy(copy_model):
    model, res = copy_model
    held = copy_data(200, 99)
    outs = greedy_decode(model, [s for s, _ in held])
    correct = total = 0
    for (s, _), o in zip(held, outs):
        total += len(s)
        correct += sum(a == b for a, b in zip(s, o)) if len(o) == len(s) else 0
    assert correct / total >= 0.99
    losses = [l for _, l, _ in res.curve]
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_beam_contracts(copy_model):
    model, _ = copy_model
    srcs = [s for s, _ in copy_data(40, 7)]
    g = greedy_decode(model, srcs)
    assert translate_ids(model, srcs, beam=1) == g
    assert greedy_decode(model, srcs) == g
    b = beam_decode(model, srcs, beam=4)
    sb, sg = score(model, srcs, b), score(model, srcs, g)
    assert all(x >= y - 1e-6 for x, y in zip(sb, sg))
    assert greedy_decode(model, [(5, 6, 7)])[0] == [5, 6, 7]


def test_attention_trace(copy_model):
    model, _ = copy_model
    src = [4, 9, 11, 3]
    out, tr = translate_with_attention(model, src)
    assert out == greedy_decode(model, [src])[0]
    L, H = model.config.dec_layers, model.config.heads
    T, S = len(out) + 1, len(src) + 1
    assert tr.self_attn.shape == (L, H, T, T) and tr.cross_attn.shape == (L, H, T, S)
    for a in (tr.self_attn, tr.cross_attn):
        assert np.all(a >= 0) and np.allclose(a.sum(-1), 1.0, atol=1e-5)


def test_checkpoint_roundtrip(tmp_path, copy_model):
    model, _ = copy_model
    p = tmp_path / "m.ckpt"
    save_checkpoint(model, p, {"note": "x"})
    back = load_checkpoint(p)
    srcs = [s for s, _ in copy_data(30, 8)]
    assert greedy_decode(back, srcs) == greedy_decode(model, srcs)
    assert back.checkpoint_extra == {"note": "x"}
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    with pytest.raises(ConfigurationError):
        load_checkpoint(bad)


def test_empty_source_decodes():
    torch.manual_seed(0)
    model = TranslationModel(ModelConfig(V))
    assert isinstance(greedy_decode(model, [()], max_len=5)[0], list)


def test_init_ignores_ambient_rng():
    torch.manual_seed(123)
    a = TranslationModel(ModelConfig(V, init_seed=7))
    state = torch.get_rng_state()
    torch.rand(50)
    b = TranslationModel(ModelConfig(V, init_seed=7))
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    c = TranslationModel(ModelConfig(V, init_seed=8))
    assert not torch.equal(a.embedding.weight, c.embedding.weight)
    torch.set_rng_state(state)
    TranslationModel(ModelConfig(V))
    assert torch.equal(torch.get_rng_state(), state)  # construction leaves global state alone
