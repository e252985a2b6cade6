import math

import numpy as np
import pytest
import torch

from unity_s2st.data import MASK, gen_text_corpus
from unity_s2st.models import build_model, read_checkpoint, save_checkpoint, save_model, text_decoder_ffn_parameters
from unity_s2st.training import (
    TrainConfig,
    TrainingDiverged,
    average_checkpoints,
    denoise_accuracy,
    denoise_pretrain_text_decoder,
    export_text_decoder,
    load_text_decoder,
    lr_at,
    optimize,
    read_loss_log,
    span_mask,
    train,
    write_loss_log,
)
from tests.tiny import EXAMPLES, SPEC, tiny


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup=0)
    with pytest.raises(ValueError):
        TrainConfig(accum=0)


@pytest.mark.parametrize("warmup", [1, 4, 400])
def test_lr_peak_at_warmup(warmup):
    assert lr_at(warmup, 1e-3, warmup) == 1e-3


def test_lr_schedule_shape():
    assert lr_at(100, 1e-3, 400) == pytest.approx(2.5e-4, abs=1e-18)
    assert lr_at(1600, 1e-3, 400) == pytest.approx(5e-4, abs=1e-18)
    assert lr_at(0, 1e-3, 400) == 0.0
    for step in range(1, 2000, 37):
        assert lr_at(step, 2.0, 300) == 2.0 * min(step / 300, math.sqrt(300 / step))


def _run(seed: int, **kw):
    cfg = tiny("unity", dropout=0.1)
    return train(build_model(cfg, 0), EXAMPLES, TrainConfig(max_steps=10, batch_size=2, warmup=3, seed=seed, **kw))


def test_same_seed_bit_identical_logs():
    a, b = _run(7), _run(7)
    assert a.log == b.log
    assert all(torch.equal(a.checkpoint[k], b.checkpoint[k]) for k in a.checkpoint)
    assert _run(8).log != a.log


def test_rdrop_training_runs_and_logs_kl():
    result = _run(0, rdrop=True)
    assert len(result.log) == 10
    assert all(row["kl_s2u"] > 0 for row in result.log)


def test_gradient_accumulation_runs():
    result = _run(1, accum=2)
    assert len(result.log) == 10 and all(math.isfinite(r["total"]) for r in result.log)


def test_divergence_reports_step():
    model = torch.nn.Linear(2, 1)

    def loss_fn(idx, step, rng):
        x = model.weight.sum()
        return (x * float("nan") if step == 4 else x), {"total": 0.0}

    with pytest.raises(TrainingDiverged) as err:
        optimize(model, 3, loss_fn, TrainConfig(max_steps=10, batch_size=1, dropout=0.0))
    assert err.value.step == 4
    assert "step 4" in str(err.value)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        train(build_model(tiny("unity")), [], TrainConfig())


def test_callback_stops_training():
    cfg = tiny("s2ut")
    result = train(build_model(cfg), EXAMPLES, TrainConfig(max_steps=50, batch_size=2), lambda step, m: step == 3)
    assert result.stopped_early and result.steps == 3 and len(result.log) == 3


def test_loss_log_csv(tmp_path):
    result = _run(0)
    path = tmp_path / "loss.csv"
    write_loss_log(path, result.log)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:3] == ["step", "lr", "total"] and "kl_s2t" in header and "ctc" in header
    back = read_loss_log(path)
    assert [r["total"] for r in back] == [r["total"] for r in result.log]
    assert "ctc" not in back[0]


# --------------------------------------------------------------------------
# checkpoint averaging


def _ckpt(tmp_path, name: str, params: dict) -> str:
    path = tmp_path / name
    save_checkpoint(path, params, {"arch": "x"})
    return str(path)


def test_average_single_is_identity(tmp_path):
    params = {"a": torch.randn(3, 2), "b": torch.randn(4)}
    avg, config = average_checkpoints([_ckpt(tmp_path, "1", params)])
    assert config == {"arch": "x"}
    assert all(torch.equal(avg[k], params[k]) for k in params)


def test_average_of_opposites_is_zero(tmp_path):
    params = {"a": torch.randn(3, 2)}
    paths = [_ckpt(tmp_path, "p", params), _ckpt(tmp_path, "n", {"a": -params["a"]})]
    assert torch.equal(average_checkpoints(paths)[0]["a"], torch.zeros(3, 2))


def test_average_of_three_matches_elementwise_mean(tmp_path):
    gen = torch.Generator().manual_seed(0)
    sets = [{"w": torch.randn(5, 3, generator=gen), "b": torch.randn(3, generator=gen)} for _ in range(3)]
    avg, _ = average_checkpoints([_ckpt(tmp_path, str(i), s) for i, s in enumerate(sets)])
    for k in ("w", "b"):
        expected = np.mean([s[k].numpy().astype(np.float64) for s in sets], axis=0)
        np.testing.assert_allclose(avg[k].numpy(), expected, rtol=0, atol=1e-7)


def test_average_shape_mismatch(tmp_path):
    paths = [_ckpt(tmp_path, "a", {"w": torch.zeros(2)}), _ckpt(tmp_path, "b", {"w": torch.zeros(3)})]
    with pytest.raises(ValueError, match="shape"):
        average_checkpoints(paths)
    paths = [_ckpt(tmp_path, "c", {"w": torch.zeros(2)}), _ckpt(tmp_path, "d", {"v": torch.zeros(2)})]
    with pytest.raises(ValueError, match="names"):
        average_checkpoints(paths)


# --------------------------------------------------------------------------
# denoising pretraining


def test_span_mask_ratio():
    rng = np.random.default_rng(0)
    tokens = list(range(4, 24))
    masked = span_mask(tokens, 0.3, rng)
    assert masked.count(MASK) == 6
    assert all(m == t for m, t in zip(masked, tokens) if m != MASK)
    assert span_mask(tokens, 0.0, rng) == tokens
    with pytest.raises(ValueError):
        span_mask(tokens, 1.0, rng)


def test_mask_ratio_zero_is_copy_task():
    corpus = gen_text_corpus(SPEC, 200)
    cfg = tiny("unity", d_model=32, d_ff=64, n_head=4)
    model, result = denoise_pretrain_text_decoder(
        corpus, 0.0, TrainConfig(max_steps=300, batch_size=16, warmup=30, lr=3e-3, dropout=0.0, label_smoothing=0.0), cfg
    )
    assert result.log[-1]["total"] < result.log[0]["total"]
    assert denoise_accuracy(model, gen_text_corpus(SPEC, 50)) > 0.99


def test_export_and_load_text_decoder_bit_exact(tmp_path):
    cfg = tiny("unity")
    denoiser, _ = denoise_pretrain_text_decoder(gen_text_corpus(SPEC, 8), 0.3, TrainConfig(max_steps=2, batch_size=4), cfg)
    path = tmp_path / "dec.ckpt"
    export_text_decoder(denoiser, path)
    model = load_text_decoder(build_model(cfg, 5), path)
    for (n, a), (m, b) in zip(denoiser.text_decoder.state_dict().items(), model.text_decoder.state_dict().items()):
        assert n == m and torch.equal(a, b)
    assert not any(p.requires_grad for p in text_decoder_ffn_parameters(model))
    save_model(tmp_path / "full.ckpt", model)
    with pytest.raises(ValueError, match="not an exported"):
        load_text_decoder(model, tmp_path / "full.ckpt")
    assert read_checkpoint(path)[2] == {"component": "text_decoder"}
