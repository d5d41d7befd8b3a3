import numpy as np
import pytest

from volt.checkpoint import (
    CheckpointError,
    load_checkpoint,
    model_config_from,
    parse_config,
    read_checkpoint,
    save_checkpoint,
)
from volt.model import ModelConfig, VoltModel
from volt.tensor import AdamWState, adamw_step

TOY = ModelConfig(d=8, heads=2, d_k=4, ffn_hidden=16, enc_layers=2, dec_layers=1, grid=4, token_edge=2,
                  enhance=False)


def _perturbed(seed=0):
    model = VoltModel(TOY, seed=seed)
    rng = np.random.default_rng(seed)
    for n in model.params.trainable_names():
        model.params.set_value(n, model.params[n].value + rng.normal(scale=0.1, size=model.params[n].shape))
    return model


def test_round_trip_with_optimizer(tmp_path):
    model = _perturbed()
    opt = AdamWState(lr=3e-4, weight_decay=0.05)
    rng = np.random.default_rng(1)
    grads = {n: rng.normal(size=model.params[n].shape) for n in model.params.trainable_names()}
    adamw_step(model.params, grads, opt)
    save_checkpoint(tmp_path / "c.vltc", model, {"seed": 7}, optimizer=opt)
    back, config, opt2 = load_checkpoint(tmp_path / "c.vltc")
    assert back.config == TOY and config["seed"] == "7"
    for n in model.params:
        assert back.params[n].value.tobytes() == model.params[n].value.tobytes()
    assert (opt2.t, opt2.lr, opt2.weight_decay, opt2.beta1, opt2.beta2, opt2.eps) == \
        (1, 3e-4, 0.05, opt.beta1, opt.beta2, opt.eps)
    for n in opt.m:
        assert opt2.m[n].tobytes() == opt.m[n].tobytes()
        assert opt2.v[n].tobytes() == opt.v[n].tobytes()
    views = np.random.default_rng(2).normal(size=(3, 8))
    assert back.predict_volume(views).tobytes() == model.predict_volume(views).tobytes()


def test_without_optimizer(tmp_path):
    save_checkpoint(tmp_path / "c.vltc", _perturbed(1))
    _, _, opt = load_checkpoint(tmp_path / "c.vltc")
    assert opt is None


def test_saving_is_byte_identical(tmp_path):
    save_checkpoint(tmp_path / "a", _perturbed(2))
    save_checkpoint(tmp_path / "b", _perturbed(2))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_corrupt_files(tmp_path):
    save_checkpoint(tmp_path / "c.vltc", _perturbed())
    raw = (tmp_path / "c.vltc").read_bytes()
    cases = {
        "magic": b"XXXX" + raw[4:],
        "version": raw[:4] + (99).to_bytes(4, "little") + raw[8:],
        "header": raw[:6],
        "body": raw[:-3],
        "trailing": raw + b"\0",
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / name)


def test_model_config_from_partial():
    cfg = model_config_from({"model.d": "32", "model.enhance": "false", "other": "x"})
    assert cfg.d == 32 and not cfg.enhance
    assert cfg.heads == ModelConfig().heads


def test_parse_config():
    assert parse_config("a = 1\n# note\n\nb=two # trailing\n") == {"a": "1", "b": "two"}
    with pytest.raises(CheckpointError):
        parse_config("no equals here")
