import pytest

from eccpos.config import RunConfig, parse_config, render_config


def test_defaults_round_trip():
    run = RunConfig()
    assert parse_config(render_config(run)) == run


def test_modified_round_trip():
    run = RunConfig().replace("quant", bits=(2, 6, 8)).replace("train", freeze_encoders=True)
    run = run.replace("scenario", noise_var=0.25, region_x=(-5.0, 7.5)).with_seed(2**63 + 5)
    back = parse_config(render_config(run))
    assert back == run and back.seed == 2**63 + 5


def test_partial_config_keeps_defaults():
    run = parse_config("[train]\nlr = 0.01\n[quant]\nbits = 4, 6\n")
    assert run.train.lr == 0.01 and run.quant.bits == (4, 6)
    assert run.train.batch_size == RunConfig().train.batch_size
    assert run.scenario == RunConfig().scenario


@pytest.mark.parametrize("text", ["yes", "True", "1"])
def test_bool_true(text):
    assert parse_config(f"[train]\nfreeze_encoders = {text}\n").train.freeze_encoders


@pytest.mark.parametrize("text, match", [
    ("[train]\nlearning_rate = 1\n", "unknown keys"),
    ("[training]\nlr = 1\n", "unknown config sections"),
    ("[train]\nfreeze_encoders = maybe\n", "not a boolean"),
    ("[train]\nbatch_size = 0\n", "positive"),
    ("[scenario]\nnoise_var = -1\n", "nonnegative"),
])
def test_rejects_bad_configs(text, match):
    with pytest.raises(ValueError, match=match):
        parse_config(text)
