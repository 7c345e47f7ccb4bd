import dataclasses

import numpy as np
import pytest

from noisyasr import autodiff as ad
from noisyasr.gradcheck import TINY_MODEL, check_model
from noisyasr.model import (FEATURE_EXTRACTOR, NOISE_CLASSIFIER, RECOGNITION, CheckpointError, ModelConfig,
                            cross_entropy, forward, init_params, load_checkpoint, noise_forward, param_groups,
                            save_checkpoint, soft_freeze_set)


@pytest.fixture(scope="module")
def default_params():
    return init_params(ModelConfig(), seed=0)


def test_init_is_deterministic_and_bounded(default_params):
    again = init_params(ModelConfig(), seed=0)
    for name in default_params:
        np.testing.assert_array_equal(default_params[name].value, again[name].value)
    for name, t in default_params.items():
        if name.endswith(".b"):
            assert not t.value.any(), name
        else:
            fan_in = t.shape[1] * t.shape[2] * t.shape[3] if t.value.ndim == 4 else t.shape[0]
            assert np.abs(t.value).max() <= 1 / np.sqrt(fan_in)


def test_groups_partition_parameters(default_params):
    groups = param_groups(default_params)
    flat = [n for g in groups.values() for n in g]
    assert sorted(flat) == sorted(default_params)
    layers = {g: sorted({n.split(".")[0] for n in names}) for g, names in groups.items()}
    assert layers[FEATURE_EXTRACTOR] == ["conv0", "conv1", "rec0", "rec1", "rec2"]
    assert layers[RECOGNITION] == ["fc", "rec3", "rec4"]
    assert layers[NOISE_CLASSIFIER] == ["noise"]
    sizes = {g: sum(default_params[n].value.size for n in names) for g, names in groups.items()}
    assert sum(sizes.values()) == default_params.n_values()


def test_soft_freeze_members(default_params):
    assert {n.split(".")[0] for n in soft_freeze_set(default_params)} == {"rec3", "rec4", "fc"}


def test_output_is_normalized_and_frame_count():
    cfg = ModelConfig(n_recurrent=2, tap_index=0, hidden_size=8)
    params = init_params(cfg, 1)
    T = cfg.min_input_frames()
    assert cfg.output_frames(T) == 1
    feats = np.random.default_rng(0).standard_normal((cfg.n_freq_bins, T + 6))
    lp, tapped = forward(params, feats)
    assert lp.shape == (1, cfg.output_frames(T + 6), cfg.vocab_size)
    assert tapped.shape == (1, lp.shape[1], 2 * cfg.hidden_size)
    np.testing.assert_allclose(np.exp(lp.value).sum(-1), 1.0, atol=1e-12)
    lp1, _ = forward(params, feats[:, :T])
    assert lp1.shape[1] == 1
    with pytest.raises(ValueError):
        forward(params, feats[:, :T - 1])


def test_first_output_depends_on_last_input():
    cfg = dataclasses.replace(TINY_MODEL)
    params = init_params(cfg, 2)
    feats = np.random.default_rng(1).standard_normal((cfg.n_freq_bins, 30))
    _, tap = forward(params, feats)
    moved = feats.copy()
    moved[:, -3:] += 1.0
    _, tap2 = forward(params, moved)
    H = cfg.hidden_size
    assert not np.allclose(tap.value[0, 0, H:], tap2.value[0, 0, H:])  # backward direction channels


def test_tiny_model_gradients():
    assert check_model(seed=11).max_rel_error < 1e-4


def test_noise_head_reverse_changes_only_backward():
    params = init_params(TINY_MODEL, 3)
    feats = np.random.default_rng(2).standard_normal((2, TINY_MODEL.n_freq_bins, 20))
    labels = [1, 7]
    grads = {}
    for reverse in (False, True):
        params.zero_grad()
        _, tapped = forward(params, feats)
        logits = noise_forward(params, tapped, reverse=reverse)
        grads[reverse] = logits.value.copy()
        # gradient w.r.t. the tapped features, isolated by a leaf copy
        leaf = ad.param(tapped.value.copy())
        ad.backward(cross_entropy(noise_forward(params, leaf, reverse=reverse), labels))
        grads[(reverse, "tap")] = leaf.grad.copy()
    assert grads[True].tobytes() == grads[False].tobytes()
    np.testing.assert_array_equal(grads[(True, "tap")], -grads[(False, "tap")])


def test_uniform_logits_cross_entropy():
    ce = cross_entropy(ad.const(np.zeros((3, 8))), [0, 4, 7])
    assert float(ce.value) == pytest.approx(np.log(8), abs=1e-15)


def test_checkpoint_round_trip(tmp_path):
    params = init_params(TINY_MODEL, 4)
    save_checkpoint(tmp_path / "m.npz", params, {"mode": "MTL"})
    loaded, extra = load_checkpoint(tmp_path / "m.npz", expected=TINY_MODEL)
    assert extra == {"mode": "MTL"}
    assert loaded.cfg == TINY_MODEL
    assert list(loaded) == list(params)
    for n in params:
        assert loaded[n].value.tobytes() == params[n].value.tobytes()
        assert loaded.tags[n] == params.tags[n]
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.npz", expected=dataclasses.replace(TINY_MODEL, hidden_size=5))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_recurrent=2, tap_index=2)
    with pytest.raises(ValueError):
        ModelConfig(vocab=("_", "_", "a"))
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()
