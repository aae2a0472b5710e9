import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from nanodeloc.config import PRESETS, ExperimentConfig, load_config, preset_config, preset_params
from nanodeloc.filters import FilterSpec


def test_round_trip(tmp_path):
    cfg = preset_config("paper-30dB", protocol="loop", r=1.8, seed=12,
                        filter=FilterSpec((2000.0,), 3, "backward"))
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.digest() == cfg.digest()
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    assert load_config(path) == cfg


@given(st.integers(0, 2**31), st.floats(1.0, 3.0))
def test_digest_tracks_content(seed, r):
    a = preset_config("paper-39dB", seed=seed, r=r)
    assert a.digest() == preset_config("paper-39dB", seed=seed, r=r).digest()
    assert a.digest() != a.with_(seed=seed + 1).digest()


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_share_the_trap(name):
    p = preset_params(name)
    assert p.omega_m == pytest.approx(2 * math.pi * 56.5e3)
    assert p.eta == 0.21
    assert p.n_bar == PRESETS[name]["n_bar"]


def test_occupancies_are_ordered():
    n = [preset_params(k).n_bar for k in ("paper-39dB", "paper-30dB", "paper-20dB")]
    assert n == sorted(n)


def test_recoil_rate_units():
    # angular and cyclic quotes of the recoil rate agree
    assert preset_params("paper-39dB").gamma_qba == pytest.approx(23.7e3, rel=2e-3)


def test_preset_without_params_expands():
    cfg = ExperimentConfig.from_dict({"preset": "paper-20dB", "seed": 3})
    assert cfg.params == preset_params("paper-20dB")
    assert cfg.seed == 3


def test_unknown_inputs_rejected():
    with pytest.raises(ValueError):
        preset_params("paper-99dB")
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"preset": "paper-39dB", "colour": "blue"})
    with pytest.raises(ValueError):
        preset_config("paper-39dB", protocol="three_pulse")
    with pytest.raises(ValueError):
        preset_config("paper-39dB", r=0.9)
    with pytest.raises(ValueError):
        preset_config("paper-39dB", fit_window=0.0)
    with pytest.raises(ValueError):
        preset_config("paper-39dB", dt=1e-5)


@pytest.mark.parametrize("protocol,n_seg", [("two_pulse", 3), ("one_pulse", 1), ("hold", 1)])
def test_protocol_builder(protocol, n_seg):
    cfg = preset_config("paper-39dB", protocol=protocol, r=2.0)
    built = cfg.build_protocol()
    assert built.kind == protocol and len(built.segments) == n_seg
    assert cfg.sim_config().repetitions == cfg.repetitions
