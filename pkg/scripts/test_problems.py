"""
Tests for the preset registry
"""

import math

import numpy as np
import pytest

from elliptic import SemilinearProblem
from errors import UnknownPreset
from evolution import EvolutionProblem
from problems import (
    PRESETS,
    cubic,
    get_preset,
    initial_state,
    instantiate,
    list_presets,
    poisson_source,
    validate_lipschitz,
)


def test_four_presets_listed_in_order():
    names = [preset["name"] for preset in list_presets()]
    assert names == ["heat_1d", "nls_1d", "nonlinear_diffusion_1d", "semilinear_poisson_2d"]
    assert set(names) == set(PRESETS)


def test_unknown_preset():
    with pytest.raises(UnknownPreset) as info:
        get_preset("burgers_1d")
    assert info.value.qualified().startswith("problems: UnknownPreset")
    with pytest.raises(UnknownPreset):
        instantiate("burgers_1d")


def test_preset_documents_are_json_ready():
    doc = get_preset("semilinear_poisson_2d").to_dict()
    assert doc["bounds"] == [[0.0, 1.0], [0.0, 1.0]]
    assert doc["kind"] == "elliptic"
    assert doc["constants"]["m"] == "2π²"


class TestPoisson:

    def test_constants_at_unit_radius(self):
        p = instantiate("semilinear_poisson_2d", h=1 / 8)
        assert isinstance(p, SemilinearProblem)
        assert p.m == pytest.approx(2 * math.pi ** 2)
        assert p.c_f(1.0) == 2.0 and p.M_f(1.0) == 2.0
        assert p.contraction_ratio == pytest.approx(0.10132, abs=1e-5)

    def test_spectral_coercivity_override(self):
        p = instantiate("semilinear_poisson_2d", h=1 / 8, overrides={"m": "spectral"})
        assert p.m_source == "spectral"
        assert p.m >= 2 * math.pi ** 2

    def test_source_sign(self):
        assert np.all(poisson_source(np.array([0.0, 0.5, -1.0])) == np.array([-1.0, -1.25, -2.0]))


class TestEvolutionPresets:

    @pytest.mark.parametrize("name", ["nls_1d", "nonlinear_diffusion_1d", "heat_1d"])
    def test_instances(self, name):
        p = instantiate(name)
        assert isinstance(p, EvolutionProblem)
        assert p.mass.size == 15
        assert p.metadata["h"] == 1 / 16

    def test_nls_is_complex(self):
        p = instantiate("nls_1d")
        assert p.scale == 1j
        assert p.c_f(1.0) == pytest.approx(3.0 * p.mass.space_volume)
        assert p.metadata["c_f_nodal"] == 3.0

    def test_initial_state_inside_ball(self):
        for name in PRESETS:
            p = instantiate(name, h=1 / 8, r=2.0)
            u0 = initial_state(p)
            assert np.max(np.abs(u0)) <= 0.8 * 2.0 + 1e-12
            assert np.all(np.abs(u0) > 0)


class TestLipschitzValidation:

    @pytest.mark.parametrize("name", ["semilinear_poisson_2d", "nls_1d"])
    @pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
    def test_stored_constants_hold(self, name, r):
        report = validate_lipschitz(instantiate(name, h=1 / 8, r=r))
        assert report["ok"]
        assert 0 < report["max_ratio"] <= report["c_f"]
        assert report["samples"] == 200

    def test_linear_presets_have_nothing_to_check(self):
        report = validate_lipschitz(instantiate("heat_1d", h=1 / 8))
        assert report == {"max_ratio": 0.0, "c_f": 0.0, "samples": 0, "ok": True}

    def test_understated_constant_is_caught(self):
        p = instantiate("semilinear_poisson_2d", h=1 / 8, overrides={"c_f": 0.1})
        assert not validate_lipschitz(p)["ok"]

    def test_cubic_ratio_per_node(self, rng):
        u = rng.uniform(-1, 1, 1000)
        v = rng.uniform(-1, 1, 1000)
        assert np.all(np.abs(cubic(u) - cubic(v)) <= 3.0 * np.abs(u - v) + 1e-15)
