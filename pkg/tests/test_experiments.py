from __future__ import annotations

import numpy as np
import pytest

from crm_shadows.errors import ConfigError
from crm_shadows.experiments import (
    CSV_COLUMNS,
    ExperimentConfig,
    config_from_mapping,
    load_config,
    run_experiment,
)
from crm_shadows.qcore import random_density_matrix
from crm_shadows.statesrc import save_matrix


def _config(**overrides) -> ExperimentConfig:
    values = {
        "experiment": "entropy",
        "state": "ising:N=4",
        "priors": ["none", "exact"],
        "n_a": 2,
        "n_max": 3,
        "nu": [9, 18],
        "nm": 20,
        "seed": 11,
    }
    values.update(overrides)
    return config_from_mapping(values)


def _rows(table, prior: str, estimator: str):
    return table[(table["prior"] == prior) & (table["estimator"] == estimator)]


class TestConfig:
    def test_defaults(self):
        config = _config(priors=["none"], m=None)
        assert config.batches == 3
        assert config.repetitions == 1
        assert config.exact is False

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "exp.env"
        path.write_text(
            "# entropy run\n"
            "EXPERIMENT=entropy\n"
            "STATE=ising:N=6\n"
            "PRIORS=none, mps:chi=2\n"
            "N_A=3\n"
            "NU=30,60\n"
            "NM=100\n"
            "REPETITIONS=2\n"
            "SEED=5\n"
        )
        config = load_config(path)
        assert config.priors == ["none", "mps:chi=2"]
        assert config.nu == [30, 60]
        assert config.n_a == 3
        assert config.repetitions == 2

    @pytest.mark.parametrize(
        ("overrides", "field"),
        [
            ({"seed": None}, "seed"),
            ({"n_a": None}, "n_a"),
            ({"nu": [10]}, "nu"),
            ({"m": 2, "nu": [10]}, "m"),
            ({"nm": 0}, "nm"),
            ({"colour": "blue"}, "colour"),
            ({"experiment": "purity"}, "experiment"),
            ({"experiment": "companion", "nu_prime": [30]}, "companion_state"),
            ({"experiment": "companion", "companion_state": "ising:N=4"}, "nu_prime"),
            (
                {"experiment": "companion", "companion_state": "ising:N=4", "nu_prime": [7]},
                "nu_prime",
            ),
            (
                {
                    "experiment": "companion",
                    "companion_state": "ising:N=4",
                    "nu_prime": [9],
                    "select": True,
                },
                "select",
            ),
            ({"select": True, "m": 1, "n_max": 1}, "m"),
        ],
    )
    def test_invalid_fields_are_named(self, overrides, field):
        values = {k: v for k, v in overrides.items() if v is not None}
        removed = [k for k, v in overrides.items() if v is None]
        base = {
            "experiment": "entropy",
            "state": "ising:N=4",
            "n_a": 2,
            "nu": [9],
            "nm": 20,
            "seed": 1,
        }
        base.update(values)
        for key in removed:
            base.pop(key)
        with pytest.raises(ConfigError) as info:
            config_from_mapping(base)
        assert info.value.field == field

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            load_config(tmp_path / "missing.env")
        assert info.value.field == "config"

    def test_bad_integer_list(self, tmp_path):
        path = tmp_path / "exp.env"
        path.write_text("EXPERIMENT=entropy\nSTATE=ising:N=4\nNU=9,x\nNM=1\nSEED=1\n")
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert info.value.field == "nu"


class TestEntropyExperiment:
    def test_table_layout(self):
        table = run_experiment(_config())
        assert list(table.columns) == CSV_COLUMNS
        # two grid points x two priors x two references
        assert len(table) == 8
        assert set(table["estimator"]) == {
            "standard/stat",
            "standard/total",
            "crm/stat",
            "crm/total",
        }
        assert (table["N"] == 4).all()
        assert (table["N_A"] == 2).all()
        assert (table["N_M"] == 20).all()

    def test_exact_mode_perfect_prior(self):
        table = run_experiment(_config(exact=True, nu=[27]))
        crm = _rows(table, "exact", "crm/stat")
        assert len(crm) == 1
        assert crm["rel_error"].iloc[0] < 1e-9
        assert (table["N_M"] == 0).all()

    def test_references(self):
        table = run_experiment(_config(nu=[9]))
        stat = _rows(table, "none", "standard/stat")["exact_reference"].iloc[0]
        total = _rows(table, "none", "standard/total")["exact_reference"].iloc[0]
        assert 0.0 < stat
        assert abs(stat - total) <= 0.046 * 4

    def test_same_config_same_bytes(self, tmp_path):
        first, second = tmp_path / "a.csv", tmp_path / "b.csv"
        run_experiment(_config(repetitions=2, output=first))
        run_experiment(_config(repetitions=2, output=second, workers=3))
        assert first.read_bytes() == second.read_bytes()

    def test_repetitions_are_averaged(self):
        table = run_experiment(_config(nu=[9], repetitions=4))
        assert len(table) == 4
        assert (table["stderr"] >= 0.0).all()

    def test_subsystem_larger_than_state(self):
        with pytest.raises(ConfigError) as info:
            run_experiment(_config(n_a=5))
        assert info.value.field == "n_a"

    def test_bad_prior_descriptor(self):
        with pytest.raises(ConfigError) as info:
            run_experiment(_config(priors=["mps:chi=zero"]))
        assert info.value.field == "prior"

    def test_selected_prior_row(self):
        table = run_experiment(_config(nu=[9], select=True))
        selected = _rows(table, "selected", "selected/stat")
        assert len(selected) == 1
        candidates = {
            _rows(table, "none", "standard/stat")["value"].iloc[0],
            _rows(table, "exact", "crm/stat")["value"].iloc[0],
        }
        assert selected["value"].iloc[0] in candidates


class TestFidelityExperiment:
    def _fidelity(self, **overrides) -> ExperimentConfig:
        values = {
            "experiment": "fidelity",
            "state": "circuit:N=3:d=2:p=0.0:seed=4",
            "priors": ["none", "mps:chi=full"],
            "nu": [30],
            "nm": 200,
            "seed": 3,
        }
        values.update(overrides)
        return config_from_mapping(values)

    def test_noiseless_full_prior(self):
        table = run_experiment(self._fidelity())
        assert set(table["estimator"]) == {"standard", "crm", "crm/ideal"}
        assert np.allclose(table["exact_reference"], 1.0)
        for _, row in table.iterrows():
            assert abs(row["value"] - 1.0) <= 4 * row["stderr"] + 1e-12

    def test_exact_mode_full_prior_is_exact(self):
        table = run_experiment(self._fidelity(exact=True))
        crm = _rows(table, "mps:chi=full", "crm")
        assert crm["rel_error"].iloc[0] < 1e-9

    def test_noisy_reference(self):
        table = run_experiment(self._fidelity(state="circuit:N=3:d=2:p=0.05:seed=4"))
        assert (table["exact_reference"] < 1.0).all()

    def test_needs_a_pure_reference(self, rng, tmp_path):
        save_matrix(random_density_matrix(2, rng), tmp_path / "rho.bin")
        with pytest.raises(ConfigError) as info:
            run_experiment(self._fidelity(state=f"file:{tmp_path / 'rho.bin'}"))
        assert info.value.field == "state"

    def test_prior_is_its_own_target(self):
        table = run_experiment(self._fidelity(priors=["none", "mps:chi=1"]))
        standard = _rows(table, "mps:chi=1", "standard")["exact_reference"].iloc[0]
        crm = _rows(table, "mps:chi=1", "crm")["exact_reference"].iloc[0]
        ideal = _rows(table, "mps:chi=1", "crm/ideal")["exact_reference"].iloc[0]
        assert standard == crm
        assert 0.0 < crm <= 1.0 + 1e-12
        assert ideal == pytest.approx(1.0)

    def test_selected_prior_row(self):
        table = run_experiment(self._fidelity(select=True))
        selected = _rows(table, "selected", "selected")
        assert len(selected) == 1
        assert selected["exact_reference"].iloc[0] == pytest.approx(1.0)
        candidates = {
            _rows(table, "none", "standard")["value"].iloc[0],
            _rows(table, "mps:chi=full", "crm/ideal")["value"].iloc[0],
        }
        assert selected["value"].iloc[0] in candidates

    def test_selection_needs_pure_priors(self):
        config = self._fidelity(
            state="circuit:N=3:d=2:p=0.05:seed=4", priors=["none", "exact"], select=True
        )
        with pytest.raises(ConfigError) as info:
            run_experiment(config)
        assert info.value.field == "priors"


class TestCompanionExperiment:
    def _companion(self, **overrides) -> ExperimentConfig:
        values = {
            "experiment": "companion",
            "state": "ising:N=4",
            "companion_state": "ising:N=4:eps=0.02:seed=3",
            "n_a": 2,
            "nu": [12],
            "nu_prime": [6, 30],
            "m": 3,
            "nm": 50,
            "seed": 2,
        }
        values.update(overrides)
        return config_from_mapping(values)

    def test_labels(self):
        table = run_experiment(self._companion())
        assert set(table["prior"]) == {
            "none",
            "companion:nu_prime=6",
            "companion:nu_prime=30",
        }
        assert len(table) == 6

    def test_companion_size_must_match(self):
        with pytest.raises(ConfigError) as info:
            run_experiment(self._companion(companion_state="ising:N=5"))
        assert info.value.field == "companion_state"


@pytest.mark.slow
class TestDeskScaleAcceptance:
    def test_ising_entropy_errors(self):
        config = _config(
            state="ising:N=16",
            priors=["none", "mps:chi=3"],
            n_a=8,
            nu=[27, 81, 243],
            nm=1000,
            repetitions=20,
            seed=1234,
        )
        table = run_experiment(config)
        for n_u in (27, 81, 243):
            at = table[table["N_U"] == n_u]
            crm = _rows(at, "mps:chi=3", "crm/stat")["rel_error"].iloc[0]
            standard = _rows(at, "none", "standard/stat")["rel_error"].iloc[0]
            assert crm < 0.5 * standard
        standard = _rows(table, "none", "standard/stat").sort_values("N_U")["rel_error"]
        slope = np.polyfit(np.log([27, 81, 243]), np.log(standard.to_numpy()), 1)[0]
        assert -0.65 <= slope <= -0.35

    def test_relative_error_shrinks_with_settings(self):
        config = _config(
            state="ising:N=8",
            priors=["none"],
            n_a=2,
            nu=[240, 2400, 24000],
            nm=100,
            repetitions=10,
            seed=8,
        )
        table = run_experiment(config)
        errors = _rows(table, "none", "standard/stat").sort_values("N_U")["rel_error"].to_numpy()
        slope = np.polyfit(np.log([240, 2400, 24000]), np.log(errors), 1)[0]
        assert -0.8 < slope < -0.2

    def test_circuit_fidelity(self):
        full_ok, full_better, unit_worse = 0, 0, 0
        for seed in range(20):
            config = config_from_mapping(
                {
                    "experiment": "fidelity",
                    "state": "circuit:N=8:d=4:p=0.0:seed=1",
                    "priors": ["none", "mps:chi=full", "mps:chi=1"],
                    "nu": [15],
                    "nm": 10_000,
                    "seed": seed,
                }
            )
            table = run_experiment(config)
            standard = _rows(table, "none", "standard").iloc[0]
            full = _rows(table, "mps:chi=full", "crm").iloc[0]
            # chi = 1: both estimators target the product state itself
            unit = _rows(table, "mps:chi=1", "crm").iloc[0]
            unit_standard = _rows(table, "mps:chi=1", "standard").iloc[0]
            full_ok += abs(full["value"] - 1.0) <= 3 * full["stderr"] + 1e-12
            full_better += full["stderr"] < standard["stderr"]
            unit_worse += unit["stderr"] >= unit_standard["stderr"]
        assert full_ok >= 18
        assert full_better >= 18
        assert unit_worse > 10

    def test_companion_plateau(self):
        config = config_from_mapping(
            {
                "experiment": "companion",
                "state": "ising:N=12",
                "companion_state": "ising:N=12:eps=0.02:seed=5",
                "n_a": 6,
                "nu": [300],
                "nu_prime": [99, 9999],
                "m": 3,
                "nm": 1000,
                "repetitions": 10,
                "seed": 77,
            }
        )
        table = run_experiment(config)
        small = _rows(table, "companion:nu_prime=99", "companion/stat")["rel_error"].iloc[0]
        large = _rows(table, "companion:nu_prime=9999", "companion/stat")["rel_error"].iloc[0]
        assert small >= 2 * large
