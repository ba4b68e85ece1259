from __future__ import annotations

import json

import pytest
from numpy.testing import assert_allclose

from crm_shadows.cli import main
from crm_shadows.experiments import CSV_COLUMNS
from crm_shadows.settings import get_settings


def _run(capsys, *argv: str) -> tuple[int, dict | None, str]:
    code = main(list(argv))
    captured = capsys.readouterr()
    payload = json.loads(captured.out) if code == 0 and captured.out.startswith("{") else None
    return code, payload, captured.err


@pytest.fixture
def dataset_path(tmp_path, capsys):
    path = tmp_path / "ising3.jsonl"
    code = main(
        ["simulate", "--state", "ising:N=3", "--nu", "6", "--nm", "5", "--seed", "1",
         "--out", str(path)]
    )
    capsys.readouterr()
    assert code == 0
    return path


class TestCoeffs:
    def test_third_order(self, capsys):
        code, payload, _ = _run(capsys, "coeffs", "--nmax", "3")
        assert code == 0
        assert payload["rational"] == ["137/60", "-4", "7/4"]
        assert_allclose(payload["coefficients"], [137 / 60, -4.0, 7 / 4])
        assert 0.0 < payload["alpha"] < 0.1

    def test_float_only(self, capsys):
        _, payload, _ = _run(capsys, "coeffs", "--nmax", "4", "--float")
        assert "rational" not in payload
        assert len(payload["coefficients"]) == 4

    def test_order_out_of_range(self, capsys):
        code, _, err = _run(capsys, "coeffs", "--nmax", "13")
        assert code == 2
        assert json.loads(err.strip().splitlines()[-1])["error"] == "argument_error"


class TestSimulate:
    def test_writes_dataset(self, capsys, tmp_path):
        path = tmp_path / "out.jsonl"
        code, payload, _ = _run(
            capsys, "simulate", "--state", "ising:N=2", "--nu", "4", "--nm", "3",
            "--seed", "7", "--out", str(path),
        )
        assert code == 0
        assert path.is_file()
        assert payload["nu"] == 4
        assert payload["state"] == "ising:N=2"

    def test_bad_state(self, capsys, tmp_path):
        code, _, err = _run(
            capsys, "simulate", "--state", "spin:N=2", "--nu", "4", "--nm", "3",
            "--seed", "7", "--out", str(tmp_path / "x.jsonl"),
        )
        assert code == 2
        error = json.loads(err.strip().splitlines()[-1])
        assert error["error"] == "config_error"
        assert error["field"] == "state"


class TestEstimate:
    def test_pauli(self, capsys, dataset_path):
        code, payload, _ = _run(
            capsys, "estimate", "pauli", "--dataset", str(dataset_path), "--pauli", "ZZI"
        )
        assert code == 0
        assert payload["kind"] == "pauli"
        assert payload["n_u"] == 6
        assert payload["stderr"] >= 0.0
        assert payload["jackknife"]["value"] == pytest.approx(payload["value"])

    def test_pauli_requires_a_string(self, capsys, dataset_path):
        with pytest.raises(SystemExit) as info:
            main(["estimate", "pauli", "--dataset", str(dataset_path)])
        assert info.value.code == 2
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["error"] == "usage_error"
        assert "--pauli" in error["message"]

    def test_moment(self, capsys, dataset_path):
        code, payload, _ = _run(
            capsys, "estimate", "moment", "--dataset", str(dataset_path),
            "--support", "0,1", "--n", "2", "--m", "3",
        )
        assert code == 0
        assert payload["kind"] == "moment"

    def test_entropy_with_exact_prior(self, capsys, dataset_path):
        code, payload, _ = _run(
            capsys, "estimate", "entropy", "--dataset", str(dataset_path),
            "--support", "0", "--nmax", "3", "--prior", "exact",
        )
        assert code == 0
        assert payload["prior"] == "exact"

    def test_fidelity_uses_recorded_state(self, capsys, dataset_path):
        code, payload, _ = _run(
            capsys, "estimate", "fidelity", "--dataset", str(dataset_path),
            "--prior", "mps:chi=full",
        )
        assert code == 0
        assert payload["kind"] == "fidelity"

    def test_support_outside_dataset(self, capsys, dataset_path):
        code, _, err = _run(
            capsys, "estimate", "moment", "--dataset", str(dataset_path), "--support", "0,5"
        )
        assert code == 2
        assert json.loads(err.strip().splitlines()[-1])["error"] == "argument_error"

    def test_missing_dataset(self, capsys, tmp_path):
        code, _, err = _run(
            capsys, "estimate", "pauli", "--dataset", str(tmp_path / "none.jsonl"),
            "--pauli", "Z",
        )
        assert code == 2
        assert json.loads(err.strip().splitlines()[-1])["error"] == "validation_error"

    def test_prior_state_size_mismatch(self, capsys, dataset_path):
        code, _, err = _run(
            capsys, "estimate", "moment", "--dataset", str(dataset_path), "--support", "0",
            "--prior", "exact", "--state", "ising:N=4",
        )
        assert code == 2
        assert json.loads(err.strip().splitlines()[-1])["field"] == "state"

    def test_candidates_report_the_selection(self, capsys, dataset_path):
        code, payload, _ = _run(
            capsys, "estimate", "moment", "--dataset", str(dataset_path),
            "--support", "0,1", "--m", "2", "--candidates", "none,exact",
        )
        assert code == 0
        selection = payload["selection"]
        assert selection["candidates"] == ["none", "exact"]
        assert payload["prior"] == selection["chosen"]
        assert len(selection["stderr"]) == 2
        assert selection["fidelities"][0] is None

    def test_prior_and_candidates_are_exclusive(self, capsys, dataset_path):
        code, _, err = _run(
            capsys, "estimate", "pauli", "--dataset", str(dataset_path), "--pauli", "ZII",
            "--prior", "exact", "--candidates", "none,exact",
        )
        assert code == 2
        assert json.loads(err.strip().splitlines()[-1])["error"] == "argument_error"

    def test_pauli_prior_lives_on_the_string_support(self, capsys, dataset_path, monkeypatch):
        monkeypatch.setenv("CRM_MAX_SUPPORT_QUBITS", "2")
        get_settings.cache_clear()
        code, payload, _ = _run(
            capsys, "estimate", "pauli", "--dataset", str(dataset_path), "--pauli", "ZZI",
            "--prior", "exact",
        )
        assert code == 0
        assert payload["prior"] == "exact"

    def test_oversized_prior_is_a_resource_error(self, capsys, dataset_path, monkeypatch):
        monkeypatch.setenv("CRM_MAX_SUPPORT_QUBITS", "1")
        get_settings.cache_clear()
        code, _, err = _run(
            capsys, "estimate", "pauli", "--dataset", str(dataset_path), "--pauli", "ZZI",
            "--prior", "exact",
        )
        assert code == 2
        assert json.loads(err.strip().splitlines()[-1])["error"] == "resource_error"


class TestBounds:
    def test_infinite_shots(self, capsys):
        code, payload, _ = _run(
            capsys, "bounds", "--na", "2", "--nu", "10", "--nm", "inf", "--n", "3",
            "--diff-norm", "0.5", "--pauli-diff", "0.5",
        )
        assert code == 0
        assert payload["mco_bound"]["shot_noise"] == 0.0
        assert_allclose(payload["mco_bound"]["bound"], 9 * 9 * 0.25 / 10)
        assert_allclose(payload["pauli_bound"], 9 * 0.25 / 10)

    def test_invalid_shots(self, capsys):
        with pytest.raises(SystemExit):
            main(["bounds", "--na", "1", "--nu", "10", "--nm", "0.5"])
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["error"] == "usage_error"


class TestExperiment:
    def _write(self, tmp_path, experiment: str = "entropy"):
        path = tmp_path / "exp.env"
        path.write_text(
            f"EXPERIMENT={experiment}\nSTATE=ising:N=4\nN_A=1\nNU=6\nNM=10\nSEED=1\n"
        )
        return path

    def test_csv_on_stdout(self, capsys, tmp_path):
        code = main(["exp", "entropy", "--config", str(self._write(tmp_path))])
        lines = capsys.readouterr().out.strip().splitlines()
        assert code == 0
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 3

    def test_output_override(self, capsys, tmp_path):
        target = tmp_path / "table.csv"
        code, payload, _ = _run(
            capsys, "exp", "entropy", "--config", str(self._write(tmp_path)),
            "--output", str(target),
        )
        assert code == 0
        assert payload == {"path": str(target), "rows": 2}
        assert target.read_text().startswith(",".join(CSV_COLUMNS))

    def test_experiment_mismatch(self, capsys, tmp_path):
        code, _, err = _run(
            capsys, "exp", "fidelity", "--config", str(self._write(tmp_path))
        )
        assert code == 2
        error = json.loads(err.strip().splitlines()[-1])
        assert error["error"] == "config_error"
        assert error["field"] == "experiment"
