import json
import os

import numpy as np
import pytest

from affinebsde.cli import (
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_VERIFY_FAIL,
    dump_json,
    main,
)


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


def heston_config(**overrides):
    cfg = {
        "schema_version": 1,
        "model": {
            "kind": "heston",
            "alpha": [[0.0493, 0.012], [0.012, 0.0333]],
            "b": [[0.1479, 0.036], [0.036, 0.0999]],
            "drift_h": [[-0.7, 0.06], [0.03, -0.55]],
            "eta": [0.65, 0.4],
            "rho": [-0.45, -0.25],
            "r0": [[0.32, 0.04], [0.04, 0.26]],
        },
        "horizon": 1.0,
        "utility": {"kind": "power", "gamma": 0.35},
        "solver": {"steps": 300},
    }
    cfg.update(overrides)
    return cfg


def riccati_1d_degenerate_config():
    # the degenerate scalar branch: Gamma(0) = 1/2 for eta = gamma = sigma = 1
    return {
        "schema_version": 1,
        "model": {
            "kind": "raw-affine",
            "alpha": [[0.25]],
            "b": [[0.0]],
            "drift": {"h": [[0.5]]},
        },
        "horizon": 1.0,
        "generator": {
            "c_zz": [[0.0]],
            "c_zsqrtx": [[-1.0]],
            "c_x": [[0.5]],
        },
        "terminal": {"u": [[0.0]], "v": 0.0},
        "solver": {"steps": 500},
    }


class TestJsonSerializer:
    def test_sorted_keys_and_17_digits(self):
        text = dump_json({"b": 0.1, "a": 1})
        assert text.index('"a"') < text.index('"b"')
        assert "0.10000000000000001" in text

    def test_round_trip_identity(self):
        cfg = heston_config()
        again = json.loads(dump_json(cfg))
        assert again == cfg
        assert json.loads(dump_json(again)) == again


class TestRiccatiSolveCommand:
    def test_degenerate_1d_csv_value(self, tmp_path):
        cfg = write_config(tmp_path, riccati_1d_degenerate_config())
        rc = main(["riccati-solve", "--config", cfg, "--out", str(tmp_path)])
        assert rc == EXIT_OK
        lines = (tmp_path / "riccati_solution.csv").read_text().splitlines()
        assert lines[0] == "t,gamma_00,w"
        first = lines[1].split(",")
        assert float(first[0]) == 0.0
        assert float(first[1]) == pytest.approx(0.5, abs=1e-10)
        summary = json.loads((tmp_path / "riccati_summary.json").read_text())
        assert summary["blow_up"] is None

    def test_zero_generator_gives_zero_column(self, tmp_path):
        base = riccati_1d_degenerate_config()
        base["generator"] = {}
        cfg = write_config(tmp_path, base)
        assert main(["riccati-solve", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        rows = (tmp_path / "riccati_solution.csv").read_text().splitlines()[1:]
        assert all(float(r.split(",")[1]) == 0.0 for r in rows)

    def test_blow_up_exit_code_and_report(self, tmp_path):
        base = riccati_1d_degenerate_config()
        base["model"]["alpha"] = [[1.0]]
        base["model"]["drift"] = {"h": [[0.0]]}
        base["generator"] = {"c_zz": [[2.0]], "c_x": [[4.0]]}
        base["terminal"] = {"u": [[3.0]], "v": 0.0}
        cfg = write_config(tmp_path, base)
        rc = main(["riccati-solve", "--config", cfg, "--out", str(tmp_path)])
        assert rc == EXIT_NUMERICAL
        summary = json.loads((tmp_path / "riccati_summary.json").read_text())
        assert summary["blow_up"] is not None
        assert 0.0 <= summary["blow_up"]["time"] <= 1.0

    def test_invalid_config_lists_all_errors(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"schema_version": 99, "model": {"kind": "nope"}})
        rc = main(["riccati-solve", "--config", cfg, "--out", str(tmp_path)])
        assert rc == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "schema_version" in err and "model.kind" in err


class TestPortfolioCommand:
    def test_zero_market_value(self, tmp_path):
        cfg_dict = heston_config()
        cfg_dict["model"]["eta"] = [0.0, 0.0]
        cfg_dict["model"]["rho"] = [0.0, 0.0]
        cfg = write_config(tmp_path, cfg_dict)
        assert main(["portfolio", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        out = json.loads((tmp_path / "portfolio.json").read_text())
        assert out["value_at"]["1"] == pytest.approx(1.0 / 0.35, rel=1e-12)

    def test_strategy_csv_rows_match_grid(self, tmp_path):
        cfg = write_config(tmp_path, heston_config())
        assert main(["portfolio", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        rows = (tmp_path / "strategy.csv").read_text().splitlines()
        assert len(rows) == 1 + 300 + 1  # header + N + 1 grid points

    def test_bns_exp_with_swap_writes_price_and_hedge_free(self, tmp_path):
        cfg_dict = {
            "schema_version": 1,
            "model": {
                "kind": "bns",
                "lambda0": [[0.09, 0.01], [0.01, 0.07]],
                "drift_h": [[-0.6, 0.05], [0.0, -0.45]],
                "b_jump": [[0.02, 0.0], [0.0, 0.015]],
                "atoms": [{"xi": [[0.12, 0.03], [0.03, 0.08]], "weight": 1.1}],
                "eta": [0.6, 0.35],
                "r0": [[0.3, 0.03], [0.03, 0.22]],
            },
            "horizon": 1.0,
            "utility": {"kind": "exponential", "gamma": 0.8},
            "endowment": {"variance_swap": {"asset": 1, "strike": 0.15}},
            "solver": {"steps": 300},
        }
        cfg = write_config(tmp_path, cfg_dict)
        assert main(["portfolio", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        out = json.loads((tmp_path / "portfolio.json").read_text())
        assert out["price"] is not None and np.isfinite(out["price"])


class TestPriceCommand:
    def test_swapless_price_is_zero(self, tmp_path):
        cfg_dict = {
            "schema_version": 1,
            "model": {
                "kind": "bns",
                "lambda0": [[0.09, 0.01], [0.01, 0.07]],
                "drift_h": [[-0.6, 0.05], [0.0, -0.45]],
                "b_jump": [[0.02, 0.0], [0.0, 0.015]],
                "atoms": [],
                "eta": [0.6, 0.35],
                "r0": [[0.3, 0.03], [0.03, 0.22]],
            },
            "horizon": 1.0,
            "utility": {"kind": "exponential", "gamma": 0.8},
            "endowment": {"variance_swap": {"asset": 0, "strike": 0.0}},
            "solver": {"steps": 200},
        }
        cfg = write_config(tmp_path, cfg_dict)
        assert main(["price", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        out = json.loads((tmp_path / "price.json").read_text())
        assert out["price"] == 0.0

    def test_numeraire_price(self, tmp_path):
        cfg_dict = heston_config()
        cfg_dict["numeraire"] = {
            "o1": [[0.02, 0.0], [0.0, 0.015]],
            "o2": [[0.04, 0.0], [0.0, 0.03]],
            "o3": [[0.025, 0.0], [0.0, 0.02]],
        }
        cfg = write_config(tmp_path, cfg_dict)
        assert main(["price", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        out = json.loads((tmp_path / "price.json").read_text())
        assert out["kind"] == "numeraire" and np.isfinite(out["price"])


class TestVerifyCommand:
    def test_drift_match_pass(self, tmp_path):
        cfg_dict = heston_config()
        cfg_dict["solver"] = {"steps": 2000}
        cfg_dict["verification"] = {"which": "drift-match", "samples": 20}
        cfg = write_config(tmp_path, cfg_dict)
        assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        out = json.loads((tmp_path / "verify.json").read_text())
        assert out["pass"] is True

    def test_transform_pass_and_determinism(self, tmp_path):
        cfg_dict = heston_config()
        cfg_dict["verification"] = {"which": "transform", "paths": 20000, "steps": 120,
                                    "seed": 3, "u": [[0.5, 0.1], [0.1, 0.4]]}
        cfg = write_config(tmp_path, cfg_dict)
        out1 = tmp_path / "run1"
        out2 = tmp_path / "run2"
        assert main(["verify", "--config", cfg, "--out", str(out1)]) == EXIT_OK
        assert main(["verify", "--config", cfg, "--out", str(out2)]) == EXIT_OK
        b1 = (out1 / "verify.json").read_bytes()
        b2 = (out2 / "verify.json").read_bytes()
        assert b1 == b2

    def test_transform_fail_exit_code(self, tmp_path):
        # 3 Euler steps leave a bias far beyond three standard errors
        cfg_dict = heston_config()
        cfg_dict["verification"] = {"which": "transform", "paths": 30000, "steps": 3,
                                    "seed": 3, "u": [[1.2, 0.2], [0.2, 1.0]]}
        cfg = write_config(tmp_path, cfg_dict)
        assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == EXIT_VERIFY_FAIL

    def test_martingale_zero_market_exact(self, tmp_path):
        cfg_dict = heston_config()
        cfg_dict["model"]["eta"] = [0.0, 0.0]
        cfg_dict["model"]["rho"] = [0.0, 0.0]
        cfg_dict["solver"] = {"steps": 100}
        cfg_dict["verification"] = {"which": "martingale", "paths": 1000, "steps": 20,
                                    "seed": 2, "n_perturbed": 0}
        cfg = write_config(tmp_path, cfg_dict)
        assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        out = json.loads((tmp_path / "verify.json").read_text())
        row = out["results"][0]
        assert row["ratio"] == 1.0 and row["stderr"] == 0.0
        assert row["verdict"] == "MARTINGALE"

    def test_unknown_which_is_config_error(self, tmp_path):
        cfg_dict = heston_config()
        cfg_dict["verification"] = {"which": "nonsense"}
        cfg = write_config(tmp_path, cfg_dict)
        assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG


class TestSimulateCommand:
    def test_path_dump_schema(self, tmp_path):
        cfg_dict = heston_config()
        cfg_dict["simulate"] = {"paths": 3, "steps": 10, "seed": 1}
        cfg = write_config(tmp_path, cfg_dict)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        lines = (tmp_path / "paths.csv").read_text().splitlines()
        assert lines[0] == "path,t,r_00,r_01,r_11,n_0,n_1,o_00,o_01,o_11"
        assert len(lines) == 1 + 3 * 11
        assert lines[-1].endswith("\r") is False  # LF endings only

    def test_bns_path_dump(self, tmp_path):
        cfg_dict = {
            "schema_version": 1,
            "model": {
                "kind": "bns",
                "lambda0": [[0.09, 0.01], [0.01, 0.07]],
                "drift_h": [[-0.6, 0.05], [0.0, -0.45]],
                "b_jump": [[0.02, 0.0], [0.0, 0.015]],
                "atoms": [{"xi": [[0.12, 0.03], [0.03, 0.08]], "weight": 1.1}],
                "eta": [0.6, 0.35],
                "r0": [[0.3, 0.03], [0.03, 0.22]],
            },
            "horizon": 1.0,
            "simulate": {"paths": 2, "steps": 8, "seed": 4},
        }
        cfg = write_config(tmp_path, cfg_dict)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        lines = (tmp_path / "paths.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 * 9

    def test_missing_config_file(self, tmp_path, capsys):
        rc = main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)])
        assert rc == EXIT_CONFIG


class TestFormatAndThreads:
    def test_json_format_embeds_solution(self, tmp_path):
        cfg = write_config(tmp_path, riccati_1d_degenerate_config())
        rc = main(["riccati-solve", "--config", cfg, "--out", str(tmp_path), "--format", "json"])
        assert rc == EXIT_OK
        assert not (tmp_path / "riccati_solution.csv").exists()
        summary = json.loads((tmp_path / "riccati_summary.json").read_text())
        assert len(summary["grid"]) == 501
        assert summary["gammas"][0][0][0] == pytest.approx(0.5, abs=1e-10)

    def test_thread_count_does_not_change_results(self):
        from affinebsde.portfolio import preset_bns_power

        preset = preset_bns_power(steps=100)
        strategies = [preset.opt_strategy_grid(40)]
        m1, s1, _ = preset.audit_strategies(strategies, n_paths=20000, seed=3, n_steps=40,
                                            threads=1)
        m2, s2, _ = preset.audit_strategies(strategies, n_paths=20000, seed=3, n_steps=40,
                                            threads=4)
        assert np.array_equal(m1, m2) and np.array_equal(s1, s2)
