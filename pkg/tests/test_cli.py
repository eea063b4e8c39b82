import json
import subprocess
import sys

import numpy as np
import pytest

from datagen import make_bundled_dataset
from factorfit.cli import main, srm_flop_estimate, srm_flops_per_subject_iteration
from factorfit.data_io import load_matrix


@pytest.fixture(scope="module")
def bundled(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundled")
    return make_bundled_dataset(root / "data")


def run_main(args):
    return main([str(a) for a in args])


class TestFitSrmCommand:
    def test_defaults_produce_valid_artifacts(self, bundled, tmp_path):
        out = tmp_path / "out"
        rc = run_main(
            ["fit-srm", "--manifest", bundled, "--k", 3, "--iters", 4, "--out", out]
        )
        assert rc == 0
        S = load_matrix(out / "shared_response.sfab")
        sigma = load_matrix(out / "shared_covariance.sfab")
        rho2 = load_matrix(out / "noise_variance.sfab")
        assert S.shape == (3, 20) and sigma.shape == (3, 3)
        assert np.all(rho2 > 0)
        for i in range(4):
            W = load_matrix(out / "subjects" / f"sub-{i:02d}_mapping.sfab")
            assert np.max(np.abs(W.T @ W - np.eye(3))) <= 1e-8
        report = json.loads((out / "report.json").read_text())
        assert report["schema"] == 1
        assert all(v >= 0 for v in report["timings"].values())
        assert np.isfinite(report["flops"])

    def test_k_zero_usage_error(self, bundled, tmp_path):
        rc = run_main(
            ["fit-srm", "--manifest", bundled, "--k", 0, "--out", tmp_path / "x"]
        )
        assert rc == 2

    def test_missing_manifest_runtime_error(self, tmp_path, capsys):
        rc = run_main(
            ["fit-srm", "--manifest", tmp_path / "nope.json", "--out", tmp_path / "x"]
        )
        assert rc == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "error" in err


class TestFitHtfaCommand:
    def test_blob_recovery_through_cli(self, tmp_path):
        from datagen import blob_subjects, write_dataset

        matrices, grid, true_centers, _ = blob_subjects(seed=321)
        manifest = write_dataset(tmp_path / "data", matrices, grid)
        out = tmp_path / "out"
        rc = run_main(
            [
                "fit-htfa",
                "--manifest", manifest,
                "--k", 3,
                "--outer", 5,
                "--local-iters", 4,
                "--max-voxels", 250,
                "--max-trs", 20,
                "--seed", 13,
                "--out", out,
            ]
        )
        assert rc == 0
        template = json.loads((out / "template.json").read_text())
        got = np.array(template["centers"])
        from scipy.optimize import linear_sum_assignment
        from scipy.spatial.distance import cdist

        cost = cdist(got, true_centers)
        rows, cols = linear_sum_assignment(cost)
        assert np.all(cost[rows, cols] <= 1.0)
        conn = np.loadtxt(out / "subjects" / "sub-00_connectivity.csv", delimiter=",")
        assert conn.shape == (3, 3)
        assert np.allclose(np.diag(conn), 1.0)

    def test_missing_coords_is_data_error(self, tmp_path, capsys):
        from datagen import srm_subjects, write_dataset

        matrices, _ = srm_subjects(n_subjects=2, n_voxels=12, n_trs=8, seed=0)
        manifest = write_dataset(tmp_path / "d", matrices, grid=None)
        rc = run_main(
            ["fit-htfa", "--manifest", manifest, "--k", 2, "--out", tmp_path / "o"]
        )
        assert rc == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"]["type"] == "DatasetConsistencyError"

    def test_inverted_width_bounds_usage_error(self, bundled, tmp_path):
        rc = run_main(
            [
                "fit-htfa",
                "--manifest", bundled,
                "--width-lo", 2,
                "--width-hi", 1,
                "--out", tmp_path / "x",
            ]
        )
        assert rc == 2


class TestGenSynthCommand:
    def test_generates_files_and_manifest(self, bundled, tmp_path, capsys):
        out = tmp_path / "synth"
        rc = run_main(
            [
                "gen-synth",
                "--seed-manifest", bundled,
                "--subjects", 4,
                "--partition", "4,4,2",
                "--seed", 3,
                "--out", out,
            ]
        )
        assert rc == 0
        listed = sorted(p.name for p in out.iterdir())
        assert listed == [
            "coords.sfab",
            "manifest.json",
            "synth-0001.sfab",
            "synth-0002.sfab",
            "synth-0003.sfab",
            "synth-0004.sfab",
        ]
        for i in range(1, 5):
            X = load_matrix(out / f"synth-{i:04d}.sfab")
            assert X.shape == (60, 20)

    def test_rerun_byte_identical(self, bundled, tmp_path):
        args = [
            "gen-synth",
            "--seed-manifest", bundled,
            "--subjects", 2,
            "--partition", "2,2,2",
            "--seed", 8,
        ]
        assert run_main(args + ["--out", tmp_path / "a"]) == 0
        assert run_main(args + ["--out", tmp_path / "b"]) == 0
        for name in ("synth-0001.sfab", "synth-0002.sfab", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()

    def test_zero_subjects_usage_error(self, bundled, tmp_path):
        rc = run_main(
            [
                "gen-synth",
                "--seed-manifest", bundled,
                "--subjects", 0,
                "--out", tmp_path / "x",
            ]
        )
        assert rc == 2

    def test_bad_partition_usage_error(self, bundled, tmp_path):
        rc = run_main(
            [
                "gen-synth",
                "--seed-manifest", bundled,
                "--subjects", 1,
                "--partition", "4,4",
                "--out", tmp_path / "x",
            ]
        )
        assert rc == 2


class TestBenchCommand:
    def test_flop_estimate_formula(self):
        # independent evaluation of the per-subject-iteration expression
        v, t, k = 3000, 2201, 60
        expected_one = (
            2.0 * (2.0 * v * t * k)
            + 2.0 * v * k * k
            + (2.0 * v * k * k - (2.0 / 3.0) * k**3)
        )
        assert srm_flops_per_subject_iteration(v, t, k) == expected_one
        n_subjects, iters = 10, 10
        assert srm_flop_estimate([v] * n_subjects, t, k, iters) == (
            iters * n_subjects * expected_one
        )

    def test_raider_scale_report(self, bundled, tmp_path, capsys):
        rc = run_main(
            ["bench", "--manifest", bundled, "--k", 3, "--iters", 2, "--out", tmp_path / "b"]
        )
        assert rc == 0
        report = json.loads((tmp_path / "b" / "report.json").read_text())
        assert report["flops"] == srm_flop_estimate([60] * 4, 20, 3, 2)
        assert report["gflops_per_s"] >= 0.0
        assert len(report["objective"]) == 2

    def test_zero_iterations(self, bundled, tmp_path, capsys):
        rc = run_main(
            ["bench", "--manifest", bundled, "--k", 3, "--iters", 0, "--out", tmp_path / "b"]
        )
        assert rc == 0
        report = json.loads((tmp_path / "b" / "report.json").read_text())
        assert report["flops"] == 0.0
        assert report["timings"]["compute"] <= 0.05
        assert report["objective"] == []

    def test_deterministic_flops(self, bundled, tmp_path, capsys):
        for d in ("r1", "r2"):
            assert (
                run_main(
                    [
                        "bench",
                        "--manifest", bundled,
                        "--k", 4,
                        "--iters", 3,
                        "--out", tmp_path / d,
                    ]
                )
                == 0
            )
        a = json.loads((tmp_path / "r1" / "report.json").read_text())
        b = json.loads((tmp_path / "r2" / "report.json").read_text())
        assert a["flops"] == b["flops"]


class TestValidateCommand:
    def test_clean_build_passes(self, capsys):
        assert run_main(["validate"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 4
        assert "FAIL" not in out

    def test_corruption_hook_fails(self, monkeypatch, capsys):
        monkeypatch.setenv("FACTORFIT_VALIDATE_CORRUPT", "lemma")
        assert run_main(["validate"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_only_filter(self, capsys):
        assert run_main(["validate", "--only", "woodbury"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 1 and "woodbury" in out[0]

    def test_unknown_check_usage_error(self):
        assert run_main(["validate", "--only", "nope"]) == 2


class TestBackendFlag:
    def test_threads_matches_serial(self, bundled, tmp_path):
        base = ["fit-srm", "--manifest", bundled, "--k", 3, "--iters", 3, "--seed", 1]
        assert run_main(base + ["--backend", "serial", "--out", tmp_path / "s"]) == 0
        assert (
            run_main(
                base
                + ["--backend", "threads", "--workers", 2, "--out", tmp_path / "t"]
            )
            == 0
        )
        for name in ("shared_response.sfab", "shared_covariance.sfab"):
            assert (tmp_path / "s" / name).read_bytes() == (
                tmp_path / "t" / name
            ).read_bytes()

    def test_too_many_workers_usage_error(self, bundled, tmp_path):
        rc = run_main(
            [
                "fit-srm",
                "--manifest", bundled,
                "--k", 2,
                "--backend", "threads",
                "--workers", 9,
                "--out", tmp_path / "x",
            ]
        )
        assert rc == 2

    def test_sockets_without_env_usage_error(self, bundled, tmp_path):
        rc = run_main(
            [
                "fit-srm",
                "--manifest", bundled,
                "--k", 2,
                "--backend", "sockets",
                "--out", tmp_path / "x",
            ]
        )
        assert rc == 2

    def test_sockets_spawn_local_matches_serial(self, bundled, tmp_path, cli_env):
        serial_out = tmp_path / "serial"
        assert (
            run_main(
                [
                    "fit-srm",
                    "--manifest", bundled,
                    "--k", 3,
                    "--iters", 3,
                    "--seed", 1,
                    "--out", serial_out,
                ]
            )
            == 0
        )
        sockets_out = tmp_path / "sockets"
        proc = subprocess.run(
            [
                sys.executable,
                "-m",
                "factorfit",
                "fit-srm",
                "--manifest", str(bundled),
                "--k", "3",
                "--iters", "3",
                "--seed", "1",
                "--backend", "sockets",
                "--workers", "2",
                "--spawn-local",
                "--out", str(sockets_out),
            ],
            env=cli_env,
            capture_output=True,
            text=True,
            timeout=120,
        )
        assert proc.returncode == 0, proc.stderr
        assert (serial_out / "shared_response.sfab").read_bytes() == (
            sockets_out / "shared_response.sfab"
        ).read_bytes()
