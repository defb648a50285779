"""End-to-end command-line pipeline: artifacts, determinism, exit codes."""

import json

import numpy as np
import pytest

from netquant import cli, decode_assignments, load_model

TRAIN_ARGS = [
    "--dataset", "synth",
    "--synth-samples", "600",
    "--synth-classes", "3",
    "--synth-features", "6",
    "--hidden", "16",
    "--steps", "250",
    "--seed", "1",
]


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("ref") / "model"
    assert cli.main(["train-ref", "--out-dir", str(path), *TRAIN_ARGS]) == 0
    return path


def run(args):
    return cli.main([str(a) for a in args])


class TestTrainRef:
    def test_model_dir_contents(self, model_dir):
        ps, cv, mask = load_model(model_dir)
        assert ps.n == 6 * 16 + 16 + 16 * 3 + 3
        assert cv is not None and cv.source.value == "adam_sqrt_moment"
        assert mask is None
        doc = json.loads((model_dir / "refnet.json").read_text())
        assert doc["layer_widths"] == [6, 16, 3]


class TestQuantize:
    def test_fixed_k8_avg_bits_exactly_three(self, model_dir, tmp_path):
        out = tmp_path / "q"
        assert run([
            "quantize", "--model-dir", model_dir, "--out-dir", out,
            "--quantizer", "kmeans", "--coding", "fixed", "--k", "8",
        ]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["avg_codeword_bits"] == 3.0
        assert report["k_effective"] == 8
        assert (out / "model.nq").is_file()
        assert (out / "config.txt").is_file()

    def test_ecsq_target_ratio_meets_budget(self, model_dir, tmp_path):
        out = tmp_path / "q"
        assert run([
            "quantize", "--model-dir", model_dir, "--out-dir", out,
            "--quantizer", "ecsq", "--coding", "huffman",
            "--target-ratio", "16", "--dataset", "synth",
            "--curvature", "gauss-newton",
        ]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["entropy_budget"] == pytest.approx(2.0)
        assert report["entropy_bits"] <= 2.05

    def test_missing_dataset_no_partial_outputs(self, model_dir, tmp_path):
        out = tmp_path / "q"
        code = run([
            "quantize", "--model-dir", model_dir, "--out-dir", out,
            "--quantizer", "kmeans", "--k", "4",
            "--dataset", tmp_path / "nowhere.csv",
        ])
        assert code == cli.EXIT_CONFIG
        assert not out.exists()

    def test_ecsq_requires_exactly_one_knob(self, model_dir, tmp_path):
        base = [
            "quantize", "--model-dir", model_dir, "--out-dir", tmp_path / "q",
            "--quantizer", "ecsq",
        ]
        assert run(base + ["--k", "4", "--target-ratio", "16"]) == cli.EXIT_CONFIG
        assert run(base) == cli.EXIT_CONFIG

    def test_missing_model_dir_is_io_error(self, tmp_path):
        code = run([
            "quantize", "--model-dir", tmp_path / "missing", "--out-dir",
            tmp_path / "q", "--quantizer", "kmeans", "--k", "4",
        ])
        assert code == cli.EXIT_IO

    def test_artifacts_byte_identical_across_reruns(self, model_dir, tmp_path):
        args = [
            "quantize", "--model-dir", model_dir, "--quantizer", "hw-kmeans",
            "--coding", "huffman", "--k", "6", "--dataset", "synth",
            "--curvature", "gauss-newton", "--seed", "3",
        ]
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run(args + ["--out-dir", out1]) == 0
        assert run(args + ["--out-dir", out2]) == 0
        assert (out1 / "model.nq").read_bytes() == (out2 / "model.nq").read_bytes()
        assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()

    def test_report_numbers_recomputable_from_artifact(self, model_dir, tmp_path):
        out = tmp_path / "q"
        assert run([
            "quantize", "--model-dir", model_dir, "--out-dir", out,
            "--quantizer", "uniform", "--coding", "huffman", "--k", "12",
        ]) == 0
        report = json.loads((out / "report.json").read_text())
        decoded = decode_assignments((out / "model.nq").read_bytes())
        from netquant import build_huffman, compression_ratio_exact, entropy_bits

        counts = decoded.codebook.counts
        assert report["entropy_bits"] == pytest.approx(entropy_bits(counts))
        assert report["avg_codeword_bits"] == pytest.approx(
            decoded.code.avg_bits(counts)
        )
        assert report["ratio_exact"] == pytest.approx(
            compression_ratio_exact(int(counts.sum()), 32, counts, decoded.code)
        )


class TestPrunedPipeline:
    def test_prune_quantize_decode_roundtrip(self, model_dir, tmp_path):
        out = tmp_path / "q"
        assert run([
            "quantize", "--model-dir", model_dir, "--out-dir", out,
            "--quantizer", "uniform", "--coding", "huffman", "--k", "8",
            "--prune-fraction", "0.8",
        ]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["pruned"] is True
        assert report["bit_breakdown"]["index_section"] > 0
        decoded = decode_assignments((out / "model.nq").read_bytes())
        ps, _, _ = load_model(model_dir)
        assert decoded.total_params == ps.n
        assert decoded.positions.size == report["n_params"]


class TestSweep:
    def test_row_count_and_determinism(self, model_dir, tmp_path):
        args = [
            "sweep", "--model-dir", model_dir,
            "--quantizers", "kmeans,hw-kmeans", "--k-list", "2,4,8,16",
            "--coding", "huffman",
        ]
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        assert run(args + ["--out-dir", out1]) == 0
        assert run(args + ["--out-dir", out2]) == 0
        lines = (out1 / "sweep.csv").read_text().splitlines()
        assert lines[0] == "# netquant-sweep-csv v1"
        assert len(lines) == 2 + 8  # comment, header, 2 quantizers x 4 points
        assert (out1 / "sweep.csv").read_bytes() == (out2 / "sweep.csv").read_bytes()

    def test_ecsq_avg_bits_non_increasing_in_lam(self, model_dir, tmp_path):
        out = tmp_path / "s"
        assert run([
            "sweep", "--model-dir", model_dir, "--out-dir", out,
            "--quantizers", "ecsq", "--k", "16",
            "--lambda-list", "0,1e-7,1e-5,1e-3,1e-1",
            "--coding", "huffman", "--curvature", "identity",
        ]) == 0
        rows = (out / "sweep.csv").read_text().splitlines()[2:]
        avg_bits = [float(r.split(",")[6]) for r in rows]
        assert all(b >= a - 1e-12 for a, b in zip(avg_bits[1:], avg_bits))

    def test_failed_point_recorded_and_sweep_continues(self, model_dir, tmp_path):
        out = tmp_path / "s"
        assert run([
            "sweep", "--model-dir", model_dir, "--out-dir", out,
            "--quantizers", "hw-kmeans", "--k-list", "0,4",
            "--coding", "fixed",
        ]) == 0
        rows = (out / "sweep.csv").read_text().splitlines()[2:]
        assert rows[0].split(",")[-1].startswith("error:")
        assert rows[1].split(",")[-1] == "ok"


class TestReport:
    def test_fixed_k4_n1000_hand_ratio(self, tmp_path):
        from netquant import Codebook, encode_assignments, fixed_length_code

        assignment = np.tile(np.arange(4), 250)
        cb = Codebook(np.arange(4.0), np.bincount(assignment))
        em = encode_assignments(assignment, cb, fixed_length_code(4))
        nq_path = tmp_path / "m.nq"
        em.save(nq_path)
        out = tmp_path / "r.json"
        assert run(["report", "--model-nq", nq_path, "--out", out]) == 0
        doc = json.loads(out.read_text())
        assert doc["ratio_exact"] == pytest.approx(32000 / 2136)
        assert doc["avg_codeword_bits"] == 2.0

    def test_decode_only_accuracy_absent(self, model_dir, tmp_path):
        out = tmp_path / "q"
        assert run([
            "quantize", "--model-dir", model_dir, "--out-dir", out,
            "--quantizer", "kmeans", "--coding", "fixed", "--k", "4",
        ]) == 0
        rpt = tmp_path / "r.json"
        assert run(["report", "--model-nq", out / "model.nq", "--out", rpt]) == 0
        doc = json.loads(rpt.read_text())
        assert doc["accuracy"] is None

    def test_accuracy_present_with_dataset(self, model_dir, tmp_path):
        out = tmp_path / "q"
        assert run([
            "quantize", "--model-dir", model_dir, "--out-dir", out,
            "--quantizer", "kmeans", "--coding", "fixed", "--k", "8",
            "--dataset", "synth",
        ]) == 0
        rpt = tmp_path / "r.json"
        assert run([
            "report", "--model-nq", out / "model.nq",
            "--model-dir", model_dir, "--dataset", "synth", "--out", rpt,
        ]) == 0
        doc = json.loads(rpt.read_text())
        report = json.loads((out / "report.json").read_text())
        assert doc["accuracy"] == pytest.approx(report["accuracy_pre_finetune"])

    def test_undecodable_file_is_io_error(self, tmp_path):
        bad = tmp_path / "bad.nq"
        bad.write_bytes(b"not a model")
        assert run(["report", "--model-nq", bad]) == cli.EXIT_IO


class TestConfigFile:
    def test_config_file_with_flag_override(self, model_dir, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("quantizer=kmeans\ncoding=fixed\nk=4\n# comment\n")
        out = tmp_path / "q"
        assert run([
            "quantize", "--config", cfg, "--model-dir", model_dir,
            "--out-dir", out, "--k", "8",
        ]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["k_effective"] == 8  # flag beats file
        assert "k=8" in (out / "config.txt").read_text()

    def test_unknown_key_rejected(self, model_dir, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("quantizzzer=kmeans\n")
        assert run([
            "quantize", "--config", cfg, "--model-dir", model_dir,
            "--out-dir", tmp_path / "q", "--k", "4",
        ]) == cli.EXIT_CONFIG


class TestCurvatureCommand:
    def test_gauss_newton_stored(self, model_dir, tmp_path):
        out = tmp_path / "m2"
        assert run([
            "curvature", "--model-dir", model_dir, "--out-dir", out,
            "--curvature", "gauss-newton", "--dataset", "synth",
        ]) == 0
        _, cv, _ = load_model(out)
        assert cv.source.value == "gauss_newton"

    def test_adam_recompute_rejected(self, model_dir, tmp_path):
        assert run([
            "curvature", "--model-dir", model_dir, "--out-dir", tmp_path / "m",
            "--curvature", "adam",
        ]) == cli.EXIT_CONFIG


class TestPruneCommand:
    def test_mask_written(self, model_dir, tmp_path):
        out = tmp_path / "pruned"
        assert run([
            "prune", "--model-dir", model_dir, "--out-dir", out,
            "--prune-fraction", "0.5",
        ]) == 0
        ps, _, mask = load_model(out)
        assert mask is not None
        assert mask.n_kept == ps.n - int(0.5 * ps.n)
