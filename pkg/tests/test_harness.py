"""Dataset I/O, target policies, experiment orchestration, report shape."""

import json
import struct

import numpy as np
import pytest

from conftest import TINY_B, TINY_W, gnw_bytes, idx_bytes
from evoattack.engine import AttackConfig
from evoattack.defenses import DefenseSpec
from evoattack.harness import (
    ExampleRecord,
    ExperimentReport,
    ExperimentSpec,
    _pick_targets,
    load_idx,
    load_image,
    run_experiment,
    save_image,
    save_noise,
    write_report,
)
from evoattack.model import FormatError, QueryMeter, load_model, predict_batch


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(3, 4, 4), dtype=np.uint8)
    images[0, 0, 0] = 7
    labels = np.array([1, 0, 1], dtype=np.uint8)
    img_bytes, lab_bytes = idx_bytes(images, labels)
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labs.idx"
    ip.write_bytes(img_bytes)
    lp.write_bytes(lab_bytes)
    return ip, lp, images, labels


class TestLoadIdx:
    def test_roundtrip_values(self, idx_pair):
        ip, lp, raw, labels = idx_pair
        images, got_labels = load_idx(ip, lp)
        assert images.shape == (3, 4, 4, 1)
        assert images[0, 0, 0, 0] == pytest.approx(7 / 255)
        assert np.array_equal(got_labels, labels)
        assert np.allclose(images[:, :, :, 0] * 255, raw)

    def test_count_mismatch(self, idx_pair, tmp_path):
        ip, _, _, _ = idx_pair
        lp = tmp_path / "short_labels.idx"
        lp.write_bytes(struct.pack(">II", 0x801, 2) + bytes([1, 0]))
        with pytest.raises(FormatError, match="count"):
            load_idx(ip, lp)

    def test_empty_file(self, tmp_path):
        ip = tmp_path / "empty.idx"
        ip.write_bytes(b"")
        lp = tmp_path / "labs.idx"
        lp.write_bytes(struct.pack(">II", 0x801, 0))
        with pytest.raises(FormatError):
            load_idx(ip, lp)

    def test_bad_magic(self, idx_pair, tmp_path):
        _, lp, _, _ = idx_pair
        ip = tmp_path / "bad.idx"
        ip.write_bytes(struct.pack(">IIII", 0x123, 3, 4, 4) + bytes(48))
        with pytest.raises(FormatError, match="magic"):
            load_idx(ip, lp)

    def test_truncated_pixels(self, idx_pair, tmp_path):
        _, lp, _, _ = idx_pair
        ip = tmp_path / "trunc.idx"
        ip.write_bytes(struct.pack(">IIII", 0x803, 3, 4, 4) + bytes(47))
        with pytest.raises(FormatError, match="size"):
            load_idx(ip, lp)


class TestImageIO:
    def test_pgm_normalization(self, tmp_path):
        path = tmp_path / "two.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
        img = load_image(path)
        assert img.shape == (2, 2, 1)
        assert np.allclose(img[:, :, 0].ravel(), [0, 128 / 255, 1.0, 64 / 255])

    def test_ppm_three_channels(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n1 2\n255\n" + bytes([255, 0, 0, 0, 255, 0]))
        img = load_image(path)
        assert img.shape == (2, 1, 3)
        assert img[0, 0, 0] == 1.0 and img[1, 0, 1] == 1.0

    def test_header_comments_skipped(self, tmp_path):
        path = tmp_path / "comment.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n# another\n255\n" + bytes([10, 20]))
        img = load_image(path)
        assert img.shape == (1, 2, 1)

    def test_rejects_wrong_maxval(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(FormatError, match="maxval"):
            load_image(path)

    def test_rejects_unknown_magic(self, tmp_path):
        path = tmp_path / "a.pbm"
        path.write_bytes(b"P4\n1 1\n\x00")
        with pytest.raises(FormatError):
            load_image(path)

    def test_rejects_truncated_body(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes([1, 2]))
        with pytest.raises(FormatError, match="pixel bytes"):
            load_image(path)

    def test_save_load_roundtrip(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, size=(5, 3, 3)).astype(np.float64) / 255
        path = tmp_path / "rt.ppm"
        save_image(path, img)
        back = load_image(path)
        assert np.array_equal(back, img)

    def test_noise_sidecar_preserves_f32_values(self, tmp_path):
        noise = np.random.default_rng(2).uniform(-0.3, 0.3, size=(4, 4, 1))
        path = tmp_path / "n.f32"
        save_noise(path, noise)
        back = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(4, 4, 1)
        assert np.max(np.abs(back - noise)) < 1e-7


class TestTargetPolicies:
    def test_random_other_covers_everything_but_truth(self):
        rng = np.random.default_rng(3)
        targets = _pick_targets([4] * 2000, "random_other", None, 10, rng)
        assert 4 not in targets
        assert set(targets) == set(range(10)) - {4}

    def test_next_class_wraps(self):
        targets = _pick_targets([8, 9], "next_class", None, 10, np.random.default_rng(0))
        assert targets == [9, 0]

    def test_fixed(self):
        targets = _pick_targets([1, 2], "fixed", 7, 10, np.random.default_rng(0))
        assert targets == [7, 7]


def write_linear_model(tmp_path, weights, bias, shape=(2, 2, 1), num_classes=2):
    path = tmp_path / "model.gnw"
    path.write_bytes(
        gnw_bytes(shape, num_classes, [("flatten",), ("dense", weights, bias), ("softmax",)])
    )
    return path


class TestRunExperiment:
    @pytest.mark.filterwarnings("ignore:target equals")
    def test_degenerate_policy_gives_full_asr_and_median_n(self, tmp_path):
        # constant-class model: every attack succeeds in one generation
        model_path = write_linear_model(tmp_path, np.zeros((2, 4)), np.array([0.0, 1.0]))
        images = np.random.default_rng(4).integers(0, 256, (5, 2, 2), dtype=np.uint8)
        img_b, lab_b = idx_bytes(images, np.ones(5, dtype=np.uint8))
        ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
        ip.write_bytes(img_b)
        lp.write_bytes(lab_b)
        spec = ExperimentSpec(
            model_path=str(model_path),
            attack=AttackConfig(delta_max=0.0, max_queries=100, rng_seed=5),
            images_path=str(ip),
            labels_path=str(lp),
            sample_count=5,
            target_policy="fixed",
            fixed_class=1,
        )
        report = run_experiment(spec)
        assert report.attack_success_rate == 1.0
        assert report.median_queries == 6
        assert report.setup_queries == 5
        for record in report.records:
            assert record.generations == 1

    def test_rejects_zero_samples(self, tmp_path):
        model_path = write_linear_model(tmp_path, TINY_W, TINY_B)
        spec = ExperimentSpec(
            model_path=str(model_path),
            attack=AttackConfig(delta_max=0.1, max_queries=10),
            images_path="whatever",
            sample_count=0,
        )
        with pytest.raises(ValueError):
            run_experiment(spec)

    def test_errors_when_nothing_classified_correctly(self, tmp_path):
        model_path = write_linear_model(tmp_path, np.zeros((2, 4)), np.array([0.0, 1.0]))
        images = np.random.default_rng(6).integers(0, 256, (4, 2, 2), dtype=np.uint8)
        img_b, lab_b = idx_bytes(images, np.zeros(4, dtype=np.uint8))  # model says 1
        ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
        ip.write_bytes(img_b)
        lp.write_bytes(lab_b)
        spec = ExperimentSpec(
            model_path=str(model_path),
            attack=AttackConfig(delta_max=0.1, max_queries=100),
            images_path=str(ip),
            labels_path=str(lp),
            sample_count=2,
        )
        with pytest.raises(ValueError, match="correctly classified"):
            run_experiment(spec)

    def _bench_spec(self, tmp_path, out=None, seed=9):
        rng = np.random.default_rng(7)
        weights = rng.normal(size=(3, 16))
        bias = rng.normal(size=3) * 0.1
        model_path = write_linear_model(tmp_path, weights, bias, shape=(4, 4, 1), num_classes=3)
        images = rng.integers(0, 256, (8, 4, 4), dtype=np.uint8)
        model = load_model(model_path)
        probs = predict_batch(model, images[:, :, :, None] / 255.0, QueryMeter())
        labels = np.argmax(probs, axis=1).astype(np.uint8)
        img_b, lab_b = idx_bytes(images, labels)
        ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
        ip.write_bytes(img_b)
        lp.write_bytes(lab_b)
        return ExperimentSpec(
            model_path=str(model_path),
            attack=AttackConfig(delta_max=0.3, max_queries=400, rng_seed=seed),
            images_path=str(ip),
            labels_path=str(lp),
            sample_count=6,
            output_dir=str(out) if out else None,
        )

    def test_reports_are_deterministic(self, tmp_path):
        first = run_experiment(self._bench_spec(tmp_path))
        second = run_experiment(self._bench_spec(tmp_path))
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        write_report(first, a)
        write_report(second, b)
        assert a.read_bytes() == b.read_bytes()

    def test_failed_runs_account_queries_exactly(self, tmp_path):
        spec = self._bench_spec(tmp_path)
        spec.attack.delta_max = 1e-5  # hopeless radius: every attack fails
        report = run_experiment(spec)
        assert report.attack_success_rate == 0.0
        assert report.median_queries is None
        for record in report.records:
            assert record.status == "budget_exhausted"
            assert record.queries == record.generations * 6

    def test_output_files_written_and_consistent(self, tmp_path):
        out = tmp_path / "out"
        report = run_experiment(self._bench_spec(tmp_path, out=out))
        assert (out / "report.json").exists()
        on_disk = json.loads((out / "report.json").read_text())
        assert on_disk["aggregates"]["examples"] == len(report.records)
        wins = [r for r in report.records if r.status == "success"]
        assert wins, "expected at least one success at delta 0.3"
        for record in wins:
            img_path = out / f"adv_{record.index:05d}.pgm"
            noise_path = out / f"adv_{record.index:05d}.noise.f32"
            assert img_path.exists() and noise_path.exists()
            adv = load_image(img_path)
            noise = np.frombuffer(noise_path.read_bytes(), dtype="<f4")
            assert noise.size == adv.size
            assert np.abs(noise).max() <= 0.3 + 1e-6

    def test_defended_bench_runs_and_confirms(self, tmp_path):
        spec = self._bench_spec(tmp_path)
        spec.defense = DefenseSpec(kind="bit_depth", bits_kept=5)
        spec.confirm_repeats = 3
        report = run_experiment(spec)
        for record in report.records:
            if record.status == "success":
                # one confirmation round on top of the evaluation cost
                assert record.queries >= record.generations * 6 + 3


class TestWriteReport:
    def _report(self, records):
        wins = [r for r in records if r.status == "success"]
        return ExperimentReport(
            records=records,
            attack_success_rate=len(wins) / len(records),
            median_queries=float(np.median([r.queries for r in wins])) if wins else None,
            mean_linf=float(np.mean([r.linf for r in wins])) if wins else None,
            setup_queries=4,
            wall_clock_sec=1.23,
        )

    def test_no_successes_serializes_null_median(self, tmp_path):
        record = ExampleRecord(0, 1, 2, "budget_exhausted", 96, 0.1, 0.01, 16)
        path = tmp_path / "r.json"
        write_report(self._report([record]), path)
        data = json.loads(path.read_text())
        assert data["aggregates"]["median_queries"] is None
        assert data["aggregates"]["attack_success_rate"] == 0.0

    def test_single_success_median(self, tmp_path):
        record = ExampleRecord(3, 1, 2, "success", 996, 0.29, 0.01, 166)
        path = tmp_path / "r.json"
        write_report(self._report([record]), path)
        data = json.loads(path.read_text())
        assert data["aggregates"]["median_queries"] == 996

    def test_wall_clock_not_serialized(self, tmp_path):
        record = ExampleRecord(0, 1, 2, "success", 6, 0.0, 0.0, 1)
        path = tmp_path / "r.json"
        write_report(self._report([record]), path)
        assert "wall_clock" not in path.read_text()
