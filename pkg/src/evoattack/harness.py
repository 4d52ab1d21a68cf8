"""Batch experiment orchestration: datasets in, attack metrics out.

Loads IDX digit sets or PGM/PPM images, keeps only examples the base model
classifies correctly (those setup queries are metered separately from the
attack), assigns a target class per example, runs the attack per example
with its own meter and derived seed, and writes a deterministic JSON report
plus the successful adversarial images with raw-f32 noise sidecars.
"""

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from evoattack.defenses import DefendedModel, DefenseSpec
from evoattack.engine import AttackConfig, run_attack
from evoattack.model import (
    BlackBox,
    FormatError,
    ModelSpec,
    QueryMeter,
    load_model,
    predict_batch,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def load_idx(images_path, labels_path):
    """Parse a big-endian IDX image/label pair into ([N,H,W,1] in [0,1], [N] ints)."""
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    if len(img_raw) < 16:
        raise FormatError(f"{images_path}: too short for an IDX image header")
    magic, n, rows, cols = struct.unpack(">IIII", img_raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad magic {magic:#010x}, expected images IDX")
    if len(img_raw) != 16 + n * rows * cols:
        raise FormatError(f"{images_path}: size does not match {n}x{rows}x{cols} pixels")
    if len(lab_raw) < 8:
        raise FormatError(f"{labels_path}: too short for an IDX label header")
    lmagic, ln = struct.unpack(">II", lab_raw[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad magic {lmagic:#010x}, expected labels IDX")
    if len(lab_raw) != 8 + ln:
        raise FormatError(f"{labels_path}: size does not match {ln} labels")
    if n != ln:
        raise FormatError(f"image count {n} != label count {ln}")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16)
    images = pixels.reshape(n, rows, cols, 1).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=8).astype(np.int64)
    return images, labels


def _read_pnm_header(data: bytes, path):
    # header tokens may be separated by whitespace and '#' comments
    if len(data) < 2 or data[:1] != b"P":
        raise FormatError(f"{path}: not a PNM file")
    magic = data[:2].decode("ascii", "replace")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError:
            raise FormatError(f"{path}: non-numeric header token")
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = tokens
    return magic, width, height, maxval, pos


def load_image(path):
    """Read a binary PGM (P5) or PPM (P6) with maxval 255 as an (H,W,C) tensor."""
    data = Path(path).read_bytes()
    magic, width, height, maxval, pos = _read_pnm_header(data, path)
    if magic == "P5":
        channels = 1
    elif magic == "P6":
        channels = 3
    else:
        raise FormatError(f"{path}: unsupported magic {magic!r} (want P5 or P6)")
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (want 255)")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    need = width * height * channels
    body = data[pos : pos + need]
    if len(body) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    return arr.astype(np.float64) / 255.0


def save_image(path, image) -> None:
    """Write an (H,W,1) tensor as P5 or (H,W,3) as P6, maxval 255."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] not in (1, 3):
        raise ValueError(f"expected (H,W,1) or (H,W,3), got {x.shape}")
    quantized = np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    magic = b"P5" if x.shape[2] == 1 else b"P6"
    header = magic + f"\n{x.shape[1]} {x.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + quantized.tobytes())


def save_noise(path, noise) -> None:
    """Raw little-endian f32 dump of a noise tensor, row-major, no header."""
    arr = np.asarray(noise, dtype="<f4")
    Path(path).write_bytes(arr.tobytes())


@dataclass
class ExperimentSpec:
    model_path: str
    attack: AttackConfig
    images_path: str
    labels_path: str | None = None
    sample_count: int = 10
    target_policy: str = "random_other"  # random_other | fixed | next_class
    fixed_class: int | None = None
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    confirm_repeats: int = 1
    output_dir: str | None = None

    def validate(self) -> None:
        self.attack.validate()
        self.defense.validate()
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")
        if self.target_policy not in ("random_other", "fixed", "next_class"):
            raise ValueError(f"unknown target policy {self.target_policy!r}")
        if self.target_policy == "fixed" and self.fixed_class is None:
            raise ValueError("fixed target policy needs fixed_class")
        if self.confirm_repeats < 1:
            raise ValueError("confirm_repeats must be positive")


@dataclass
class ExampleRecord:
    index: int
    true_label: int
    target: int
    status: str
    queries: int
    linf: float
    l2_per_pixel: float
    generations: int


@dataclass
class ExperimentReport:
    records: list
    attack_success_rate: float
    median_queries: float | None  # over successes; None when none succeeded
    mean_linf: float | None
    setup_queries: int
    wall_clock_sec: float  # not serialized: would break report reproducibility


def _load_dataset(spec: ExperimentSpec):
    """Returns (images [N,H,W,C], labels [N] or None)."""
    if spec.labels_path is not None:
        return load_idx(spec.images_path, spec.labels_path)
    src = Path(spec.images_path)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix in (".pgm", ".ppm"))
        if not files:
            raise FormatError(f"{src}: no .pgm/.ppm images found")
        images = [load_image(p) for p in files]
    else:
        images = [load_image(src)]
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise FormatError(f"images in {src} have mixed shapes {sorted(shapes)}")
    return np.stack(images), None


def _pick_targets(true_labels, policy, fixed_class, num_classes, rng):
    targets = []
    for label in true_labels:
        if policy == "random_other":
            t = int(rng.integers(num_classes - 1))
            if t >= label:
                t += 1
        elif policy == "next_class":
            t = (label + 1) % num_classes
        else:
            t = int(fixed_class)
        targets.append(t)
    return targets


def _prefilter(model: ModelSpec, images, labels, wanted: int, meter: QueryMeter):
    """First `wanted` examples the base model classifies correctly.

    Returns (indices, probs rows).  Labels of None mean unlabeled input;
    the model's own prediction then counts as the true label.
    """
    kept = []
    kept_probs = []
    chunk = 256
    for lo in range(0, images.shape[0], chunk):
        batch = images[lo : lo + chunk]
        probs = predict_batch(model, batch, meter)
        preds = np.argmax(probs, axis=1)
        for off in range(batch.shape[0]):
            idx = lo + off
            if labels is not None and int(preds[off]) != int(labels[idx]):
                continue
            kept.append(idx)
            kept_probs.append(probs[off])
            if len(kept) == wanted:
                return kept, kept_probs
    return kept, kept_probs


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    spec.validate()
    t0 = time.perf_counter()
    model = load_model(spec.model_path)
    images, labels = _load_dataset(spec)

    setup_meter = QueryMeter()
    kept, kept_probs = _prefilter(model, images, labels, spec.sample_count, setup_meter)
    if not kept:
        raise ValueError("no correctly classified examples to attack")

    master = spec.attack.rng_seed
    target_rng = np.random.default_rng(master)
    true_labels = [
        int(labels[i]) if labels is not None else int(np.argmax(kept_probs[k]))
        for k, i in enumerate(kept)
    ]
    targets = _pick_targets(true_labels, spec.target_policy, spec.fixed_class,
                            model.num_classes, target_rng)

    out_dir = None
    if spec.output_dir is not None:
        out_dir = Path(spec.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for k, idx in enumerate(kept):
        cfg = AttackConfig(**{**spec.attack.__dict__, "rng_seed": master ^ idx})
        if spec.defense.kind == "none":
            attacked = BlackBox(model)
            confirm = 0
        else:
            defense_rng = np.random.default_rng([master ^ idx, 1])
            attacked = DefendedModel(model, spec.defense, rng=defense_rng)
            confirm = spec.confirm_repeats
        result = run_attack(attacked, images[idx], targets[k], cfg,
                            confirm_repeats=confirm, orig_probs=kept_probs[k])
        assert result.queries_used == attacked.queries
        records.append(ExampleRecord(
            index=idx,
            true_label=true_labels[k],
            target=targets[k],
            status=result.status,
            queries=result.queries_used,
            linf=result.final_linf,
            l2_per_pixel=result.final_l2_per_pixel,
            generations=result.generations,
        ))
        if result.status == "success" and out_dir is not None:
            ext = ".pgm" if images[idx].shape[2] == 1 else ".ppm"
            save_image(out_dir / f"adv_{idx:05d}{ext}", result.adversarial_image)
            save_noise(out_dir / f"adv_{idx:05d}.noise.f32",
                       result.adversarial_image - images[idx])

    wins = [r for r in records if r.status == "success"]
    asr = len(wins) / len(records)
    median_queries = float(np.median([r.queries for r in wins])) if wins else None
    mean_linf = float(np.mean([r.linf for r in wins])) if wins else None
    report = ExperimentReport(
        records=records,
        attack_success_rate=asr,
        median_queries=median_queries,
        mean_linf=mean_linf,
        setup_queries=setup_meter.count,
        wall_clock_sec=time.perf_counter() - t0,
    )
    if out_dir is not None:
        write_report(report, out_dir / "report.json")
    return report


def report_to_dict(report: ExperimentReport) -> dict:
    """Serializable view of a report, wall clock excluded so identical runs
    serialize identically."""
    return {
        "records": [
            {
                "index": r.index,
                "true_label": r.true_label,
                "target": r.target,
                "status": r.status,
                "queries": r.queries,
                "linf": r.linf,
                "l2_per_pixel": r.l2_per_pixel,
                "generations": r.generations,
            }
            for r in report.records
        ],
        "aggregates": {
            "examples": len(report.records),
            "attack_success_rate": report.attack_success_rate,
            "median_queries": report.median_queries,
            "mean_linf": report.mean_linf,
            "setup_queries": report.setup_queries,
        },
    }


def write_report(report: ExperimentReport, path) -> None:
    text = json.dumps(report_to_dict(report), indent=2)
    Path(path).write_text(text + "\n")
