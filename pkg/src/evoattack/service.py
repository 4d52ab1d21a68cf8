"""HTTP front of the toolkit.

Endpoints mirror the CLI subcommands: /predict for a single defended or
undefended forward pass, /attack for one targeted attack, /bench for a
dataset experiment, /defend-eval for clean-accuracy measurement, /health
for liveness.  Images travel as explicit row-major float lists; model and
dataset files are referenced by server-side paths.
"""

import contextlib

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from evoattack import __version__
from evoattack.defenses import DefendedModel, DefenseSpec
from evoattack.engine import AttackConfig, run_attack
from evoattack.harness import ExperimentSpec, load_idx, report_to_dict, run_experiment
from evoattack.model import BlackBox, QueryMeter, load_model, predict_batch


class ImagePayload(BaseModel):
    height: int
    width: int
    channels: int
    data: list[float]  # row-major, values in [0,1]

    def to_tensor(self) -> np.ndarray:
        if self.height < 1 or self.width < 1 or self.channels not in (1, 3):
            raise ValueError(f"bad image dims {self.height}x{self.width}x{self.channels}")
        if len(self.data) != self.height * self.width * self.channels:
            raise ValueError(
                f"data length {len(self.data)} != "
                f"{self.height}*{self.width}*{self.channels}"
            )
        arr = np.asarray(self.data, dtype=np.float64)
        return arr.reshape(self.height, self.width, self.channels)

    @classmethod
    def from_tensor(cls, tensor: np.ndarray) -> "ImagePayload":
        h, w, c = tensor.shape
        return cls(height=h, width=w, channels=c, data=[float(v) for v in tensor.ravel()])


class DefenseOptions(BaseModel):
    kind: str = "none"
    bits_kept: int = 5
    quality: int = 75
    dropout_rate: float = 0.5
    tv_weight: float = 0.1
    solver_iters: int = 100

    def to_spec(self) -> DefenseSpec:
        spec = DefenseSpec(
            kind=self.kind,
            bits_kept=self.bits_kept,
            quality=self.quality,
            dropout_rate=self.dropout_rate,
            tv_weight=self.tv_weight,
            solver_iters=self.solver_iters,
        )
        spec.validate()
        return spec


class AttackOptions(BaseModel):
    delta_max: float = 0.3
    max_queries: int = 100_000
    population_size: int = 6
    mutation_prob: float = 5e-2
    mutation_range: float = 1.0
    temperature: float = 0.1
    reduced_height: int | None = None
    reduced_width: int | None = None
    adaptive: bool = False
    rho_min: float = 0.1
    alpha_min: float = 0.15
    rho_init: float = 0.5
    alpha_init: float = 0.4
    plateau_window: int = 100
    fitness_samples: int = 1
    rng_seed: int = 0

    def to_config(self) -> AttackConfig:
        config = AttackConfig(**self.model_dump())
        config.validate()
        return config


class PredictRequest(BaseModel):
    model_path: str
    image: ImagePayload
    defense: DefenseOptions = Field(default_factory=DefenseOptions)
    seed: int = 0  # randomness for the tvm defense


class PredictResponse(BaseModel):
    probs: list[float]
    predicted_class: int
    queries: int


class AttackRequest(BaseModel):
    model_path: str
    image: ImagePayload
    target: int
    attack: AttackOptions = Field(default_factory=AttackOptions)
    defense: DefenseOptions = Field(default_factory=DefenseOptions)
    confirm_repeats: int = 1


class AttackResponse(BaseModel):
    status: str
    queries_used: int
    generations: int
    final_linf: float
    final_l2_per_pixel: float
    elite_fitness_trace: list[float]
    adversarial_image: ImagePayload | None = None


class BenchRequest(BaseModel):
    model_path: str
    images_path: str
    labels_path: str | None = None
    sample_count: int = 10
    target_policy: str = "random_other"
    fixed_class: int | None = None
    attack: AttackOptions = Field(default_factory=AttackOptions)
    defense: DefenseOptions = Field(default_factory=DefenseOptions)
    confirm_repeats: int = 1
    output_dir: str | None = None


class BenchResponse(BaseModel):
    report: dict
    wall_clock_sec: float


class DefendEvalRequest(BaseModel):
    model_path: str
    images_path: str
    labels_path: str
    sample_count: int = 100
    defense: DefenseOptions = Field(default_factory=DefenseOptions)
    seed: int = 0


class DefendEvalResponse(BaseModel):
    examples: int
    clean_accuracy: float
    defended_accuracy: float
    queries: int


app = FastAPI(title="evoattack service", version=__version__)


@contextlib.contextmanager
def _client_errors():
    """Map core errors onto HTTP statuses."""
    try:
        yield
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    except (ValueError, OSError) as exc:  # FormatError is a ValueError
        raise HTTPException(status_code=400, detail=str(exc))


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/predict")
def predict_endpoint(req: PredictRequest) -> PredictResponse:
    with _client_errors():
        spec = load_model(req.model_path)
        image = req.image.to_tensor()
        defense = req.defense.to_spec()
        if defense.kind == "none":
            box = BlackBox(spec)
        else:
            box = DefendedModel(spec, defense, rng=np.random.default_rng([req.seed, 1]))
        probs = box.predict(image)
        return PredictResponse(
            probs=[float(p) for p in probs],
            predicted_class=int(np.argmax(probs)),
            queries=box.queries,
        )


@app.post("/attack")
def attack_endpoint(req: AttackRequest) -> AttackResponse:
    with _client_errors():
        spec = load_model(req.model_path)
        image = req.image.to_tensor()
        config = req.attack.to_config()
        defense = req.defense.to_spec()
        if defense.kind == "none":
            box = BlackBox(spec)
            confirm = 0
        else:
            rng = np.random.default_rng([config.rng_seed, 1])
            box = DefendedModel(spec, defense, rng=rng)
            confirm = req.confirm_repeats
        result = run_attack(box, image, req.target, config, confirm_repeats=confirm)
        adv = None
        if result.adversarial_image is not None:
            adv = ImagePayload.from_tensor(result.adversarial_image)
        return AttackResponse(
            status=result.status,
            queries_used=result.queries_used,
            generations=result.generations,
            final_linf=result.final_linf,
            final_l2_per_pixel=result.final_l2_per_pixel,
            elite_fitness_trace=result.elite_fitness_trace,
            adversarial_image=adv,
        )


@app.post("/bench")
def bench_endpoint(req: BenchRequest) -> BenchResponse:
    with _client_errors():
        spec = ExperimentSpec(
            model_path=req.model_path,
            attack=req.attack.to_config(),
            images_path=req.images_path,
            labels_path=req.labels_path,
            sample_count=req.sample_count,
            target_policy=req.target_policy,
            fixed_class=req.fixed_class,
            defense=req.defense.to_spec(),
            confirm_repeats=req.confirm_repeats,
            output_dir=req.output_dir,
        )
        report = run_experiment(spec)
        return BenchResponse(
            report=report_to_dict(report),
            wall_clock_sec=report.wall_clock_sec,
        )


@app.post("/defend-eval")
def defend_eval_endpoint(req: DefendEvalRequest) -> DefendEvalResponse:
    with _client_errors():
        spec = load_model(req.model_path)
        defense = req.defense.to_spec()
        images, labels = load_idx(req.images_path, req.labels_path)
        if req.sample_count < 1:
            raise ValueError("sample_count must be positive")
        n = min(req.sample_count, images.shape[0])
        images, labels = images[:n], labels[:n]
        meter = QueryMeter()
        clean = predict_batch(spec, images, meter)
        clean_acc = float(np.mean(np.argmax(clean, axis=1) == labels))
        if defense.kind == "none":
            defended_acc = clean_acc
        else:
            dm = DefendedModel(
                spec, defense, rng=np.random.default_rng([req.seed, 1]), meter=meter
            )
            defended = dm.predict_batch(images)
            defended_acc = float(np.mean(np.argmax(defended, axis=1) == labels))
        return DefendEvalResponse(
            examples=n,
            clean_accuracy=clean_acc,
            defended_accuracy=defended_acc,
            queries=meter.count,
        )
