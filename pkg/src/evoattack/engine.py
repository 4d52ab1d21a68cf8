"""Population-based targeted attack on a query-only classifier.

The search variable is a noise grid bounded in L-infinity by delta_max,
optionally at a lower resolution than the image (upscaled bilinearly when
applied).  Each generation evaluates every member's fitness against the
target class, carries the best member over unchanged, and fills the rest of
the population by fitness-weighted selection, crossover and mutation.

Queries are the cost metric: one per single-image model evaluation, counted
by the model's own meter.  A failed run uses exactly
generations * population_size * fitness_samples queries.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from evoattack.model import softmax
from evoattack.tensors import apply_noise, l2_distance_per_pixel, linf_distance

FITNESS_FLOOR = 1e-30


@dataclass
class AttackConfig:
    """All knobs of the genetic search.

    Fixed mode uses mutation_prob/mutation_range as-is.  Adaptive mode
    anneals both from (rho_init, alpha_init) down to (rho_min, alpha_min),
    decaying by 0.9 per plateau; a plateau is plateau_window consecutive
    generations without strict elite-fitness improvement.
    """

    delta_max: float
    max_queries: int
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

    def validate(self) -> None:
        if self.delta_max < 0:
            raise ValueError("delta_max must be non-negative")
        if self.max_queries < 1:
            raise ValueError("max_queries must be positive")
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if not 0 <= self.mutation_prob <= 1:
            raise ValueError("mutation_prob must lie in [0, 1]")
        if not 0 < self.mutation_range <= 1:
            raise ValueError("mutation_range must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if (self.reduced_height is None) != (self.reduced_width is None):
            raise ValueError("reduced_height and reduced_width must be set together")
        if self.reduced_height is not None:
            if self.reduced_height < 1 or self.reduced_width < 1:
                raise ValueError("reduced dimensions must be positive")
        if self.adaptive:
            if self.rho_min > self.rho_init or self.alpha_min > self.alpha_init:
                raise ValueError("adaptive floors must not exceed initial values")
        if self.plateau_window < 1:
            raise ValueError("plateau_window must be positive")
        if self.fitness_samples < 1:
            raise ValueError("fitness_samples must be positive")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must fit in 64 unsigned bits")


@dataclass
class Population:
    members: np.ndarray  # (N, h, w, c) noise grids
    fitnesses: np.ndarray | None = None  # None until first evaluation
    generation: int = 0
    num_plateaus: int = 0
    best_fitness_seen: float = -np.inf
    steps_since_improvement: int = 0


@dataclass
class AttackResult:
    status: str  # "success" | "budget_exhausted"
    adversarial_image: np.ndarray | None
    queries_used: int
    generations: int
    final_linf: float
    final_l2_per_pixel: float
    elite_fitness_trace: list = field(default_factory=list)


def init_population(x_orig, config: AttackConfig, rng) -> Population:
    """Draw N noise grids i.i.d. uniform from (-delta_max, delta_max)."""
    config.validate()
    x = np.asarray(x_orig, dtype=np.float64)
    h = config.reduced_height if config.reduced_height is not None else x.shape[0]
    w = config.reduced_width if config.reduced_width is not None else x.shape[1]
    if h > x.shape[0] or w > x.shape[1]:
        raise ValueError("reduced grid must not exceed the image resolution")
    d = config.delta_max
    members = rng.uniform(-d, d, size=(config.population_size, h, w, x.shape[2]))
    return Population(members=members)


def compute_fitness(probs, target: int) -> float:
    """log p_target - log(sum of the other probabilities), floored at 1e-30."""
    p = np.asarray(probs, dtype=np.float64)
    p_t = max(float(p[target]), FITNESS_FLOOR)
    rest = max(float(np.sum(p) - p[target]), FITNESS_FLOOR)
    return float(np.log(p_t) - np.log(rest))


def compute_fitness_max(probs, target: int) -> float:
    """Variant for averaged (randomized-model) fitness: the runner-up
    probability replaces the non-target sum."""
    p = np.asarray(probs, dtype=np.float64)
    p_t = max(float(p[target]), FITNESS_FLOOR)
    others = np.delete(p, target)
    runner_up = max(float(np.max(others)), FITNESS_FLOOR)
    return float(np.log(p_t) - np.log(runner_up))


def selection_probs(fitnesses, temperature: float) -> np.ndarray:
    """Softmax of fitness over temperature; the mating distribution."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    f = np.asarray(fitnesses, dtype=np.float64)
    if f.size < 2:
        raise ValueError("need at least two fitness values")
    if not np.isfinite(f).all():
        raise ValueError("fitnesses must be finite")
    return softmax(f / temperature)


def crossover(parent1, parent2, fit1: float, fit2: float, rng) -> np.ndarray:
    """Per-feature pick from parent1 with probability fit1/(fit1+fit2).

    The fitness arguments are expected pre-shifted to non-negative values
    (run_attack subtracts the population minimum minus 1e-6 first, since the
    raw log-ratio fitnesses go negative); equal fitness gives exactly 0.5,
    and the ratio is clamped to [0,1] against misuse."""
    p1 = np.asarray(parent1, dtype=np.float64)
    p2 = np.asarray(parent2, dtype=np.float64)
    if p1.shape != p2.shape:
        raise ValueError(f"parent shapes differ: {p1.shape} vs {p2.shape}")
    denom = fit1 + fit2
    if denom <= 0:
        p = 0.5
    else:
        p = min(max(fit1 / denom, 0.0), 1.0)
    mask = rng.random(p1.shape) < p
    return np.where(mask, p1, p2)


def mutate(child, rho: float, alpha: float, delta_max: float, rng) -> np.ndarray:
    """Add U(-alpha*delta_max, alpha*delta_max) to each feature with
    probability rho, then clamp back into the L-infinity ball.

    The uniform draw happens for every feature regardless of the mask, so
    the rng stream advances by a fixed amount per call."""
    c = np.asarray(child, dtype=np.float64)
    mask = rng.random(c.shape) < rho
    noise = rng.uniform(-alpha * delta_max, alpha * delta_max, size=c.shape)
    return np.clip(c + mask * noise, -delta_max, delta_max)


def schedule_parameters(num_plateaus: int, config: AttackConfig) -> tuple:
    """The annealed (rho, alpha) pair after a given number of plateaus."""
    rho = max(config.rho_min, config.rho_init * 0.9**num_plateaus)
    alpha = max(config.alpha_min, config.alpha_init * 0.9**num_plateaus)
    return rho, alpha


def update_parameters(state: Population, config: AttackConfig) -> tuple:
    """Advance the plateau counter if the improvement window has elapsed,
    then return the annealed (rho, alpha)."""
    if state.steps_since_improvement >= config.plateau_window:
        state.num_plateaus += 1
        state.steps_since_improvement = 0
    return schedule_parameters(state.num_plateaus, config)


def _evaluate(model, x_orig, members, target: int, fitness_samples: int):
    """Fitness of every member, plus whether its evaluation already showed
    the target as argmax (those members are success candidates for free)."""
    n = members.shape[0]
    fits = np.empty(n)
    revealed = np.zeros(n, dtype=bool)
    if fitness_samples == 1:
        images = np.stack([apply_noise(x_orig, m) for m in members])
        if hasattr(model, "predict_batch"):
            probs = model.predict_batch(images)
        else:
            probs = np.stack([model.predict(img) for img in images])
        for i in range(n):
            fits[i] = compute_fitness(probs[i], target)
            revealed[i] = int(np.argmax(probs[i])) == target
    else:
        # randomized model: average the max-variant fitness over samples;
        # a member is a success candidate when most samples hit the target
        for i in range(n):
            image = apply_noise(x_orig, members[i])
            total = 0.0
            hits = 0
            for _ in range(fitness_samples):
                p = model.predict(image)
                total += compute_fitness_max(p, target)
                hits += int(np.argmax(p)) == target
            fits[i] = total / fitness_samples
            revealed[i] = 2 * hits > fitness_samples
    return fits, revealed


def _confirmed(model, image, target: int, repeats: int) -> bool:
    for _ in range(repeats):
        if int(np.argmax(model.predict(image))) != target:
            return False
    return True


def run_attack(
    model,
    x_orig,
    target: int,
    config: AttackConfig,
    confirm_repeats: int = 0,
    orig_probs=None,
) -> AttackResult:
    """Search for a perturbation of x_orig that the model classifies as
    `target`, within config.delta_max in L-infinity and config.max_queries
    model evaluations.

    `model` needs .predict(image) -> probabilities, .queries (meter read),
    .num_classes and optionally .predict_batch.  When confirm_repeats > 0
    (defended models), success is declared only after that many consecutive
    fresh predictions of the target class on the winning image.
    """
    config.validate()
    x = np.asarray(x_orig, dtype=np.float64)
    if not 0 <= target < model.num_classes:
        raise ValueError(f"target {target} out of range for {model.num_classes} classes")
    if orig_probs is not None and int(np.argmax(orig_probs)) == target:
        warnings.warn("target equals the model's current prediction; attack is trivial")

    rng = np.random.default_rng(config.rng_seed)
    pop = init_population(x, config, rng)
    start = model.queries
    n = config.population_size
    fs = config.fitness_samples
    rho, alpha = config.mutation_prob, config.mutation_range
    if config.adaptive:
        rho, alpha = schedule_parameters(0, config)
    trace = []

    while True:
        if (model.queries - start) + n * fs > config.max_queries:
            break  # cannot afford another full evaluation round
        fits, revealed = _evaluate(model, x, pop.members, target, fs)
        pop.fitnesses = fits
        pop.generation += 1
        elite = int(np.argmax(fits))
        trace.append(float(fits[elite]))

        if revealed.any():
            order = [elite] + sorted(
                (i for i in range(n) if i != elite), key=lambda i: -fits[i]
            )
            for i in order:
                if not revealed[i]:
                    continue
                image = apply_noise(x, pop.members[i])
                if confirm_repeats > 0:
                    left = config.max_queries - (model.queries - start)
                    if left < confirm_repeats:
                        continue  # cannot verify within budget
                    if not _confirmed(model, image, target, confirm_repeats):
                        continue
                return AttackResult(
                    status="success",
                    adversarial_image=image,
                    queries_used=model.queries - start,
                    generations=pop.generation,
                    final_linf=linf_distance(image, x),
                    final_l2_per_pixel=l2_distance_per_pixel(image, x),
                    elite_fitness_trace=trace,
                )

        if fits[elite] > pop.best_fitness_seen:
            pop.best_fitness_seen = float(fits[elite])
            pop.steps_since_improvement = 0
        else:
            pop.steps_since_improvement += 1
        if config.adaptive:
            rho, alpha = update_parameters(pop, config)

        sel = selection_probs(fits, config.temperature)
        parents = rng.choice(n, size=2 * (n - 1), p=sel)
        shifted = fits - (fits.min() - 1e-6)  # crossover needs non-negative weights
        nxt = np.empty_like(pop.members)
        nxt[0] = pop.members[elite]  # elite survives unmodified
        for i in range(n - 1):
            a, b = int(parents[2 * i]), int(parents[2 * i + 1])
            child = crossover(pop.members[a], pop.members[b], shifted[a], shifted[b], rng)
            nxt[i + 1] = mutate(child, rho, alpha, config.delta_max, rng)
        pop.members = nxt

    if pop.fitnesses is not None:
        best = apply_noise(x, pop.members[int(np.argmax(pop.fitnesses))])
        final_linf = linf_distance(best, x)
        final_l2 = l2_distance_per_pixel(best, x)
    else:
        final_linf = 0.0
        final_l2 = 0.0
    return AttackResult(
        status="budget_exhausted",
        adversarial_image=None,
        queries_used=model.queries - start,
        generations=pop.generation,
        final_linf=final_linf,
        final_l2_per_pixel=final_l2,
        elite_fitness_trace=trace,
    )
