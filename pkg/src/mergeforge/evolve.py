"""Black-box search over merge hyperparameters with a (mu+lambda)-ES.

The strategy is deliberately simple and fully reproducible: mu=4 parents,
lambda=12 offspring per generation, Gaussian mutation with per-dimension
step sizes initialized to 0.3*(upper-lower), one-fifth success rule
(step sizes x1.22 when more than 1/5 of offspring beat their parent in a
generation, x0.82 otherwise), box constraints by clamping, and elitist
(mu+lambda) selection with ties broken by earlier evaluation order.

All random draws happen on the driving thread in a fixed order (parent
initialization first, then each generation's mutations), so results are
identical whether candidate evaluations run serially or concurrently.
Dimension names map onto recipe slots: "lambda", "density", "drop_prob",
"t", and "weight_<i>" for the i-th model's linear weight.
"""

from __future__ import annotations

import json
import math
import os
import re
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .recipes import MergeParams, MergeRecipe, serialize_recipe

__all__ = [
    "MU",
    "LAMBDA",
    "EvolveError",
    "EvaluationFailure",
    "EvolveAbort",
    "Dim",
    "SearchSpace",
    "Candidate",
    "GenerationStats",
    "EvolveLog",
    "parse_space",
    "evolve",
    "candidate_to_recipe",
    "make_command_evaluator",
    "log_to_csv",
]

MU = 4
LAMBDA = 12

_SIGMA_INIT_FRACTION = 0.3
_SIGMA_GROW = 1.22
_SIGMA_SHRINK = 0.82
_EVAL_TRIES = 4  # one attempt plus three retries

_DIM_NAME_RE = re.compile(r"^(lambda|density|drop_prob|t|weight_(0|[1-9][0-9]*))$")

Evaluator = Callable[[np.ndarray, int], float]


class EvolveError(ValueError):
    """Bad search space, budget, or dimension-to-recipe mapping."""


class EvaluationFailure(RuntimeError):
    """A single candidate evaluation failed (bad exit, unparseable fitness)."""


class EvolveAbort(RuntimeError):
    """Evaluation kept failing after retries; carries the partial results."""

    def __init__(self, message: str, log: "EvolveLog", best: "Candidate | None") -> None:
        super().__init__(message)
        self.log = log
        self.best = best


@dataclass(frozen=True)
class Dim:
    name: str
    lower: float
    upper: float


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dim, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for d in self.dims:
            if not _DIM_NAME_RE.match(d.name):
                raise EvolveError(
                    f"dim name {d.name!r} is not lambda, density, drop_prob, t, or weight_<i>"
                )
            if d.name in seen:
                raise EvolveError(f"duplicate dim name {d.name!r}")
            seen.add(d.name)
            if not (math.isfinite(d.lower) and math.isfinite(d.upper) and d.lower < d.upper):
                raise EvolveError(f"dim {d.name!r}: need finite lower < upper")

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([d.lower for d in self.dims], dtype=np.float64)
        hi = np.array([d.upper for d in self.dims], dtype=np.float64)
        return lo, hi


@dataclass(eq=False)
class Candidate:
    """One point in the box; `order` is its global evaluation index."""

    x: np.ndarray
    fitness: float | None = None
    order: int = -1


@dataclass(frozen=True)
class GenerationStats:
    best_fitness: float
    mean_fitness: float
    sigma: float


@dataclass
class EvolveLog:
    generations: list[GenerationStats] = field(default_factory=list)


def parse_space(text: str | bytes) -> SearchSpace:
    """Parse {"dims": [{"name", "lower", "upper"}, ...]}; unknown keys rejected."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except ValueError as e:
        raise EvolveError(f"space document: invalid JSON ({e})") from None
    if not isinstance(doc, dict) or set(doc) != {"dims"} or not isinstance(doc["dims"], list):
        raise EvolveError('space document: expected exactly {"dims": [...]}')
    dims = []
    for i, entry in enumerate(doc["dims"]):
        if not isinstance(entry, dict) or set(entry) != {"name", "lower", "upper"}:
            raise EvolveError(f"dims[{i}]: expected exactly {{name, lower, upper}}")
        name = entry["name"]
        if not isinstance(name, str):
            raise EvolveError(f"dims[{i}].name: expected a string")
        lo, hi = entry["lower"], entry["upper"]
        for label, v in (("lower", lo), ("upper", hi)):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise EvolveError(f"dims[{i}].{label}: expected a number")
        dims.append(Dim(name, float(lo), float(hi)))
    return SearchSpace(tuple(dims))


def _evaluate(
    cands: Sequence[Candidate],
    fitness: Evaluator,
    concurrency: int,
    log: EvolveLog,
    best: Candidate | None,
) -> None:
    """Fill in each candidate's fitness; abort with partial results on failure."""

    def run_one(c: Candidate) -> float:
        last: Exception | None = None
        for _ in range(_EVAL_TRIES):
            try:
                v = float(fitness(c.x, c.order))
            except Exception as e:  # noqa: BLE001 - evaluator is arbitrary user code
                last = e
                continue
            if not math.isfinite(v):
                last = EvaluationFailure(f"evaluator returned non-finite fitness {v!r}")
                continue
            return v
        raise EvaluationFailure(
            f"candidate {c.order}: evaluation failed after {_EVAL_TRIES} attempts ({last})"
        )

    try:
        if concurrency <= 1:
            for c in cands:
                c.fitness = run_one(c)
        else:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                for c, v in zip(cands, pool.map(run_one, cands)):
                    c.fitness = v
    except EvaluationFailure as e:
        raise EvolveAbort(str(e), log, best) from e


def _better(a: Candidate, b: Candidate | None) -> bool:
    if b is None:
        return True
    if a.fitness != b.fitness:
        return a.fitness > b.fitness
    return a.order < b.order


def evolve(
    space: SearchSpace,
    fitness: Evaluator,
    budget: int,
    seed: int,
    concurrency: int = 1,
) -> tuple[Candidate, EvolveLog]:
    """Maximize `fitness` over the box with at most `budget` evaluations.

    `fitness(x, index)` receives the candidate vector and its global
    evaluation index and returns a finite float (higher is better); it is
    retried up to three times per candidate before the whole run aborts
    with EvolveAbort carrying the partial log. Identical (space, seed,
    deterministic fitness) give identical results at any concurrency.
    """
    if not space.dims:
        raise EvolveError("search space has no dimensions")
    if budget < MU + LAMBDA:
        raise EvolveError(f"budget {budget} < {MU + LAMBDA} (one full generation)")
    if concurrency < 1:
        raise EvolveError(f"concurrency {concurrency} must be >= 1")

    rng = np.random.Generator(np.random.PCG64(seed))
    lo, hi = space.bounds()
    sigma = _SIGMA_INIT_FRACTION * (hi - lo)
    log = EvolveLog()
    best: Candidate | None = None

    parents = [Candidate(rng.uniform(lo, hi), order=i) for i in range(MU)]
    _evaluate(parents, fitness, concurrency, log, best)
    evals = MU
    for p in parents:
        if _better(p, best):
            best = p

    while evals + LAMBDA <= budget:
        offspring = []
        parent_of = []
        for j in range(LAMBDA):
            parent = parents[j % MU]
            x = np.clip(parent.x + sigma * rng.standard_normal(len(space.dims)), lo, hi)
            offspring.append(Candidate(x, order=evals + j))
            parent_of.append(parent)
        _evaluate(offspring, fitness, concurrency, log, best)
        evals += LAMBDA

        successes = sum(1 for c, p in zip(offspring, parent_of) if c.fitness > p.fitness)
        sigma = sigma * (_SIGMA_GROW if successes * 5 > LAMBDA else _SIGMA_SHRINK)

        pool = sorted(parents + offspring, key=lambda c: (-c.fitness, c.order))
        parents = pool[:MU]
        for c in offspring:
            if _better(c, best):
                best = c
        log.generations.append(
            GenerationStats(
                best_fitness=best.fitness,
                mean_fitness=sum(c.fitness for c in offspring) / LAMBDA,
                sigma=float(np.mean(sigma)),
            )
        )

    assert best is not None
    return best, log


def candidate_to_recipe(
    candidate: Candidate, template: MergeRecipe, space: SearchSpace
) -> MergeRecipe:
    """Substitute the candidate's values into the template's parameter slots."""
    params: dict[str, float] = {}
    weights: dict[int, float] = {}
    for dim, value in zip(space.dims, candidate.x):
        v = float(value)
        if dim.name.startswith("weight_"):
            idx = int(dim.name.split("_", 1)[1])
            if idx >= len(template.models):
                raise EvolveError(
                    f"dim {dim.name!r}: template has only {len(template.models)} models"
                )
            weights[idx] = v
        else:
            params[dim.name] = v
    p = template.params
    new_params = MergeParams(
        t=params.get("t", p.t),
        density=params.get("density", p.density),
        drop_prob=params.get("drop_prob", p.drop_prob),
        lam=params.get("lambda", p.lam),
        seed=p.seed,
    )
    models = tuple(
        replace(m, weight=weights.get(i, m.weight)) for i, m in enumerate(template.models)
    )
    recipe = replace(template, params=new_params, models=models)
    recipe.check()
    return recipe


def make_command_evaluator(
    command: str | Sequence[str],
    template: MergeRecipe,
    space: SearchSpace,
    candidates_dir: str,
    timeout: float | None = None,
) -> Evaluator:
    """Evaluator that shells out: recipe file in, fitness on stdout.

    Per evaluation: substitute the candidate into the template, point its
    out_path at candidates_dir/cand_<index>.safetensors, write the recipe
    to candidates_dir/cand_<index>.json, and run the command with the
    recipe path appended to its argv. The command must exit 0 and print a
    finite decimal as the last whitespace-delimited token of stdout.
    """
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    os.makedirs(candidates_dir, exist_ok=True)

    def evaluator(x: np.ndarray, index: int) -> float:
        tag = f"cand_{index:05d}"
        recipe = candidate_to_recipe(Candidate(x, order=index), template, space)
        recipe = replace(recipe, out_path=os.path.join(candidates_dir, f"{tag}.safetensors"))
        recipe_path = os.path.join(candidates_dir, f"{tag}.json")
        with open(recipe_path, "w", encoding="utf-8") as f:
            f.write(serialize_recipe(recipe))
        proc = subprocess.run(
            argv + [recipe_path], capture_output=True, text=True, timeout=timeout
        )
        if proc.returncode != 0:
            raise EvaluationFailure(
                f"fitness command exited {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        tokens = proc.stdout.split()
        if not tokens:
            raise EvaluationFailure("fitness command printed nothing on stdout")
        try:
            value = float(tokens[-1])
        except ValueError:
            raise EvaluationFailure(
                f"last stdout token {tokens[-1]!r} is not a decimal"
            ) from None
        if not math.isfinite(value):
            raise EvaluationFailure(f"fitness {value!r} is not finite")
        return value

    return evaluator


def log_to_csv(log: EvolveLog) -> str:
    """Generation log as CSV: generation, best_fitness, mean_fitness, sigma."""
    lines = ["generation,best_fitness,mean_fitness,sigma"]
    for i, g in enumerate(log.generations, start=1):
        lines.append(f"{i},{g.best_fitness:.10g},{g.mean_fitness:.10g},{g.sigma:.10g}")
    return "\n".join(lines) + "\n"
