#!/usr/bin/env python3
"""Hyperparameter search with the built-in evolution strategy.

Maximizes a toy fitness over an interpolation weight, prints the
per-generation log, and turns the winner back into a merge recipe.
"""

import json

import numpy as np

from mergeforge.evolve import Dim, SearchSpace, candidate_to_recipe, evolve
from mergeforge.recipes import parse_recipe, serialize_recipe


def fitness(x: np.ndarray, index: int) -> float:
    # pretend downstream score: peaks at t=0.3 with a secondary bump
    t = float(x[0])
    return -((t - 0.3) ** 2) + 0.05 * np.sin(12 * t)


def main() -> None:
    space = SearchSpace((Dim("t", 0.0, 1.0),))
    best, log = evolve(space, fitness, budget=200, seed=42)

    print("generation  best      mean      sigma")
    for i, gen in enumerate(log.generations):
        print(f"{i:10d}  {gen.best_fitness:+.5f}  {gen.mean_fitness:+.5f}  {gen.sigma:.4f}")
    print(f"\nbest t = {float(best.x[0]):.4f}  fitness = {best.fitness:+.5f}")

    # substitute the winner into a recipe template
    template = parse_recipe(json.dumps({
        "method": "slerp",
        "models": [{"path": "a.safetensors"}, {"path": "b.safetensors"}],
        "out_path": "merged.safetensors",
    }))
    print("\nwinning recipe:")
    print(serialize_recipe(candidate_to_recipe(best, template, space)))


if __name__ == "__main__":
    main()
