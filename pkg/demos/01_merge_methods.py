#!/usr/bin/env python3
"""Tour of the merge methods on three tiny checkpoints.

Builds a base model and two fine-tunes in memory, runs every merge
method, and finishes with a recipe-driven file-to-file merge.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from mergeforge import (
    Checkpoint,
    dare_ties_merge,
    linear_merge,
    slerp_merge,
    task_arithmetic_merge,
    task_vector,
    ties_merge,
    write_checkpoint,
)
from mergeforge.driver import run_recipe
from mergeforge.recipes import parse_recipe


def show(title: str, ckpt: Checkpoint) -> None:
    print(f"\n{title}")
    for name in ckpt.names:
        print(f"  {name}: {np.array2string(ckpt.get_array(name), precision=4)}")


def main() -> None:
    rng = np.random.default_rng(7)
    shapes = {"attn.w": (6,), "mlp.w": (4,)}
    base = Checkpoint.from_arrays(
        {n: rng.standard_normal(s).astype(np.float32) for n, s in shapes.items()}
    )
    # fine-tunes: the base plus a sparse-ish task-specific delta
    tuned = []
    for _ in range(2):
        arrays = {}
        for name in base.names:
            delta = (rng.standard_normal(shapes[name]) * 0.2).astype(np.float32)
            delta[np.abs(delta) < 0.1] = 0.0
            arrays[name] = base.get_array(name) + delta
        tuned.append(Checkpoint.from_arrays(arrays))

    show("base", base)
    show("model A", tuned[0])
    show("model B", tuned[1])

    # linear: weighted average of whole checkpoints
    show("linear, weights 2:1", linear_merge(tuned, [2.0, 1.0]))

    # slerp: interpolate along the arc between the two weight vectors
    show("slerp, t=0.25", slerp_merge(tuned[0], tuned[1], 0.25))

    # task arithmetic: base + lambda * sum of deltas
    tvs = [task_vector(base, m) for m in tuned]
    show("task arithmetic, lambda=0.8", task_arithmetic_merge(base, tvs, 0.8))

    # ties: trim small delta entries, elect a sign per element, average
    # only the contributions that agree with it
    show("ties, density=0.5", ties_merge(base, tuned, density=0.5, lam=1.0))

    # dare-ties: randomly drop delta entries (seeded), rescale survivors
    # to keep the expected value, then merge by sign agreement
    show("dare-ties, p=0.5, seed=3", dare_ties_merge(base, tuned, 0.5, 1.0, seed=3))

    # the same thing as a declarative recipe, streamed file to file
    with tempfile.TemporaryDirectory() as tmp:
        tmp_path = Path(tmp)
        write_checkpoint(base, tmp_path / "base.safetensors")
        write_checkpoint(tuned[0], tmp_path / "a.safetensors")
        write_checkpoint(tuned[1], tmp_path / "b.safetensors")
        recipe = parse_recipe(json.dumps({
            "method": "ties",
            "base_model": str(tmp_path / "base.safetensors"),
            "models": [{"path": str(tmp_path / "a.safetensors")},
                       {"path": str(tmp_path / "b.safetensors")}],
            "params": {"density": 0.5, "lambda": 1.0},
            "out_path": str(tmp_path / "merged.safetensors"),
        }))
        summary = run_recipe(recipe)
        print("\nrecipe summary:")
        print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
