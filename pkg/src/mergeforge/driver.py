"""File-to-file merge execution: stream tensors, bound memory, write in order.

Tensors are independent units of work. Each job reads one tensor from
every input file (positional reads, safe across threads), merges, and
converts to the output dtype; the main thread writes results strictly in
canonical name order, so output bytes never depend on the thread count.
At most `threads` jobs are in flight at once.

Peak memory is tracked as payload bytes: every resident float32 working
copy of an input tensor (4 bytes per element), plus merged outputs until
they are written. Kernel scratch (argsort indices, masks) is small
multiples of a single tensor and excluded by definition. For a merge of
k inputs run single-threaded the meter's high-water mark is
(k + 1) x the largest tensor's float32 size.
"""

from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .merging import MergeError, merge_tensor, recipe_metadata, resolve_recipe_inputs
from .recipes import MergeRecipe
from .tensorstore import CheckpointReader, CheckpointWriter, Tensor, tensor_from_array

__all__ = ["PayloadMeter", "run_recipe"]


class PayloadMeter:
    """Thread-safe byte counter with a high-water mark."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def add(self, nbytes: int) -> None:
        with self._lock:
            self.current += nbytes
            if self.current > self.peak:
                self.peak = self.current

    def sub(self, nbytes: int) -> None:
        with self._lock:
            self.current -= nbytes


def _merge_one(
    recipe: MergeRecipe,
    name: str,
    base,
    models,
    out_dtype: str,
    meter: PayloadMeter,
) -> Tensor:
    sources = ([base] if base is not None else []) + list(models)
    f32_bytes = 4 * _numel(sources[0].shape(name))
    meter.add(len(sources) * f32_bytes)
    try:
        arrs = []
        for i, src in enumerate(sources):
            arr = src.get_array(name)
            if not np.isfinite(arr).all():
                role = "base" if (base is not None and i == 0) else f"model {i - (base is not None)}"
                raise MergeError(f"non-finite values in {role} tensor {name!r}")
            arrs.append(arr)
        base_arr = arrs[0] if base is not None else None
        model_arrs = arrs[1:] if base is not None else arrs
        p = recipe.params
        out = merge_tensor(
            recipe.method,
            name,
            base_arr,
            model_arrs,
            weights=recipe.weights(),
            t=p.t,
            density=p.density,
            drop_prob=p.drop_prob,
            lam=p.lam,
            seed=p.seed,
        )
        meter.add(f32_bytes)
    finally:
        meter.sub(len(sources) * f32_bytes)
    del arrs, base_arr, model_arrs
    tensor = tensor_from_array(out, out_dtype)
    meter.add(tensor.nbytes)
    del out
    meter.sub(f32_bytes)
    return tensor


def run_recipe(recipe: MergeRecipe, threads: int = 1) -> dict:
    """Execute a recipe from checkpoint files to recipe.out_path.

    Returns a machine-readable summary: method, params, seed, tensor
    count, bytes written, peak payload bytes, and wall time.
    """
    if threads < 1:
        raise ValueError(f"threads={threads} must be >= 1")
    start = time.monotonic()
    opened: dict[str, CheckpointReader] = {}
    try:
        for path in dict.fromkeys(recipe.input_paths()):
            opened[path] = CheckpointReader(path)
        base, models = resolve_recipe_inputs(recipe, opened)
        mirror = base if base is not None else models[0]
        names = mirror.names
        out_dtypes = {
            name: recipe.output_dtype or mirror.dtype(name) for name in names
        }
        specs = [(name, out_dtypes[name], mirror.shape(name)) for name in names]
        meter = PayloadMeter()
        largest = max((4 * _numel(mirror.shape(n)) for n in names), default=0)

        def job(name: str) -> Tensor:
            return _merge_one(recipe, name, base, models, out_dtypes[name], meter)

        bytes_written = 0
        with CheckpointWriter(recipe.out_path, specs, recipe_metadata(recipe)) as writer:
            try:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    window: deque[tuple[str, object]] = deque()
                    it = iter(names)
                    for name in itertools.islice(it, threads):
                        window.append((name, pool.submit(job, name)))
                    while window:
                        name, fut = window.popleft()
                        tensor = fut.result()
                        writer.put(name, tensor)
                        bytes_written += tensor.nbytes
                        meter.sub(tensor.nbytes)
                        nxt = next(it, None)
                        if nxt is not None:
                            window.append((nxt, pool.submit(job, nxt)))
            except BaseException:
                writer.abort()
                raise
    finally:
        for reader in opened.values():
            reader.close()
    return {
        "out_path": recipe.out_path,
        "method": recipe.method,
        "params": recipe.params_dict(),
        "seed": recipe.params.seed,
        "tensors": len(names),
        "bytes_written": bytes_written,
        "peak_payload_bytes": meter.peak,
        "largest_tensor_bytes": largest,
        "threads": threads,
        "wall_time_s": round(time.monotonic() - start, 6),
    }


def _numel(shape: tuple[int, ...]) -> int:
    n = 1
    for d in shape:
        n *= d
    return n
