"""Merge methods: linear, SLERP, task arithmetic, TIES, and DARE-TIES.

All operations are pure, deterministic, per-tensor transforms on float32
arrays; tensors are independent units of work. Multi-model elementwise
reductions (weighted sums, sign-election sums, disjoint-merge sums) sum a
float64 stack sorted along the model axis, so results are invariant under
reordering the models (together with their weights) and independent of
scheduling.

Normative arithmetic, for reimplementation by independent oracles:

* task vector: tau = model - base, in float32
* linear: out = sum_i (w_i / sum(w)) * theta_i, weights normalized in
  float64, summed via the sorted-stack rule above, rounded once to float32
* slerp: per tensor, flatten; dot/norms in float64;
  omega = arccos(clamp(dot/(|a||b|), -1, 1)); coefficients
  sin((1-t)*omega)/sin(omega) and sin(t*omega)/sin(omega) in float64; the
  combination c1*a + c2*b runs in float32; falls back to (1-t)*a + t*b
  when sin(omega) < 1e-6 or either norm is zero
* trim: keep the k = ceil(density*n) largest |tau| entries (computed with
  a 1e-9 slack against binary-float fuzz), zero the rest; ties at the
  threshold keep the lower flat index
* sign election: sign of the float64 sum of the stacked deltas; exact
  zero elects 0
* disjoint merge: mean over deltas whose float32 sign equals the elected
  nonzero sign; 0 where the elected sign is 0 or nothing agrees
* dare: element i dropped per the stream in `mergeforge.rng`; survivors
  divided by float32(1 - drop_prob) in float32
* task-vector methods combine as out = base + float32(lambda) * merged,
  in float32

NaN or Inf anywhere in a merge input is a hard error before any output
is produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .rng import dare_drop_mask
from .tensorstore import Checkpoint, CheckpointReader, tensor_from_array, validate_compat

if TYPE_CHECKING:
    from .recipes import MergeRecipe

__all__ = [
    "DEFAULT_DENSITY",
    "DEFAULT_DROP_PROB",
    "DEFAULT_LAMBDA",
    "DEFAULT_T",
    "MergeError",
    "TaskVector",
    "SignMap",
    "task_vector",
    "linear_merge",
    "slerp_merge",
    "task_arithmetic_merge",
    "trim",
    "elect_sign",
    "disjoint_merge",
    "ties_merge",
    "dare",
    "dare_ties_merge",
    "apply_recipe",
    "merge_tensor",
]

DEFAULT_DENSITY = 0.5
DEFAULT_LAMBDA = 0.5
DEFAULT_T = 0.5
DEFAULT_DROP_PROB = 0.5

_SLERP_COLINEAR_EPS = 1e-6

CheckpointLike = Checkpoint | CheckpointReader


class MergeError(ValueError):
    """Merge precondition violation: arity, parameter range, compat, non-finite data."""


@dataclass
class TaskVector:
    """Checkpoint-shaped delta (model minus base), one float32 array per tensor."""

    deltas: dict[str, np.ndarray]
    source_id: str = ""

    @property
    def names(self) -> list[str]:
        return sorted(self.deltas)


@dataclass
class SignMap:
    """Elected per-element signs (-1, 0, +1), one int8 array per tensor."""

    signs: dict[str, np.ndarray] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# array-level primitives


def _sorted_sum(stack: np.ndarray) -> np.ndarray:
    """Permutation-invariant columnwise float64 sum of a (k, n) stack."""
    if stack.shape[0] == 1:
        return stack[0].astype(np.float64, copy=True)
    return np.sum(np.sort(stack, axis=0), axis=0)


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise MergeError(f"non-finite values in {what}")


def linear_combine(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    total = math.fsum(weights)
    stack = np.stack(
        [a.ravel().astype(np.float64) * (w / total) for a, w in zip(arrays, weights)]
    )
    return _sorted_sum(stack).astype(np.float32).reshape(arrays[0].shape)


def slerp_arrays(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    af = a.ravel().astype(np.float64)
    bf = b.ravel().astype(np.float64)
    na = float(np.sqrt(np.dot(af, af)))
    nb = float(np.sqrt(np.dot(bf, bf)))
    if na > 0.0 and nb > 0.0:
        cos_omega = min(1.0, max(-1.0, float(np.dot(af, bf)) / (na * nb)))
        omega = math.acos(cos_omega)
        sin_omega = math.sin(omega)
        if sin_omega >= _SLERP_COLINEAR_EPS:
            c1 = math.sin((1.0 - t) * omega) / sin_omega
            c2 = math.sin(t * omega) / sin_omega
            return np.float32(c1) * a + np.float32(c2) * b
    return np.float32(1.0 - t) * a + np.float32(t) * b


def trim_array(delta: np.ndarray, density: float) -> np.ndarray:
    flat = delta.ravel()
    n = flat.size
    if n == 0:
        return delta.copy()
    k = min(n, max(1, math.ceil(density * n - 1e-9)))
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(delta.shape)


def elect_sign_arrays(deltas: Sequence[np.ndarray]) -> np.ndarray:
    stack = np.stack([d.ravel().astype(np.float64) for d in deltas])
    return np.sign(_sorted_sum(stack)).astype(np.int8).reshape(deltas[0].shape)


def disjoint_merge_arrays(deltas: Sequence[np.ndarray], signs: np.ndarray) -> np.ndarray:
    elected = signs.ravel()
    agree = [
        (np.sign(d.ravel()) == elected) & (elected != 0) for d in deltas
    ]
    stack = np.stack(
        [np.where(m, d.ravel().astype(np.float64), 0.0) for d, m in zip(deltas, agree)]
    )
    num = _sorted_sum(stack)
    cnt = np.sum(agree, axis=0)
    out = np.divide(num, cnt, out=np.zeros_like(num), where=cnt > 0)
    return out.astype(np.float32).reshape(deltas[0].shape)


def dare_array(
    delta: np.ndarray, drop_prob: float, seed: int, tensor_name: str, model_index: int
) -> np.ndarray:
    mask = dare_drop_mask(delta.size, drop_prob, seed, tensor_name, model_index)
    kept = delta.astype(np.float32) / np.float32(1.0 - drop_prob)
    return np.where(mask.reshape(delta.shape), np.float32(0.0), kept)


# ---------------------------------------------------------------------------
# parameter and input validation


def _check_range(value: float, lo: float, hi: float, name: str, *, lo_open=False, hi_open=False) -> None:
    bad = (
        not math.isfinite(value)
        or (value <= lo if lo_open else value < lo)
        or (value >= hi if hi_open else value > hi)
    )
    if bad:
        lo_b = "(" if lo_open else "["
        hi_b = ")" if hi_open else "]"
        raise MergeError(f"{name}={value!r} outside {lo_b}{lo}, {hi}{hi_b}")


def _check_compat(ckpts: Sequence[CheckpointLike], what: str) -> None:
    report = validate_compat(ckpts)
    if not report.ok:
        listed = ", ".join(f"{n}: {r}" for n, r in report.mismatches[:8])
        raise MergeError(f"{what} are not compatible ({listed})")


def _f32(ck: CheckpointLike, name: str, what: str) -> np.ndarray:
    arr = ck.get_array(name)
    _require_finite(arr, f"{what} tensor {name!r}")
    return arr


def _check_tv_shapes(tvs: Sequence[TaskVector], like: Mapping[str, tuple[int, ...]] | None = None) -> None:
    if not tvs:
        raise MergeError("at least one task vector required")
    shapes = {n: d.shape for n, d in tvs[0].deltas.items()}
    if like is not None and shapes != dict(like):
        raise MergeError("task vectors are not shaped like the base checkpoint")
    for tv in tvs[1:]:
        if {n: d.shape for n, d in tv.deltas.items()} != shapes:
            raise MergeError("task vectors disagree on names or shapes")


# ---------------------------------------------------------------------------
# checkpoint-level operations


def task_vector(base: CheckpointLike, model: CheckpointLike, source_id: str = "") -> TaskVector:
    """Elementwise model - base, in float32."""
    _check_compat([base, model], "base and model")
    deltas = {
        name: _f32(model, name, "model") - _f32(base, name, "base") for name in base.names
    }
    return TaskVector(deltas, source_id)


def _mirror(arrays: dict[str, np.ndarray], like: CheckpointLike, metadata=None) -> Checkpoint:
    dtypes = {name: like.dtype(name) for name in like.names}
    return Checkpoint.from_arrays(arrays, dtypes, metadata)


def linear_merge(models: Sequence[CheckpointLike], weights: Sequence[float]) -> Checkpoint:
    """Weighted elementwise average; weights are normalized to sum to 1."""
    if len(models) < 2:
        raise MergeError("linear merge needs at least 2 models")
    if len(weights) != len(models):
        raise MergeError(f"{len(weights)} weights for {len(models)} models")
    if any((not math.isfinite(w)) or w < 0 for w in weights):
        raise MergeError("weights must be finite and non-negative")
    if math.fsum(weights) <= 0:
        raise MergeError("weights must not all be zero")
    _check_compat(models, "models")
    out = {
        name: linear_combine([_f32(m, name, f"model {i}") for i, m in enumerate(models)], weights)
        for name in models[0].names
    }
    return _mirror(out, models[0])


def slerp_merge(a: CheckpointLike, b: CheckpointLike, t: float) -> Checkpoint:
    """Spherical interpolation between two checkpoints, per flattened tensor."""
    _check_range(t, 0.0, 1.0, "t")
    _check_compat([a, b], "models")
    out = {
        name: slerp_arrays(_f32(a, name, "model 0"), _f32(b, name, "model 1"), t)
        for name in a.names
    }
    return _mirror(out, a)


def _ta_combine(base_arr: np.ndarray, taus: Sequence[np.ndarray], lam: float) -> np.ndarray:
    stack = np.stack([t.ravel().astype(np.float64) for t in taus])
    merged = _sorted_sum(stack).astype(np.float32).reshape(base_arr.shape)
    return base_arr + np.float32(lam) * merged


def task_arithmetic_merge(
    base: CheckpointLike, tvs: Sequence[TaskVector], lam: float
) -> Checkpoint:
    """base + lambda * sum of task vectors."""
    if lam < 0 or not math.isfinite(lam):
        raise MergeError(f"lambda={lam!r} must be a finite non-negative real")
    _check_tv_shapes(tvs, {name: base.shape(name) for name in base.names})
    out = {
        name: _ta_combine(_f32(base, name, "base"), [tv.deltas[name] for tv in tvs], lam)
        for name in base.names
    }
    return _mirror(out, base)


def trim(tv: TaskVector, density: float) -> TaskVector:
    """Keep the ceil(density * n) largest-magnitude entries per tensor."""
    _check_range(density, 0.0, 1.0, "density", lo_open=True)
    return TaskVector({n: trim_array(d, density) for n, d in tv.deltas.items()}, tv.source_id)


def elect_sign(tvs: Sequence[TaskVector]) -> SignMap:
    """Per element, the sign of the summed deltas (exact zero elects 0)."""
    _check_tv_shapes(tvs)
    return SignMap(
        {name: elect_sign_arrays([tv.deltas[name] for tv in tvs]) for name in tvs[0].names}
    )


def disjoint_merge(tvs: Sequence[TaskVector], signs: SignMap) -> TaskVector:
    """Mean of the deltas agreeing with the elected sign; 0 elsewhere."""
    _check_tv_shapes(tvs)
    merged = {
        name: disjoint_merge_arrays([tv.deltas[name] for tv in tvs], signs.signs[name])
        for name in tvs[0].names
    }
    return TaskVector(merged, "disjoint-merge")


def _ties_combine(
    base_arr: np.ndarray, model_arrs: Sequence[np.ndarray], density: float, lam: float
) -> np.ndarray:
    trimmed = [trim_array(m - base_arr, density) for m in model_arrs]
    signs = elect_sign_arrays(trimmed)
    return base_arr + np.float32(lam) * disjoint_merge_arrays(trimmed, signs)


def ties_merge(
    base: CheckpointLike, models: Sequence[CheckpointLike], density: float, lam: float
) -> Checkpoint:
    """Trim task vectors, elect signs over the trimmed vectors, disjoint-merge, scale, add."""
    _check_range(density, 0.0, 1.0, "density", lo_open=True)
    if lam < 0 or not math.isfinite(lam):
        raise MergeError(f"lambda={lam!r} must be a finite non-negative real")
    _check_compat([base, *models], "base and models")
    out = {
        name: _ties_combine(
            _f32(base, name, "base"),
            [_f32(m, name, f"model {i}") for i, m in enumerate(models)],
            density,
            lam,
        )
        for name in base.names
    }
    return _mirror(out, base)


def dare(tv: TaskVector, drop_prob: float, seed: int, model_index: int = 0) -> TaskVector:
    """Drop entries with probability drop_prob, rescale survivors by 1/(1-p).

    The drop mask comes from the per-(tensor, model) stream documented in
    `mergeforge.rng`; the standalone form uses model_index 0 unless told
    otherwise (dare_ties_merge passes each model's position in its list).
    """
    _check_range(drop_prob, 0.0, 1.0, "drop_prob", hi_open=True)
    return TaskVector(
        {n: dare_array(d, drop_prob, seed, n, model_index) for n, d in tv.deltas.items()},
        tv.source_id,
    )


def _dare_ties_combine(
    name: str,
    base_arr: np.ndarray,
    model_arrs: Sequence[np.ndarray],
    drop_prob: float,
    lam: float,
    seed: int,
) -> np.ndarray:
    dared = [
        dare_array(m - base_arr, drop_prob, seed, name, i) for i, m in enumerate(model_arrs)
    ]
    signs = elect_sign_arrays(dared)
    return base_arr + np.float32(lam) * disjoint_merge_arrays(dared, signs)


def dare_ties_merge(
    base: CheckpointLike,
    models: Sequence[CheckpointLike],
    drop_prob: float,
    lam: float,
    seed: int,
) -> Checkpoint:
    """DARE sparsification (replacing the magnitude trim) followed by TIES merging."""
    _check_range(drop_prob, 0.0, 1.0, "drop_prob", hi_open=True)
    if lam < 0 or not math.isfinite(lam):
        raise MergeError(f"lambda={lam!r} must be a finite non-negative real")
    _check_compat([base, *models], "base and models")
    out = {
        name: _dare_ties_combine(
            name,
            _f32(base, name, "base"),
            [_f32(m, name, f"model {i}") for i, m in enumerate(models)],
            drop_prob,
            lam,
            seed,
        )
        for name in base.names
    }
    return _mirror(out, base)


# ---------------------------------------------------------------------------
# recipe dispatch


def merge_tensor(
    method: str,
    name: str,
    base_arr: np.ndarray | None,
    model_arrs: Sequence[np.ndarray],
    *,
    weights: Sequence[float] | None = None,
    t: float = DEFAULT_T,
    density: float = DEFAULT_DENSITY,
    drop_prob: float = DEFAULT_DROP_PROB,
    lam: float = DEFAULT_LAMBDA,
    seed: int = 0,
) -> np.ndarray:
    """Single-tensor merge dispatch shared by the in-memory and streaming paths.

    Inputs must be float32 arrays already checked finite by the caller.
    """
    if method == "linear":
        assert weights is not None
        return linear_combine(model_arrs, weights)
    if method == "slerp":
        return slerp_arrays(model_arrs[0], model_arrs[1], t)
    assert base_arr is not None
    if method == "task_arithmetic":
        return _ta_combine(base_arr, [m - base_arr for m in model_arrs], lam)
    if method == "ties":
        return _ties_combine(base_arr, model_arrs, density, lam)
    if method == "dare_ties":
        return _dare_ties_combine(name, base_arr, model_arrs, drop_prob, lam, seed)
    raise MergeError(f"unknown merge method {method!r}")


def recipe_metadata(recipe: "MergeRecipe") -> dict[str, str]:
    """Merge metadata embedded in the output checkpoint: method, parameters, seed."""
    import json

    return {
        "mergeforge.method": recipe.method,
        "mergeforge.params": json.dumps(recipe.params_dict(), sort_keys=True),
        "mergeforge.seed": str(recipe.params.seed),
    }


def resolve_recipe_inputs(
    recipe: "MergeRecipe", ckpts: Mapping[str, CheckpointLike]
) -> tuple[CheckpointLike | None, list[CheckpointLike]]:
    """Look up the recipe's base and model checkpoints and check compatibility."""
    recipe.check()
    try:
        models = [ckpts[m.path] for m in recipe.models]
    except KeyError as e:
        raise MergeError(f"unresolved model path {e.args[0]!r}") from None
    base = None
    if recipe.base_model is not None:
        if recipe.base_model not in ckpts:
            raise MergeError(f"unresolved base model path {recipe.base_model!r}")
        base = ckpts[recipe.base_model]
    _check_compat(([base] if base is not None else []) + models, "recipe inputs")
    return base, models


def apply_recipe(recipe: "MergeRecipe", ckpts: Mapping[str, CheckpointLike]) -> Checkpoint:
    """Run a recipe against already-resolved checkpoints, in memory.

    `ckpts` maps every path named by the recipe to an open checkpoint.
    Output dtype per tensor follows the base model (the first model for
    base-free methods) unless the recipe forces one. The result carries
    method/parameter/seed metadata; use `mergeforge.driver.run_recipe`
    for the streaming file-to-file path.
    """
    base, models = resolve_recipe_inputs(recipe, ckpts)
    p = recipe.params
    mirror_like = base if base is not None else models[0]
    out = Checkpoint(metadata=recipe_metadata(recipe))
    for name in mirror_like.names:
        base_arr = None if base is None else _f32(base, name, "base")
        model_arrs = [_f32(m, name, f"model {i}") for i, m in enumerate(models)]
        merged = merge_tensor(
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
        dtype = recipe.output_dtype or mirror_like.dtype(name)
        out.add(name, tensor_from_array(merged, dtype))
    return out
