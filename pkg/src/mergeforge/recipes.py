"""Declarative merge recipes: a JSON document that fully determines a merge.

Schema (UTF-8 JSON, one object, at most 1 MiB):

    {
      "method": "linear" | "slerp" | "task_arithmetic" | "ties" | "dare_ties",
      "base_model": "path",              // required by task-vector methods,
                                         // rejected for linear and slerp
      "models": [{"path": "...", "weight": 1.0}, ...],
      "params": {"t": 0.5, "density": 0.5, "drop_prob": 0.5,
                 "lambda": 0.5, "seed": 0},
      "out_path": "path",
      "output_dtype": "F32" | "BF16"     // optional; default mirrors inputs
    }

Unknown keys are rejected at every level. `weight` is only meaningful for
linear merges (default 1.0 per model) and rejected elsewhere. Omitted
params take the method defaults; omitted seed is 0. Parsing never raises
anything but RecipeError, and `parse_recipe(serialize_recipe(r)) == r`
for every valid recipe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from .merging import (
    DEFAULT_DENSITY,
    DEFAULT_DROP_PROB,
    DEFAULT_LAMBDA,
    DEFAULT_T,
    CheckpointLike,
    MergeError,
)
from .tensorstore import DTYPE_WIDTHS, validate_compat

__all__ = [
    "MAX_RECIPE_BYTES",
    "METHODS",
    "RecipeError",
    "ModelRef",
    "MergeParams",
    "MergeRecipe",
    "parse_recipe",
    "serialize_recipe",
    "load_recipe",
    "validate_recipe",
]

MAX_RECIPE_BYTES = 1 << 20

METHODS = ("linear", "slerp", "task_arithmetic", "ties", "dare_ties")
_BASE_METHODS = ("task_arithmetic", "ties", "dare_ties")

_MAX_SEED = (1 << 64) - 1


class RecipeError(ValueError):
    """Recipe syntax or schema violation; the message names the offending field."""


@dataclass(frozen=True)
class ModelRef:
    """One merge input; weight is None unless the document gave one."""

    path: str
    weight: float | None = None


@dataclass(frozen=True)
class MergeParams:
    """Method hyperparameters, always fully populated after parsing."""

    t: float = DEFAULT_T
    density: float = DEFAULT_DENSITY
    drop_prob: float = DEFAULT_DROP_PROB
    lam: float = DEFAULT_LAMBDA
    seed: int = 0


@dataclass(frozen=True)
class MergeRecipe:
    method: str
    models: tuple[ModelRef, ...]
    out_path: str
    base_model: str | None = None
    params: MergeParams = field(default_factory=MergeParams)
    output_dtype: str | None = None

    def weights(self) -> list[float]:
        return [m.weight if m.weight is not None else 1.0 for m in self.models]

    def input_paths(self) -> list[str]:
        """Base (if any) followed by the model paths, recipe order."""
        head = [self.base_model] if self.base_model is not None else []
        return head + [m.path for m in self.models]

    def params_dict(self) -> dict:
        """Parameters as plain JSON data, weights included for linear merges."""
        d = {
            "t": self.params.t,
            "density": self.params.density,
            "drop_prob": self.params.drop_prob,
            "lambda": self.params.lam,
            "seed": self.params.seed,
        }
        if self.method == "linear":
            d["weights"] = self.weights()
        return d

    def check(self) -> None:
        """Re-assert every schema invariant; raises MergeError if violated."""
        try:
            _check_recipe(self)
        except RecipeError as e:
            raise MergeError(str(e)) from None


def _fail(path: str, msg: str) -> None:
    raise RecipeError(f"{path}: {msg}")


def _no_dup_pairs(pairs):
    obj = {}
    for k, v in pairs:
        if k in obj:
            raise ValueError(f"duplicate key {k!r}")
        obj[k] = v
    return obj


def _want_str(value, path: str) -> str:
    if not isinstance(value, str):
        _fail(path, f"expected a string, got {type(value).__name__}")
    return value


def _want_real(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(path, f"expected a number, got {type(value).__name__}")
    v = float(value)
    if not math.isfinite(v):
        _fail(path, "must be finite")
    return v


def _want_range(value, lo, hi, path, *, lo_open=False, hi_open=False) -> float:
    v = _want_real(value, path)
    if (v <= lo if lo_open else v < lo) or (v >= hi if hi_open else v > hi):
        _fail(path, f"{v!r} outside {'(' if lo_open else '['}{lo}, {hi}{')' if hi_open else ']'}")
    return v


def _reject_unknown(obj: dict, allowed: Sequence[str], where: str) -> None:
    for key in obj:
        if key not in allowed:
            _fail(f"{where}{key}" if where else key, "unknown key")


def _parse_params(obj) -> MergeParams:
    if not isinstance(obj, dict):
        _fail("params", f"expected an object, got {type(obj).__name__}")
    _reject_unknown(obj, ("t", "density", "drop_prob", "lambda", "seed"), "params.")
    t = _want_range(obj.get("t", DEFAULT_T), 0.0, 1.0, "params.t")
    density = _want_range(
        obj.get("density", DEFAULT_DENSITY), 0.0, 1.0, "params.density", lo_open=True
    )
    drop_prob = _want_range(
        obj.get("drop_prob", DEFAULT_DROP_PROB), 0.0, 1.0, "params.drop_prob", hi_open=True
    )
    lam = _want_real(obj.get("lambda", DEFAULT_LAMBDA), "params.lambda")
    if lam < 0:
        _fail("params.lambda", f"{lam!r} must be non-negative")
    seed = obj.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        _fail("params.seed", f"expected an integer, got {type(seed).__name__}")
    if not 0 <= seed <= _MAX_SEED:
        _fail("params.seed", f"{seed!r} outside [0, 2**64)")
    return MergeParams(t=t, density=density, drop_prob=drop_prob, lam=lam, seed=seed)


def _parse_model(entry, method: str, idx: int) -> ModelRef:
    where = f"models[{idx}]"
    if not isinstance(entry, dict):
        _fail(where, f"expected an object, got {type(entry).__name__}")
    _reject_unknown(entry, ("path", "weight"), f"{where}.")
    if "path" not in entry:
        _fail(f"{where}.path", "missing required key")
    path = _want_str(entry["path"], f"{where}.path")
    if not path:
        _fail(f"{where}.path", "must be non-empty")
    weight = None
    if "weight" in entry:
        if method != "linear":
            _fail(f"{where}.weight", f"weights only apply to linear merges, not {method!r}")
        weight = _want_real(entry["weight"], f"{where}.weight")
        if weight < 0:
            _fail(f"{where}.weight", f"{weight!r} must be non-negative")
    return ModelRef(path, weight)


def _check_recipe(r: MergeRecipe) -> None:
    if r.method not in METHODS:
        _fail("method", f"unknown method {r.method!r}; expected one of {', '.join(METHODS)}")
    if r.method == "slerp" and len(r.models) != 2:
        _fail("models", f"slerp needs exactly 2 models, got {len(r.models)}")
    if r.method == "linear" and len(r.models) < 2:
        _fail("models", f"linear needs at least 2 models, got {len(r.models)}")
    if len(r.models) < 1:
        _fail("models", "at least one model required")
    if r.method in _BASE_METHODS and r.base_model is None:
        _fail("base_model", f"required by method {r.method!r}")
    if r.method not in _BASE_METHODS and r.base_model is not None:
        _fail("base_model", f"not accepted by method {r.method!r}")
    if r.method == "linear" and math.fsum(r.weights()) <= 0:
        _fail("models", "linear weights must not all be zero")
    if r.method != "linear" and any(m.weight is not None for m in r.models):
        _fail("models", f"weights only apply to linear merges, not {r.method!r}")
    if any((not math.isfinite(w)) or w < 0 for w in r.weights()):
        _fail("models", "weights must be finite and non-negative")
    if r.output_dtype is not None and r.output_dtype not in DTYPE_WIDTHS:
        _fail("output_dtype", f"unknown dtype {r.output_dtype!r}; expected F32 or BF16")
    if not r.out_path:
        _fail("out_path", "must be non-empty")
    _want_range(r.params.t, 0.0, 1.0, "params.t")
    _want_range(r.params.density, 0.0, 1.0, "params.density", lo_open=True)
    _want_range(r.params.drop_prob, 0.0, 1.0, "params.drop_prob", hi_open=True)
    if _want_real(r.params.lam, "params.lambda") < 0:
        _fail("params.lambda", f"{r.params.lam!r} must be non-negative")
    seed = r.params.seed
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= _MAX_SEED:
        _fail("params.seed", f"{seed!r} must be an integer in [0, 2**64)")


def parse_recipe(text: str | bytes) -> MergeRecipe:
    """Parse and fully validate one recipe document."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise RecipeError(f"document: not valid UTF-8 ({e})") from None
    if len(text.encode("utf-8")) > MAX_RECIPE_BYTES:
        raise RecipeError(f"document: exceeds {MAX_RECIPE_BYTES} bytes")
    try:
        doc = json.loads(text, object_pairs_hook=_no_dup_pairs)
    except ValueError as e:
        raise RecipeError(f"document: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise RecipeError(f"document: expected a JSON object, got {type(doc).__name__}")
    _reject_unknown(
        doc, ("method", "base_model", "models", "params", "out_path", "output_dtype"), ""
    )
    for key in ("method", "models", "out_path"):
        if key not in doc:
            _fail(key, "missing required key")
    method = _want_str(doc["method"], "method")
    if method not in METHODS:
        _fail("method", f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if not isinstance(doc["models"], list):
        _fail("models", f"expected an array, got {type(doc['models']).__name__}")
    models = tuple(_parse_model(e, method, i) for i, e in enumerate(doc["models"]))
    base_model = None
    if "base_model" in doc:
        base_model = _want_str(doc["base_model"], "base_model")
        if not base_model:
            _fail("base_model", "must be non-empty")
    params = _parse_params(doc.get("params", {}))
    out_path = _want_str(doc["out_path"], "out_path")
    output_dtype = None
    if "output_dtype" in doc:
        output_dtype = _want_str(doc["output_dtype"], "output_dtype")
    recipe = MergeRecipe(
        method=method,
        models=models,
        out_path=out_path,
        base_model=base_model,
        params=params,
        output_dtype=output_dtype,
    )
    _check_recipe(recipe)
    return recipe


def serialize_recipe(recipe: MergeRecipe) -> str:
    """Canonical document for a recipe: fixed key order, 2-space indent."""
    doc: dict = {"method": recipe.method}
    if recipe.base_model is not None:
        doc["base_model"] = recipe.base_model
    doc["models"] = [
        {"path": m.path} if m.weight is None else {"path": m.path, "weight": m.weight}
        for m in recipe.models
    ]
    doc["params"] = {
        "t": recipe.params.t,
        "density": recipe.params.density,
        "drop_prob": recipe.params.drop_prob,
        "lambda": recipe.params.lam,
        "seed": recipe.params.seed,
    }
    doc["out_path"] = recipe.out_path
    if recipe.output_dtype is not None:
        doc["output_dtype"] = recipe.output_dtype
    return json.dumps(doc, ensure_ascii=False, indent=2) + "\n"


def load_recipe(path: str) -> MergeRecipe:
    """Read and parse a recipe file; size-capped before reading fully."""
    import os

    try:
        if os.path.getsize(path) > MAX_RECIPE_BYTES:
            raise RecipeError(f"document: exceeds {MAX_RECIPE_BYTES} bytes")
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise RecipeError(f"document: cannot read {path!r} ({e})") from None
    return parse_recipe(raw)


def validate_recipe(
    recipe: MergeRecipe, resolver: Callable[[str], CheckpointLike]
) -> list[str]:
    """Check that every referenced checkpoint opens and that all are compatible.

    Returns diagnostics as data (empty means valid); never raises for a
    bad checkpoint. `resolver` maps a recipe path to an open checkpoint
    and may raise OSError or CheckpointFormatError.
    """
    diagnostics: list[str] = []
    opened: dict[str, CheckpointLike] = {}
    for path in dict.fromkeys(recipe.input_paths()):
        try:
            opened[path] = resolver(path)
        except Exception as e:
            diagnostics.append(f"{path}: {e}")
    if diagnostics:
        return diagnostics
    report = validate_compat([opened[p] for p in dict.fromkeys(recipe.input_paths())])
    diagnostics.extend(f"compat: {name}: {reason}" for name, reason in report.mismatches)
    return diagnostics


def with_out_path(recipe: MergeRecipe, out_path: str) -> MergeRecipe:
    return replace(recipe, out_path=out_path)
