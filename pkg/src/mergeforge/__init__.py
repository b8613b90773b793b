"""mergeforge: checkpoint merging, merge-parameter search, and judged evaluation.

The library has four layers:

* `tensorstore` reads and writes the binary checkpoint format (F32/BF16
  tensors with a JSON header) with lazy per-tensor access.
* `merging` implements the merge methods (linear, SLERP, task
  arithmetic, TIES, DARE-TIES) as deterministic per-tensor transforms;
  `recipes` parses the JSON documents that configure them and `driver`
  streams a recipe file-to-file under a memory bound.
* `evolve` searches merge hyperparameters with a small evolution
  strategy against a pluggable fitness command.
* `vocab`, `harness`, and `reporting` build rare-term evaluation sets,
  run definition generation and LLM-as-judge scoring over chat
  endpoints, and render score statistics.

The `mergeforge` command exposes the pipeline as subcommands.
"""

from .driver import PayloadMeter, run_recipe

# The search entry point stays at mergeforge.evolve.evolve so the package
# attribute `mergeforge.evolve` is always the submodule, never shadowed.
from .evolve import (
    Candidate,
    Dim,
    EvolveAbort,
    EvolveError,
    EvolveLog,
    SearchSpace,
    candidate_to_recipe,
    make_command_evaluator,
    parse_space,
)
from .harness import (
    DefinitionRecord,
    EndpointConfig,
    EndpointError,
    HarnessError,
    ScoreRecord,
    chat,
    generate_definitions,
    judge_definitions,
    parse_score,
    read_definitions_jsonl,
    read_scores_jsonl,
    write_jsonl,
)
from .merging import (
    MergeError,
    SignMap,
    TaskVector,
    apply_recipe,
    dare,
    dare_ties_merge,
    disjoint_merge,
    elect_sign,
    linear_merge,
    slerp_merge,
    task_arithmetic_merge,
    task_vector,
    ties_merge,
    trim,
)
from .recipes import (
    MergeParams,
    MergeRecipe,
    ModelRef,
    RecipeError,
    load_recipe,
    parse_recipe,
    serialize_recipe,
    validate_recipe,
)
from .reporting import (
    ReportError,
    ScoreStats,
    compute_stats,
    emit_histogram,
    histogram_csv,
    report_table,
    stats_csv,
)
from .tensorstore import (
    Checkpoint,
    CheckpointFormatError,
    CheckpointReader,
    CheckpointWriter,
    CompatReport,
    Tensor,
    load_checkpoint,
    read_checkpoint,
    tensor_from_array,
    validate_compat,
    write_checkpoint,
)
from .vocab import (
    FreqMap,
    TermEntry,
    VocabError,
    attach_translations,
    count_frequencies,
    curate,
    read_terms_csv,
    write_terms_csv,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # tensorstore
    "Tensor",
    "Checkpoint",
    "CheckpointReader",
    "CheckpointWriter",
    "CheckpointFormatError",
    "CompatReport",
    "read_checkpoint",
    "load_checkpoint",
    "write_checkpoint",
    "tensor_from_array",
    "validate_compat",
    # merging
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
    # recipes
    "MergeRecipe",
    "MergeParams",
    "ModelRef",
    "RecipeError",
    "parse_recipe",
    "serialize_recipe",
    "load_recipe",
    "validate_recipe",
    # driver
    "run_recipe",
    "PayloadMeter",
    # evolve
    "Dim",
    "SearchSpace",
    "Candidate",
    "EvolveLog",
    "EvolveError",
    "EvolveAbort",
    "parse_space",
    "candidate_to_recipe",
    "make_command_evaluator",
    # vocab
    "TermEntry",
    "FreqMap",
    "VocabError",
    "count_frequencies",
    "curate",
    "attach_translations",
    "read_terms_csv",
    "write_terms_csv",
    # harness
    "EndpointConfig",
    "DefinitionRecord",
    "ScoreRecord",
    "HarnessError",
    "EndpointError",
    "chat",
    "generate_definitions",
    "judge_definitions",
    "parse_score",
    "write_jsonl",
    "read_definitions_jsonl",
    "read_scores_jsonl",
    # reporting
    "ScoreStats",
    "ReportError",
    "compute_stats",
    "report_table",
    "emit_histogram",
    "histogram_csv",
    "stats_csv",
]
