"""iclforge: demonstration-poisoning experiments for code-model ICL.

The package splits into data handling (:mod:`corpus`), a validating
model gateway with a deterministic stub (:mod:`gateway`), retrieval
(:mod:`retrieval`), identifier renaming (:mod:`mutation`,
:mod:`substitution`), the greedy attack itself (:mod:`attack`),
query-set transfer (:mod:`transfer`), evaluation metrics
(:mod:`metrics`), filtering defenses (:mod:`defense`), and the
command-line front end (:mod:`cli`).
"""

from . import errors
from .attack import (
    AttackOutcome,
    Attacker,
    DemoSlot,
    FlipCriterion,
    GenerationReadout,
    IclContent,
    MutationPlan,
    TrialRecord,
    TriggerConfig,
    TriggerMatch,
    TriggerScope,
    assemble_icl,
    detect_trigger,
    flip_potential,
    is_flip,
)
from .corpus import (
    CLASSIFICATION_LABELS,
    Demonstration,
    Query,
    Repository,
    TaskKind,
    TaskMode,
    TaskVariant,
    balance_and_sample,
    join_clone_pair,
    load_queries,
    load_repository,
    split_clone_pair,
)
from .defense import (
    EntropyVerdict,
    SuspicionReport,
    calibrate_threshold,
    evaluate_defense,
    onion_filter,
    perplexity,
    shannon_entropy,
    strip_defense,
    strip_detect,
    superimpose,
)
from .gateway import (
    ChatTurn,
    ClassifierReadout,
    CompletionParams,
    EmbeddingVector,
    Gateway,
    RemoteBackend,
    StubBackend,
    SubstituteProposal,
    render_transcript,
)
from .metrics import (
    ClassificationTally,
    GenerationScores,
    accuracy,
    accuracy_drop,
    attack_success_rate,
    average_relative_drop,
    bleu,
    embedding_match_score,
    f1_score,
    generation_mean,
    meteor,
    query_time,
    rouge_l,
    score_generation,
)
from .mutation import (
    Mutant,
    VariableSite,
    delete_occurrences,
    extract_variables,
    rename,
    validate_mutant,
)
from .retrieval import (
    EmbeddingCache,
    SelectionResult,
    cosine_similarity,
    pooled_query_embedding,
    rank_by_embedding,
    select_top_n,
)
from .substitution import SubstituteSet, build_substitute_set, mask_first_occurrence
from .transfer import (
    IclBundle,
    TransferConfig,
    UniversalBadIcl,
    build_universal,
    bundle_from_universal,
    export_bundle,
    filter_answerable_queries,
    load_bundle,
)

__version__ = "0.1.0"

__all__ = [
    "errors",
    # attack
    "AttackOutcome",
    "Attacker",
    "DemoSlot",
    "FlipCriterion",
    "GenerationReadout",
    "IclContent",
    "MutationPlan",
    "TrialRecord",
    "TriggerConfig",
    "TriggerMatch",
    "TriggerScope",
    "assemble_icl",
    "detect_trigger",
    "flip_potential",
    "is_flip",
    # corpus
    "CLASSIFICATION_LABELS",
    "Demonstration",
    "Query",
    "Repository",
    "TaskKind",
    "TaskMode",
    "TaskVariant",
    "balance_and_sample",
    "join_clone_pair",
    "load_queries",
    "load_repository",
    "split_clone_pair",
    # defense
    "EntropyVerdict",
    "SuspicionReport",
    "calibrate_threshold",
    "evaluate_defense",
    "onion_filter",
    "perplexity",
    "shannon_entropy",
    "strip_defense",
    "strip_detect",
    "superimpose",
    # gateway
    "ChatTurn",
    "ClassifierReadout",
    "CompletionParams",
    "EmbeddingVector",
    "Gateway",
    "RemoteBackend",
    "StubBackend",
    "SubstituteProposal",
    "render_transcript",
    # metrics
    "ClassificationTally",
    "GenerationScores",
    "accuracy",
    "accuracy_drop",
    "attack_success_rate",
    "average_relative_drop",
    "bleu",
    "embedding_match_score",
    "f1_score",
    "generation_mean",
    "meteor",
    "query_time",
    "rouge_l",
    "score_generation",
    # mutation
    "Mutant",
    "VariableSite",
    "delete_occurrences",
    "extract_variables",
    "rename",
    "validate_mutant",
    # retrieval
    "EmbeddingCache",
    "SelectionResult",
    "cosine_similarity",
    "pooled_query_embedding",
    "rank_by_embedding",
    "select_top_n",
    # substitution
    "SubstituteSet",
    "build_substitute_set",
    "mask_first_occurrence",
    # transfer
    "IclBundle",
    "TransferConfig",
    "UniversalBadIcl",
    "build_universal",
    "bundle_from_universal",
    "export_bundle",
    "filter_answerable_queries",
    "load_bundle",
]
