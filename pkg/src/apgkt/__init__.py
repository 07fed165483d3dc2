"""Knowledge-tracing experiment toolkit.

Pipeline: canonical CSV logs -> skills co-occurrence graph and per-skill
difficulty -> per-question mode vectors and their autoencoded embeddings ->
bipartite question/skill embedding aggregation -> dual recurrent student
state with history recap and attention prediction -> training, AUC
evaluation, and Nemenyi comparisons.
"""

from .corpus import (
    InteractionLog,
    InteractionRecord,
    ParseError,
    ValidationError,
    build_qs_matrix,
    chunk_sequences,
    filter_multi_skill,
    load_interactions,
    save_interactions,
    split_train_test,
    subset_students,
)
from .skillgraph import SkillsGraph, build_skill_graph, skill_difficulty
from .modes import (
    ModeAutoencoder,
    ModeVector,
    difficulty_order,
    extract_mode_vector,
    mode_matrix,
    reconstruction_loss,
)
from .embed import BigraphEncoder, BigraphNeighborhood, EmbeddingTable
from .model import (
    APGKTModel,
    DKTBaseline,
    RecapSet,
    StudentState,
    bce_loss,
    higher_order_state,
    interaction_predict,
    recap_history,
    total_loss,
)
from .synth import SynthConfig, answer_probability, generate_synthetic, write_synthetic
from .harness import (
    ExperimentConfig,
    MetricsReport,
    NemenyiResult,
    compare_runs,
    compute_auc,
    evaluate_auc,
    nemenyi_test,
    run_experiment,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "APGKTModel",
    "BigraphEncoder",
    "BigraphNeighborhood",
    "DKTBaseline",
    "EmbeddingTable",
    "ExperimentConfig",
    "InteractionLog",
    "InteractionRecord",
    "MetricsReport",
    "ModeAutoencoder",
    "ModeVector",
    "NemenyiResult",
    "ParseError",
    "RecapSet",
    "SkillsGraph",
    "StudentState",
    "SynthConfig",
    "ValidationError",
    "answer_probability",
    "bce_loss",
    "build_qs_matrix",
    "build_skill_graph",
    "chunk_sequences",
    "compare_runs",
    "compute_auc",
    "difficulty_order",
    "evaluate_auc",
    "extract_mode_vector",
    "filter_multi_skill",
    "generate_synthetic",
    "higher_order_state",
    "interaction_predict",
    "load_interactions",
    "mode_matrix",
    "nemenyi_test",
    "recap_history",
    "reconstruction_loss",
    "run_experiment",
    "save_interactions",
    "skill_difficulty",
    "split_train_test",
    "subset_students",
    "total_loss",
    "train_model",
    "write_synthetic",
]
