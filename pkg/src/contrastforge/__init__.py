"""Contrastive negative generation for graph collaborative filtering:
prompt-chain negative synthesis, causal attribute learning, and fused scoring
on top of a linear graph convolution base recommender.
"""

from .causal import (CausalEffectEmbedding, CausalParams, causal_effect,
                     causal_forward, init_causal_params, item_causal_vectors,
                     project, self_attention)
from .dataio import (EmbeddingFile, InteractionDataset, ItemAttributeRecord,
                     RawInteractions, density, interaction_stats, kcore_filter,
                     load_attributes, load_interactions, read_embedding_file,
                     split_80_10_10, write_embedding_file)
from .errors import (BackendError, CacheIntegrityError, ContrastForgeError,
                     EmptyAfterFilterError, FormatError, GraphError,
                     InvalidArgumentError, MissingArtifactError, NumericalError,
                     ParseError, PipelineError)
from .evaluation import (MetricsReport, evaluate_topk, export_metrics,
                         ndcg_at_k, recall_at_k, track_modality_gradients)
from .graph import (BaseModel, BaseTrainConfig, EarlyStopper, EmbeddingTable,
                    NormalizedAdjacency, bpr_base_loss,
                    build_normalized_adjacency, propagate, train_base)
from .numerics import (AdamState, GradCheckReport, adam_step, finite_diff_check,
                       rng_stream, sigmoid, xavier_init)
from .pipeline import (AttributeEmbedding, FileEncoder, MaskedDescription,
                       StubEncoder, encode_attributes, run_pipeline,
                       stub_complete, stub_mask)
from .prompts import TEMPLATES, render_prompt
from .sampling import (DiagnosticsTrace, dns_negative, gradient_magnitude,
                       ndcg_lower_bound, uniform_negative)
from .training import (TrainConfig, TrainRecord, align_loss, fused_score,
                       rec_loss, total_loss, train_neggen)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
