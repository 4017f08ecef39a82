"""Desk-scale federated learning with evidential prompt tuning.

Clients fine-tune key/value prompt prefixes and an evidence head on a
shared frozen vision transformer, exchange nothing but uncertainty-ranked
attention rollout maps, and distill against one another's maps.  The
package also carries the usual federated baselines (FedAvg and friends)
so strategies can be compared under one harness.
"""

from . import autodiff
from .autodiff import Tensor, backward, no_grad
from .backend import backend_name
from .config import (
    STRATEGIES,
    ConfigError,
    ExperimentConfig,
    desk_config,
    dump_config,
    load_config,
    paper_config,
)
from .data import (
    DataError,
    SkewSpec,
    default_skew,
    generate_synthetic,
    load_external,
    split,
    write_external,
)
from .distill import (
    AttentionBuffer,
    KDConstants,
    ProtocolError,
    RolloutMap,
    combined_loss,
    kd_constants,
    kd_loss,
    kd_loss_batch,
    select_for_sharing,
)
from .evidential import (
    ClassPrior,
    DirichletOpinion,
    evidential_loss,
    evidential_mse,
    kl_annealing,
    kl_to_prior,
    masked_alpha,
    opinion,
    uniform_prior,
    weighted_prior,
)
from .federation import (
    FederationError,
    MessageLog,
    RoundRecord,
    balanced_accuracy,
    build_dataset,
    results_csv,
    run_experiment,
    strategy_plan,
)
from .vit import (
    EvidenceHead,
    FrozenBackbone,
    PromptSet,
    ViTConfig,
    attention_rollout,
    forward,
    forward_features,
    trainable_params,
)

__version__ = "0.1.0"
