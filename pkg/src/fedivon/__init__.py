"""Federated variational learning with a second-order optimizer.

Clients fit diagonal Gaussian posteriors with a variational online
Newton optimizer; a simulated server fuses them by precision-weighted
Gaussian products.  Includes non-IID partitioners, calibration and OOD
metrics, personalization, and a deterministic experiment CLI.
"""

from .aggregation import (
    ClientContribution,
    GlobalModel,
    aggregate,
    fedavg_aggregate,
    product_of_gaussians_density_check,
)
from .datagen import (
    Dataset,
    PartitionPlan,
    class_skew_partition,
    concept_drift_partition,
    ood_inputs,
    load_csv,
    load_idx,
    matched_indices,
    read_idx,
    relabel_to_superclass,
    shard_partition,
    split_dataset,
    synth_blobs,
    synth_superclass,
    write_csv,
    write_idx,
)
from .federation import (
    ClientHandle,
    EvalContext,
    FederationConfig,
    FederationResult,
    MetricsRecord,
    PersonalizationConfig,
    client_rng,
    clients_from_partition,
    initial_global_model,
    load_checkpoint,
    run_federation,
    run_personalized,
    run_round,
    sample_clients,
    save_checkpoint,
)
from .ivon import (
    IvonConfig,
    IvonState,
    PriorSpec,
    VariationalPosterior,
    client_update,
    hessian_estimate,
    ivon_step,
    load_posterior,
    personalized_client_update,
    posterior_from_record,
    posterior_to_record,
    sample_theta,
    save_posterior,
    sigma_sq,
    von_step,
    vogn_step,
)
from .metrics import (
    PredictiveBatch,
    ReliabilityBins,
    accuracy,
    auroc,
    brier,
    ece,
    mc_predict,
    nll,
    predictive_entropy,
    reliability_bins,
)
from .nn import Batch, ModelSpec, forward, init_params, loss_and_grad, param_count
from .seeding import derive_rng

__version__ = "0.1.0"
