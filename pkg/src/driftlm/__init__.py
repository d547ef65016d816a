"""driftlm: desk-scale lifelong masked-LM pretraining over domain streams."""

from .corpus import (
    BOS_ID,
    MASK_ID,
    NUM_SPECIAL,
    PAD_ID,
    DomainCorpus,
    DomainStream,
    GeneratorSpec,
    MaskedBatch,
    build_stream,
    dirichlet_topic_specs,
    drifting_topic_specs,
    load_corpus,
    mask_batch,
    save_corpus,
    shuffle_union,
    synth_domain_corpus,
    synth_stream,
    vocab_distance,
)
from .distill import (
    DistillConfig,
    combine_losses,
    contrastive_kd_loss,
    logit_kd_loss,
    rep_kd_loss,
    seed_kd_loss,
    similarity_matrix,
    simcse_loss,
    simcse_loss_from_reps,
)
from .evaluation import (
    DownstreamTask,
    FinetuneConfig,
    RetentionMatrix,
    bayes_accuracy,
    finetune,
    kshot_curve,
    metric_lrap,
    metric_macro_f1,
    metric_micro_f1,
    mlm_log_perplexity,
    retention_matrix,
    subsample_task,
    synth_downstream_task,
    temporal_generalization,
)
from .memory import ReplayMemory, RepresentationQueue, rebalance_after_domain, sample_memory
from .model import (
    Checkpoint,
    MlmEncoder,
    ModelConfig,
    forward_mlm,
    init_model,
    load_checkpoint,
    parameter_count,
    read_checkpoint,
    save_checkpoint,
    sentence_representation,
    token_representations,
    write_checkpoint,
)
from .training import (
    ALGORITHMS,
    CostCounts,
    CostLedger,
    DataAccessLog,
    FisherState,
    TrainConfig,
    TrainContext,
    cost_closed_form,
    ewc_accumulate_fisher,
    ewc_penalty,
    ewc_set_anchor,
    run_stream,
    train_domain,
    verify_ledger,
)

__version__ = "0.1.0"
