"""Bi-level trigger optimization backdoor attacks on contrastive learning."""

from .attack import ABLATION_MODES, BltoConfig, BltoTrace, ablation_mode, inner_step, outer_step, run_blto
from .augment import (
    AugmentationPipeline,
    ViewPair,
    attacker_pipeline,
    custom_pipeline,
    sample_view,
    sample_views,
    victim_pipeline,
)
from .data import (
    LabeledImageSet,
    ReferenceSplit,
    load_cifar10,
    make_synthetic_set,
    reference_count_for_rate,
    split_reference,
)
from .evaluation import (
    MetricsRecord,
    MonitorContext,
    build_monitor_context,
    compute_asr,
    compute_ba,
    knn_predict,
    monitor_epoch,
    normalized_similarity,
)
from .models import (
    EncoderStack,
    TriggerGenerator,
    encode,
    generate,
    init_encoder,
    load_checkpoint,
    make_generator,
    param_checksum,
    project_and_predict,
    reinit_encoder,
    save_checkpoint,
)
from .objectives import (
    ClObjectiveConfig,
    alignment_loss,
    byol_loss,
    cosine_similarity,
    ema_update,
    infonce_loss,
    simsiam_loss,
    uniformity_loss,
)
from .poisoning import (
    PatchSpec,
    PoisonManifest,
    apply_trigger,
    export_poisoned,
    load_poisoned,
    poison_with_generator,
    poison_with_patch,
    project_linf,
)
from .victim import VictimConfig, mix_datasets, train_victim

__version__ = "0.1.0"
