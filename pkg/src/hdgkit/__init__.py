"""hdgkit: hybrid domain generalization benchmark toolkit.

Exact-hybridness split construction, perturbation-distillation training of
linear open-set heads on precomputed embeddings, and H-score / H2-CV
evaluation, with every gradient and metric independently verifiable.
"""

from .hdge import EmbeddingKind, EmbeddingTable, load_embeddings, save_embeddings
from .manifest import (
    DatasetManifest,
    DomainSpec,
    LabelSpace,
    load_manifest,
    save_manifest,
    validate_pairing,
)
from .splits import EvalTask, SplitPlan, build_splits, hybridness, leave_one_domain_out
from .teacher import TeacherScores, cosine_scores, softmax_with_temperature, teacher_scores, zero_shot_predict
from .losses import (
    ClassifierHead,
    LossBreakdown,
    PerturbationConfig,
    class_perturb_loss,
    instance_weight,
    score_perturb,
    sip_loss,
    soft_cross_entropy,
    total_loss,
)
from .gradcheck import GradCheckReport, finite_diff_check
from .trainer import Objective, TrainedModel, TrainerConfig, infer_open_set, train
from .metrics import MetricSeries, TaskResult, accuracy_known, accuracy_unknown, aggregate, h2_cv, h_score
from .synth import SynthConfig, generate

__version__ = "0.1.0"
