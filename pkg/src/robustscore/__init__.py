"""Measure how hard a dataset's images are to perturb and how well they
recover under input-transformation defenses."""

from .attacks import AttackConfig, AttackOutcome, ddn, fgsm, pgd, run_attack
from .curation import (
    DatasetManifest,
    SynthConfig,
    filter_easy,
    filter_robust,
    frequency_report,
    generate_synthetic,
    label_defense_friendly,
    load_manifest,
)
from .defenses import DefenseConfig, apply_barrage, apply_defense, identity_defense, y_median_denoise
from .imageio import Image, load_pnm, perturbation_distance, quantize_gray, save_pnm, to_y_channel
from .metrics import ScoreReport, adf_score, amp_score, ard_score, logit_gap, logit_gap_histogram
from .models import (
    Mlp,
    SubprocessModel,
    TrainConfig,
    finite_diff_gradient,
    input_gradient,
    load_mlp,
    predict,
    save_mlp,
    train_mlp,
)
from .proxy import evaluate, evaluate_under_attack, predict_logreg, train_logreg
from .texture import GlcmConfig, compute_glcm, feature_vector, glcm_properties

__version__ = "0.1.0"
