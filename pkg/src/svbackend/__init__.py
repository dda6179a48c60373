"""Speaker-verification back-end on embedding vectors.

Trial scoring, AS-Norm, QMF calibration, fusion, EER/minDCF, K-means
pseudo-labeling with elbow detection, the pseudo-label adaptation loop and
ArcFace / sub-center ArcFace head math.
"""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    EmbeddingSet,
    Manifest,
    ScoreSet,
    TrialList,
    Utterance,
    augment_manifest,
    filter_short,
    l2_normalize,
    load_embeddings,
    save_embeddings,
    truncate_durations,
)
from .metrics import DcfParams, eer, min_dcf  # noqa: E402
from .scoring import AsNormConfig, Cohort, as_norm, cosine_score, fuse, score_trials  # noqa: E402
