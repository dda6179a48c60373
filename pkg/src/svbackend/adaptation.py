"""Semi-supervised adaptation loop over pluggable embedding extractors.

One round filters short utterances, extracts embeddings, sweeps K over an SSE
curve, picks K at the elbow (or a forced K), clusters, writes pseudo-labels
and estimates an adaptation operator for the next round's extractor.

Network fine-tuning is outside this package. The adaptation step is a linear
surrogate: within-class covariance whitening estimated from the pseudo-labels
and applied to every later extraction. Reports mark it as a surrogate.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import (
    CalibrationModel,
    apply_calibration,
    compute_d_min,
    fit_calibration,
    qmf_table,
)
from .clustering import (
    SseCurve,
    assign_pseudo_labels,
    cluster_purity,
    detect_elbow,
    kmeans,
    save_curve,
    sse_curve,
)
from .data import (
    EmbeddingSet,
    Manifest,
    ScoreSet,
    TrialList,
    atomic_write,
    filter_short,
    l2_normalize,
    save_embeddings,
    save_manifest,
    save_scores,
    truncate_durations,
)
from .errors import DataError, UnknownIdError
from .metrics import DcfParams, det_curve, eer_from_curve, min_dcf_from_curve
from .scoring import AsNormConfig, as_norm, random_cohort, score_trials
from .synthetic import SyntheticCorpus

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Extractors
# ---------------------------------------------------------------------------


class Extractor:
    """Maps utterance ids to embeddings of a fixed dimension ``dim``."""

    dim: int

    def extract(self, ids: Sequence[str]) -> EmbeddingSet:
        raise NotImplementedError


class FileExtractor(Extractor):
    """Looks embeddings up in a precomputed set."""

    def __init__(self, emb: EmbeddingSet):
        self.emb = emb
        self.dim = emb.dim

    def extract(self, ids):
        return self.emb.subset(ids)


class SyntheticExtractor(Extractor):
    """Seeded random linear projection of synthetic latent features."""

    def __init__(self, features: dict, latent_dim: int, dim: int, seed: int = 0):
        self.features = features
        self.dim = dim
        rng = np.random.default_rng([seed, 3])
        self.projection = rng.standard_normal((latent_dim, dim)) / np.sqrt(latent_dim)

    @classmethod
    def for_corpus(cls, corpus: SyntheticCorpus) -> "SyntheticExtractor":
        c = corpus.config
        return cls(corpus.features, c.latent_dim, c.emb_dim, c.seed)

    def extract(self, ids):
        ids = list(ids)
        if not ids:
            return EmbeddingSet([], np.zeros((0, self.dim)), dim=self.dim)
        try:
            lat = np.stack([self.features[i] for i in ids])
        except KeyError as exc:
            raise UnknownIdError(f"no synthetic features for {exc.args[0]!r}") from None
        return EmbeddingSet(ids, lat @ self.projection)


class AdaptedExtractor(Extractor):
    """``base`` followed by a linear adaptation operator."""

    def __init__(self, base: Extractor, operator: "AdaptationOperator"):
        if operator.transform.shape[0] != base.dim:
            raise DataError("operator input dimension does not match the extractor")
        self.base = base
        self.operator = operator
        self.dim = operator.transform.shape[1]

    def extract(self, ids):
        return self.operator.apply(self.base.extract(ids))


# ---------------------------------------------------------------------------
# Adaptation operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdaptationOperator:
    transform: np.ndarray  # (d, d'), applied as z @ transform
    kind: str

    def __post_init__(self):
        t = np.asarray(self.transform, dtype=np.float64)
        if t.ndim != 2 or t.shape[1] > t.shape[0] or not np.isfinite(t).all():
            raise DataError("adaptation transform must be a finite d x d' matrix with d' <= d")
        object.__setattr__(self, "transform", t)

    def apply(self, emb: EmbeddingSet) -> EmbeddingSet:
        return EmbeddingSet(emb.ids, emb.vectors @ self.transform)

    @classmethod
    def identity(cls, dim: int) -> "AdaptationOperator":
        return cls(np.eye(dim), "identity")


def within_class_whitening(emb: EmbeddingSet, manifest: Manifest,
                           floor: float = 1e-6) -> AdaptationOperator:
    """Inverse square root of the within-class covariance of labeled embeddings."""
    labels = [manifest[u].speaker for u in emb.ids]
    if any(lab is None for lab in labels):
        raise DataError("whitening needs a speaker (or pseudo) label for every embedding")
    X = emb.vectors
    _, inv = np.unique(np.asarray(labels), return_inverse=True)
    k = inv.max() + 1
    means = np.zeros((k, emb.dim))
    np.add.at(means, inv, X)
    means /= np.bincount(inv, minlength=k)[:, None]
    R = X - means[inv]
    cov = R.T @ R / len(X)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor * max(vals.max(), floor))
    return AdaptationOperator((vecs / np.sqrt(vals)) @ vecs.T, "wccn-surrogate")


# ---------------------------------------------------------------------------
# Rounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundConfig:
    seed: int = 0
    max_iters: int = 100
    restarts: int = 3
    k: int | None = None          # forces K instead of the elbow
    normalize: bool = True        # length-normalize before clustering
    min_duration: float = 1.0
    operator: str = "wccn"        # "wccn" or "identity"


@dataclass(frozen=True)
class RoundReport:
    round: int
    chosen_k: int
    sse_curve: SseCurve
    k_source: str = "elbow"
    n_input: int = 0
    n_retained: int = 0
    purity: float | None = None
    val_eer: float | None = None
    val_mdcf: float | None = None
    operator: str = "wccn-surrogate"
    stages: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.round < 1:
            raise DataError("round numbers start at 1")
        if self.chosen_k not in self.sse_curve.ks:
            raise DataError(f"chosen K={self.chosen_k} missing from the SSE curve")


@dataclass
class RoundResult:
    report: RoundReport
    pseudo: Manifest
    operator: AdaptationOperator
    embeddings: EmbeddingSet


def run_round(unlabeled: Manifest, extractor: Extractor, ks: Sequence[int],
              cfg: RoundConfig = RoundConfig(), round_index: int = 1,
              truth: Manifest | None = None, mix: Manifest | None = None) -> RoundResult:
    """One filter -> extract -> SSE sweep -> elbow -> pseudo-label -> adapt pass.

    ``mix`` is an optional labeled (out-of-domain) manifest; its utterances go
    through the same extractor and join the operator estimate with their
    true labels.
    """
    kept = filter_short(unlabeled, cfg.min_duration)
    if len(kept) == 0:
        raise DataError(f"no utterances longer than {cfg.min_duration}s")
    raw = extractor.extract(kept.ids)
    emb = l2_normalize(raw) if cfg.normalize else raw
    ks = sorted(set(ks) | ({cfg.k} if cfg.k is not None else set()))
    ks = [k for k in ks if k <= len(emb)]
    if not ks:
        raise DataError("no K in the sweep fits the number of retained utterances")
    curve, runs = sse_curve(emb, ks, cfg.seed, cfg.max_iters, cfg.restarts, return_clusterings=True)
    if cfg.k is not None:
        chosen, source = cfg.k, "override"
    else:
        chosen, source = detect_elbow(curve), "elbow"
    others = [k for k in ks if k != chosen]
    log.info("round %d: K=%d (%s); other candidates %s", round_index, chosen, source, others)
    pseudo = assign_pseudo_labels(emb, runs[chosen], kept)
    purity = cluster_purity(pseudo, Manifest(truth[u] for u in pseudo.ids)) if truth is not None else None

    if cfg.operator == "identity":
        op = AdaptationOperator.identity(raw.dim)
    elif cfg.operator == "wccn":
        fit_emb, fit_lab = emb, pseudo
        if mix is not None:
            mix_manifest = filter_short(mix, cfg.min_duration)
            mix_raw = extractor.extract(mix_manifest.ids)
            mix_emb = l2_normalize(mix_raw) if cfg.normalize else mix_raw
            fit_emb = EmbeddingSet(emb.ids + mix_emb.ids, np.vstack([emb.vectors, mix_emb.vectors]))
            fit_lab = Manifest(list(pseudo) + list(mix_manifest))
        op = within_class_whitening(fit_emb, fit_lab)
    else:
        raise DataError(f"unknown adaptation operator {cfg.operator!r}")

    report = RoundReport(round_index, chosen, curve, source, len(unlabeled), len(kept),
                         purity=purity, operator=op.kind)
    return RoundResult(report, pseudo, op, raw)


# ---------------------------------------------------------------------------
# Evaluation cascade
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CohortConfig:
    size: int = 20000
    seed: int = 0
    top_n: int = 400


@dataclass(frozen=True)
class QmfConfig:
    d_min_margin: float = 0.01
    l2: float = 1e-4
    duration_cap: float | None = None
    features: tuple = ("score", "dur_e", "dur_t", "mag_rate")


@dataclass
class Cascade:
    """Per-stage (EER, minDCF) plus the intermediate score sets."""

    stages: dict
    scores: dict
    model: CalibrationModel | None = None

    def __getitem__(self, stage: str) -> tuple[float, float]:
        return self.stages[stage]


def _metrics(scores: ScoreSet, labels, dcf: DcfParams) -> tuple[float, float]:
    curve = det_curve(scores, labels)
    return eer_from_curve(curve), min_dcf_from_curve(curve, dcf)


def evaluate_round(extractor: Extractor, trials: TrialList, manifest: Manifest,
                   cohort_pool: Sequence[str], cohort: CohortConfig = CohortConfig(),
                   qmf: QmfConfig | None = QmfConfig(), dcf: DcfParams = DcfParams(),
                   threads: int = 1) -> Cascade:
    """Score validation trials and report raw, AS-Norm and QMF stages.

    The calibration model is fitted on the same validation trials it is then
    applied to.
    """
    labels = trials.target_mask()
    ids = list(dict.fromkeys(trials.enroll + trials.test))
    raw = extractor.extract(ids)
    raw_scores = score_trials(raw, trials, threads)
    pool = extractor.extract(cohort_pool)
    coh = random_cohort(pool, min(cohort.size, len(pool)), cohort.seed)
    top_n = min(cohort.top_n, len(coh))
    normed = as_norm(raw_scores, raw, coh, AsNormConfig(top_n=top_n), threads)
    stages = {"raw": _metrics(raw_scores, labels, dcf), "as-norm": _metrics(normed, labels, dcf)}
    scores = {"raw": raw_scores, "as-norm": normed}
    model = None
    if qmf is not None:
        m = truncate_durations(manifest, qmf.duration_cap) if qmf.duration_cap else manifest
        d_min = compute_d_min(m.durations(trials.enroll + trials.test), qmf.d_min_margin)
        table = qmf_table(normed, raw, m, d_min).select(qmf.features)
        model = fit_calibration(table, labels, l2=qmf.l2, d_min=d_min)
        calibrated = apply_calibration(model, table)
        stages["qmf"] = _metrics(calibrated, labels, dcf)
        scores["qmf"] = calibrated
    return Cascade(stages, scores, model)


# ---------------------------------------------------------------------------
# Multi-round driver
# ---------------------------------------------------------------------------


REPORT_COLUMNS = ("round", "chosen_k", "k_source", "n_input", "n_retained",
                  "purity", "val_eer", "val_mdcf", "operator")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def save_reports(reports: Sequence[RoundReport], path: str | os.PathLike) -> None:
    with atomic_write(path) as fh:
        fh.write("\t".join(REPORT_COLUMNS) + "\n")
        for r in reports:
            fh.write("\t".join(_fmt(getattr(r, c)) for c in REPORT_COLUMNS) + "\n")


@dataclass
class Validation:
    trials: TrialList
    manifest: Manifest
    cohort_pool: Sequence[str]
    cohort: CohortConfig = CohortConfig()
    qmf: QmfConfig | None = QmfConfig()
    dcf: DcfParams = DcfParams()


def run_adaptation(unlabeled: Manifest, extractor: Extractor, ks: Sequence[int],
                   cfg: RoundConfig = RoundConfig(), rounds: int = 1,
                   truth: Manifest | None = None, validation: Validation | None = None,
                   mix: Manifest | None = None, run_dir: str | os.PathLike | None = None,
                   threads: int = 1) -> list[RoundReport]:
    """Run ``rounds`` rounds, each re-extracting with the previous round's operator.

    With ``run_dir`` set, per-round embeddings, pseudo-label manifests, SSE
    curves and validation scores land there under fixed names together with
    ``report.tsv``.
    """
    if rounds < 1:
        raise DataError("rounds must be >= 1")
    out = Path(run_dir) if run_dir is not None else None
    reports = []
    current = extractor
    for r in range(1, rounds + 1):
        res = run_round(unlabeled, current, ks, cfg, r, truth, mix)
        report = res.report
        adapted = AdaptedExtractor(current, res.operator)
        if validation is not None:
            cas = evaluate_round(adapted, validation.trials, validation.manifest,
                                 validation.cohort_pool, validation.cohort, validation.qmf,
                                 validation.dcf, threads)
            last = list(cas.stages)[-1]
            report = RoundReport(**{**report.__dict__, "val_eer": cas[last][0],
                                    "val_mdcf": cas[last][1], "stages": cas.stages})
            if out is not None:
                for stage, sc in cas.scores.items():
                    save_scores(sc, out / f"round{r}_scores_{stage}.txt")
        if out is not None:
            save_embeddings(res.embeddings, out / f"round{r}_embeddings.bin")
            save_manifest(res.pseudo, out / f"round{r}_pseudo.tsv")
            save_curve(report.sse_curve, out / f"round{r}_sse.tsv")
        reports.append(report)
        log.info("round %d done: K=%d purity=%s", r, report.chosen_k, _fmt(report.purity))
        current = adapted
    if out is not None:
        save_reports(reports, out / "report.tsv")
    return reports
