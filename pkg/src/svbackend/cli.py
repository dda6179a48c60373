"""Batch command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
Diagnostics go to stderr; data goes to the declared output files or stdout.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .adaptation import (
    CohortConfig,
    FileExtractor,
    QmfConfig,
    RoundConfig,
    SyntheticExtractor,
    Validation,
    run_adaptation,
)
from .calibration import (
    FEATURES,
    apply_calibration,
    compute_d_min,
    fit_calibration,
    load_model,
    qmf_table,
    save_model,
)
from .clustering import (
    assign_pseudo_labels,
    cluster_purity,
    detect_elbow,
    kmeans,
    load_curve,
    save_curve,
    sse_curve,
)
from .config import Config, ConfigError, load_config
from .data import (
    Manifest,
    augment_manifest,
    augmented_counts,
    filter_short,
    l2_normalize,
    load_embeddings,
    load_manifest,
    load_scores,
    load_trials,
    save_embeddings,
    save_manifest,
    save_scores,
    save_trials,
    truncate_durations,
)
from .errors import DataError
from .margin_loss import gradient_check, margin_schedule
from .metrics import DcfParams, det_curve, eer_from_curve, min_dcf_from_curve, save_det
from .scoring import (
    AsNormConfig,
    Cohort,
    as_norm,
    fuse,
    random_cohort,
    score_trials,
    speaker_mean_cohort,
)
from .synthetic import SyntheticConfig, generate, make_trials

log = logging.getLogger("svbackend")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _pick(flag, default):
    return default if flag is None else flag


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_score(args, cfg: Config) -> int:
    emb = load_embeddings(args.embeddings)
    save_scores(score_trials(emb, load_trials(args.trials), cfg.threads), args.out)
    return 0


def _cohort(args, cfg: Config) -> Cohort:
    if args.cohort:
        return Cohort.from_embeddings(load_embeddings(args.cohort))
    if not args.cohort_pool:
        raise UsageError("asnorm needs --cohort or --cohort-pool")
    pool = load_embeddings(args.cohort_pool)
    if args.cohort_manifest:
        return speaker_mean_cohort(pool, load_manifest(args.cohort_manifest))
    size = min(_pick(args.cohort_size, cfg.cohort_size), len(pool))
    return random_cohort(pool, size, cfg.seed)


def cmd_asnorm(args, cfg: Config) -> int:
    emb = load_embeddings(args.embeddings)
    raw = load_scores(args.scores)
    cohort = _cohort(args, cfg)
    top_n = _pick(args.top_n, cfg.as_norm_top_n)
    if top_n > len(cohort):
        log.warning("top-n %d exceeds cohort size %d; using the whole cohort", top_n, len(cohort))
        top_n = len(cohort)
    out = as_norm(raw, emb, cohort, AsNormConfig(top_n, cfg.as_norm_sigma_floor), cfg.threads)
    save_scores(out, args.out)
    return 0


def _manifest_for_qmf(args):
    m = load_manifest(args.manifest)
    return truncate_durations(m, args.duration_cap) if args.duration_cap else m


def cmd_qmf_fit(args, cfg: Config) -> int:
    scores = load_scores(args.scores)
    trials = load_trials(args.trials)
    scores.check_aligned(trials, "scores")
    m = _manifest_for_qmf(args)
    d_min = compute_d_min(m.durations(trials.enroll + trials.test), _pick(args.d_min_margin, cfg.qmf_d_min_margin))
    names = tuple(args.features.split(",")) if args.features else FEATURES
    table = qmf_table(scores, load_embeddings(args.embeddings), m, d_min).select(names)
    model = fit_calibration(table, trials.target_mask(), l2=_pick(args.l2, cfg.qmf_l2), d_min=d_min)
    save_model(model, args.out)
    log.info("weights %s bias %.6f", dict(zip(model.feature_names, model.weights.round(6))), model.bias)
    return 0


def cmd_qmf_apply(args, cfg: Config) -> int:
    model = load_model(args.model)
    scores = load_scores(args.scores)
    table = qmf_table(scores, load_embeddings(args.embeddings), _manifest_for_qmf(args), model.d_min)
    save_scores(apply_calibration(model, table.select(model.feature_names)), args.out)
    return 0


def cmd_fuse(args, cfg: Config) -> int:
    systems = [load_scores(p) for p in args.scores]
    save_scores(fuse(systems, _floats(args.weights) if args.weights else None), args.out)
    return 0


def cmd_metrics(args, cfg: Config) -> int:
    scores = load_scores(args.scores)
    trials = load_trials(args.trials)
    scores.check_aligned(trials, "scores")
    p = _pick(args.p_target, cfg.dcf_p_target)
    curve = det_curve(scores, trials.target_mask())
    dcf = DcfParams(p, cfg.dcf_c_miss, cfg.dcf_c_fa)
    print(f"EER[%] {100 * eer_from_curve(curve):.6f} minDCF(p={p:g}) {min_dcf_from_curve(curve, dcf):.6f}")
    if args.det_out:
        save_det(curve, args.det_out)
    return 0


def _cluster_input(args):
    emb = load_embeddings(args.embeddings)
    return emb if args.raw else l2_normalize(emb)


def cmd_cluster(args, cfg: Config) -> int:
    emb = _cluster_input(args)
    ks = _ints(args.ks) if args.ks else list(cfg.cluster_ks)
    curve = sse_curve(emb, ks, cfg.seed, cfg.cluster_max_iters, _pick(args.restarts, cfg.cluster_restarts))
    save_curve(curve, args.out)
    return 0


def cmd_elbow(args, cfg: Config) -> int:
    print(detect_elbow(load_curve(args.curve)))
    return 0


def cmd_pseudo_label(args, cfg: Config) -> int:
    emb = _cluster_input(args)
    manifest = load_manifest(args.manifest) if args.manifest else None
    if manifest is not None:
        kept = filter_short(manifest, args.min_duration)
        emb = emb.subset(u for u in emb.ids if u in kept)
    clus = kmeans(emb, args.k, cfg.seed, cfg.cluster_max_iters, _pick(args.restarts, cfg.cluster_restarts))
    pseudo = assign_pseudo_labels(emb, clus, manifest)
    save_manifest(pseudo, args.out)
    if args.truth:
        truth = load_manifest(args.truth)
        print(f"purity {cluster_purity(pseudo, Manifest(truth[u] for u in pseudo.ids)):.6f}")
    return 0


def cmd_adapt_run(args, cfg: Config) -> int:
    emb = load_embeddings(args.embeddings)
    unlabeled = load_manifest(args.manifest)
    truth = load_manifest(args.truth) if args.truth else None
    validation = None
    if args.trials:
        val_manifest = load_manifest(args.val_manifest or args.manifest)
        validation = Validation(
            trials=load_trials(args.trials),
            manifest=val_manifest,
            cohort_pool=[r.id for r in filter_short(unlabeled, args.min_duration) if r.id in emb],
            cohort=CohortConfig(_pick(args.cohort_size, cfg.cohort_size), cfg.seed,
                                _pick(args.top_n, cfg.as_norm_top_n)),
            qmf=None if args.no_qmf else QmfConfig(cfg.qmf_d_min_margin, cfg.qmf_l2, args.duration_cap),
            dcf=DcfParams(cfg.dcf_p_target, cfg.dcf_c_miss, cfg.dcf_c_fa),
        )
    round_cfg = RoundConfig(
        seed=cfg.seed, max_iters=cfg.cluster_max_iters,
        restarts=_pick(args.restarts, cfg.cluster_restarts), k=args.k,
        normalize=not args.raw, min_duration=args.min_duration, operator=args.operator,
    )
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    try:
        log.info("adaptation operator: %s (linear surrogate for fine-tuning)", args.operator)
        reports = run_adaptation(
            unlabeled, FileExtractor(emb), _ints(args.ks) if args.ks else list(cfg.cluster_ks),
            round_cfg, args.rounds, truth, validation,
            mix=load_manifest(args.mix) if args.mix else None,
            run_dir=run_dir, threads=cfg.threads,
        )
    finally:
        log.removeHandler(handler)
        handler.close()
    for r in reports:
        print(f"round {r.round} K={r.chosen_k} ({r.k_source})"
              + (f" purity={r.purity:.6f}" if r.purity is not None else "")
              + (f" EER[%]={100 * r.val_eer:.6f} minDCF={r.val_mdcf:.6f}" if r.val_eer is not None else ""))
    return 0


def cmd_manifest_augment(args, cfg: Config) -> int:
    factors = _floats(args.factors) if args.factors else []
    if args.counts:
        n_utt, n_spk = _ints(args.counts)
        utts, spks = augmented_counts(n_utt, n_spk, factors)
        print(f"utterances {utts} speakers {spks}")
        return 0
    if not (args.manifest and args.out):
        raise UsageError("manifest-augment needs --manifest and --out (or --counts)")
    save_manifest(augment_manifest(load_manifest(args.manifest), factors), args.out)
    return 0


def cmd_manifest_filter(args, cfg: Config) -> int:
    m = load_manifest(args.manifest)
    if args.cap is not None:
        m = truncate_durations(m, args.cap)
    if args.min_duration is not None:
        m = filter_short(m, args.min_duration)
    save_manifest(m, args.out)
    return 0


def cmd_loss_check(args, cfg: Config) -> int:
    if args.stage:
        m, s = margin_schedule(args.stage)
    else:
        m, s = cfg.loss_m, cfg.loss_s
    m = _pick(args.margin, m)
    s = _pick(args.scale, s)
    worst = 0.0
    for name, sub in (("arcface", 1), ("subcenter-arcface", _pick(args.sub_centers, cfg.loss_sub_centers))):
        res = gradient_check(args.cases, args.classes, args.dim, sub, m, s, cfg.seed)
        err = max(res["max_rel_err_embedding"], res["max_rel_err_weights"])
        worst = max(worst, err)
        print(f"{name} sub_centers={sub} m={m:g} s={s:g} cases={res['cases']} max_rel_err={err:.6e}")
    print(f"max relative error {worst:.6e}")
    return 0 if worst <= args.tol else 2


def cmd_synth_gen(args, cfg: Config) -> int:
    scfg = SyntheticConfig(
        speakers=args.speakers, utts_per_speaker=args.utts, source_speakers=args.source_speakers,
        latent_dim=args.latent_dim, emb_dim=args.dim, spread=args.spread,
        domain_shift=args.shift, quality_noise=args.quality_noise,
        min_quality=args.min_quality, seed=cfg.seed,
    )
    corpus = generate(scfg)
    ex = SyntheticExtractor.for_corpus(corpus)
    out = Path(args.out_dir)
    all_ids = corpus.manifest.ids + corpus.source.ids
    save_embeddings(ex.extract(all_ids), out / "embeddings.bin")
    save_manifest(corpus.manifest, out / "truth.tsv")
    save_manifest(corpus.unlabeled(), out / "unlabeled.tsv")
    if len(corpus.source):
        save_manifest(corpus.source, out / "source.tsv")
    if args.trials:
        save_trials(make_trials(corpus.manifest, args.trials, seed=cfg.seed), out / "trials.txt")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file (default: $SVB_CONFIG)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="svb", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"svb {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(func=fn)
        return sp

    sp = add("score", cmd_score, "cosine-score a trial list")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--out", required=True)

    sp = add("asnorm", cmd_asnorm, "adaptive symmetric score normalization")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--scores", required=True)
    sp.add_argument("--cohort", help="cohort embeddings used as-is (length-normalized)")
    sp.add_argument("--cohort-pool", help="embeddings to build the cohort from")
    sp.add_argument("--cohort-size", type=int, help="random cohort size drawn from the pool")
    sp.add_argument("--cohort-manifest", help="speaker labels: build a speaker-mean cohort")
    sp.add_argument("--top-n", type=int)
    sp.add_argument("--out", required=True)

    for name, fn, help in (("qmf-fit", cmd_qmf_fit, "fit QMF logistic calibration"),
                           ("qmf-apply", cmd_qmf_apply, "apply a QMF calibration model")):
        sp = add(name, fn, help)
        sp.add_argument("--scores", required=True)
        sp.add_argument("--embeddings", required=True, help="raw (un-normalized) embeddings")
        sp.add_argument("--manifest", required=True, help="durations")
        sp.add_argument("--duration-cap", type=float, help="truncate durations first (seconds)")
        sp.add_argument("--out", required=True)
        if name == "qmf-fit":
            sp.add_argument("--trials", required=True)
            sp.add_argument("--d-min-margin", type=float)
            sp.add_argument("--l2", type=float)
            sp.add_argument("--features", help=f"comma list out of {','.join(FEATURES)}")
        else:
            sp.add_argument("--model", required=True)

    sp = add("fuse", cmd_fuse, "weighted-mean fusion of aligned score files")
    sp.add_argument("--scores", nargs="+", required=True)
    sp.add_argument("--weights")
    sp.add_argument("--out", required=True)

    sp = add("metrics", cmd_metrics, "EER and minDCF")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--p-target", type=float)
    sp.add_argument("--det-out")

    sp = add("cluster", cmd_cluster, "SSE curve over a K sweep")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--ks")
    sp.add_argument("--restarts", type=int)
    sp.add_argument("--raw", action="store_true", help="skip length normalization")
    sp.add_argument("--out", required=True)

    sp = add("elbow", cmd_elbow, "pick K at the elbow of an SSE curve")
    sp.add_argument("--curve", required=True)

    sp = add("pseudo-label", cmd_pseudo_label, "cluster and write a pseudo-label manifest")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--manifest", help="filter short utterances and copy durations")
    sp.add_argument("--min-duration", type=float, default=1.0)
    sp.add_argument("--truth", help="labeled manifest; prints cluster purity")
    sp.add_argument("--restarts", type=int)
    sp.add_argument("--raw", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("adapt-run", cmd_adapt_run, "multi-round pseudo-label adaptation")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--manifest", required=True, help="unlabeled target-domain manifest")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--ks")
    sp.add_argument("--k", type=int, help="force K instead of the elbow")
    sp.add_argument("--rounds", type=int, default=1)
    sp.add_argument("--restarts", type=int)
    sp.add_argument("--min-duration", type=float, default=1.0)
    sp.add_argument("--operator", choices=("wccn", "identity"), default="wccn")
    sp.add_argument("--mix", help="labeled out-of-domain manifest added to adaptation")
    sp.add_argument("--truth", help="labeled manifest for purity reporting")
    sp.add_argument("--trials", help="labeled validation trials")
    sp.add_argument("--val-manifest", help="durations for validation utterances")
    sp.add_argument("--cohort-size", type=int)
    sp.add_argument("--top-n", type=int)
    sp.add_argument("--duration-cap", type=float)
    sp.add_argument("--no-qmf", action="store_true")
    sp.add_argument("--raw", action="store_true")

    sp = add("manifest-augment", cmd_manifest_augment, "speed-perturbation speaker augmentation")
    sp.add_argument("--manifest")
    sp.add_argument("--factors", default="0.9,1.1")
    sp.add_argument("--counts", help="N_UTTS,N_SPEAKERS: print augmented counts only")
    sp.add_argument("--out")

    sp = add("manifest-filter", cmd_manifest_filter, "drop short utterances / cap durations")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--min-duration", type=float)
    sp.add_argument("--cap", type=float)
    sp.add_argument("--out", required=True)

    sp = add("loss-check", cmd_loss_check, "finite-difference check of margin-loss gradients")
    sp.add_argument("--cases", type=int, default=100)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--dim", type=int, default=4)
    sp.add_argument("--sub-centers", type=int)
    sp.add_argument("--stage", choices=("pretrain", "lmft"))
    sp.add_argument("--margin", type=float)
    sp.add_argument("--scale", type=float)
    sp.add_argument("--tol", type=float, default=1e-5)

    sp = add("synth-gen", cmd_synth_gen, "generate a seeded synthetic corpus")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--speakers", type=int, default=200)
    sp.add_argument("--utts", type=int, default=10)
    sp.add_argument("--source-speakers", type=int, default=0)
    sp.add_argument("--latent-dim", type=int, default=16)
    sp.add_argument("--dim", type=int, default=32)
    sp.add_argument("--spread", type=float, default=0.15)
    sp.add_argument("--shift", type=float, default=0.5)
    sp.add_argument("--quality-noise", type=float, default=0.0)
    sp.add_argument("--min-quality", type=float, default=1.0)
    sp.add_argument("--trials", type=int, default=0, help="also write this many labeled trials")
    return p


def _resolve_config(args) -> Config:
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.threads is not None:
        updates["threads"] = args.threads
    return replace(cfg, **updates).validate()


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    level = logging.INFO if args.verbose else logging.WARNING
    stderr = logging.StreamHandler(sys.stderr)
    stderr.setLevel(level)
    stderr.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(stderr)
    log.setLevel(logging.INFO)
    log.propagate = False
    try:
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"svb {args.command}: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"svb {args.command}: error: {exc}", file=sys.stderr)
        return 2
    finally:
        log.removeHandler(stderr)


if __name__ == "__main__":
    sys.exit(main())
