"""Seeded synthetic speaker corpus standing in for real embedding data.

Speakers are Gaussian centroids in a latent space. Utterances scatter around
their speaker's centroid; target-domain utterances are additionally offset by
a fixed domain-shift vector. A per-utterance quality ``q`` in (0, 1] shrinks
the vector magnitude and adds direction noise, so embedding magnitude carries
quality information the way real extractors' magnitudes do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Manifest, TrialList, Utterance


@dataclass(frozen=True)
class SyntheticConfig:
    speakers: int = 200
    utts_per_speaker: int = 10
    source_speakers: int = 0
    latent_dim: int = 16
    emb_dim: int = 32
    spread: float = 0.15
    domain_shift: float = 0.5
    quality_noise: float = 0.0
    min_quality: float = 1.0
    duration_range: tuple = (0.5, 12.0)
    seed: int = 0


@dataclass
class SyntheticCorpus:
    """Target-domain utterances (``manifest``), optional labeled source-domain
    utterances (``source``) and the latent features behind both."""

    config: SyntheticConfig
    manifest: Manifest
    source: Manifest
    features: dict
    quality: dict

    def unlabeled(self) -> Manifest:
        return Manifest(Utterance(r.id, None, r.duration, r.tempo, r.tags) for r in self.manifest)


def generate(cfg: SyntheticConfig) -> SyntheticCorpus:
    rng = np.random.default_rng([cfg.seed, 1])
    shift = rng.standard_normal(cfg.latent_dim)
    shift *= cfg.domain_shift / np.linalg.norm(shift)

    features, quality = {}, {}

    def make(prefix: str, n_spk: int, offset: np.ndarray) -> Manifest:
        centroids = rng.standard_normal((n_spk, cfg.latent_dim))
        records = []
        for s in range(n_spk):
            spk = f"{prefix}spk{s:04d}"
            for u in range(cfg.utts_per_speaker):
                utt = f"{spk}-utt{u:03d}"
                q = float(rng.uniform(cfg.min_quality, 1.0)) if cfg.min_quality < 1 else 1.0
                noise = rng.standard_normal(cfg.latent_dim)
                z = centroids[s] + offset + (cfg.spread + cfg.quality_noise * (1 - q)) * noise
                features[utt] = q * z
                quality[utt] = q
                dur = float(rng.uniform(*cfg.duration_range))
                records.append(Utterance(utt, spk, round(dur, 3)))
        return Manifest(records)

    target = make("tgt-", cfg.speakers, shift)
    source = make("src-", cfg.source_speakers, np.zeros(cfg.latent_dim))
    return SyntheticCorpus(cfg, target, source, features, quality)


def make_trials(manifest: Manifest, n_trials: int, target_fraction: float = 0.5,
                seed: int = 0, enroll_ids=None) -> TrialList:
    """Random labeled trials drawn from a speaker-labeled manifest.

    ``enroll_ids`` restricts the enrollment side (e.g. to clean utterances).
    """
    rng = np.random.default_rng([seed, 2])
    by_spk: dict[str, list[str]] = {}
    for r in manifest:
        by_spk.setdefault(r.speaker, []).append(r.id)
    spk_of = {r.id: r.speaker for r in manifest}
    enroll_pool = list(enroll_ids) if enroll_ids is not None else manifest.ids
    all_ids = manifest.ids
    enroll, test, labels = [], [], []
    while len(enroll) < n_trials:
        e = enroll_pool[rng.integers(len(enroll_pool))]
        if rng.random() < target_fraction:
            cands = [u for u in by_spk[spk_of[e]] if u != e]
            if not cands:
                continue
            t, lab = cands[rng.integers(len(cands))], 1
        else:
            t = all_ids[rng.integers(len(all_ids))]
            if spk_of[t] == spk_of[e]:
                continue
            lab = 0
        enroll.append(e)
        test.append(t)
        labels.append(lab)
    return TrialList(enroll, test, labels)
