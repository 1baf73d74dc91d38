"""Desk-scale protocol: one seeded run of the whole method on the synthetic task.

A run synthesizes the corpus, trains the base model on clean data, scores a
clean and a heavily corrupted copy of the matched eval set, measures the
NRSE / frame-error correlation on the mismatched pool, and adapts with
NRSE selection (multi-pass loop) and with the whole pool (single pass).
Everything is a pure function of the seed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import SyntheticTaskConfig, corrupt, quantize, synth_corpus
from .entropy import EntropyParams
from .features import GfbConfig, gfb_extract
from .net import AdaptConfig, TrainConfig, init_network, tfcnn_lite_spec, train
from .report import pearson_r
from .selection import (LoopHistory, Model, PassConfig, ScoreTable, Utterance, adaptation_pass,
                        evaluate_sets, frame_set, relative_k_schedule, run_loop, score_utterances)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskProtocol:
    synth: SyntheticTaskConfig = SyntheticTaskConfig(
        n_train=100, n_cv=20, n_eval_matched=100, n_pool=200, n_eval_mismatched=60,
        duration=(2.0, 4.0))
    features: GfbConfig = GfbConfig()
    train: TrainConfig = TrainConfig(max_epochs=12)
    adapt: AdaptConfig = AdaptConfig()
    entropy: EntropyParams = EntropyParams()
    # heavy condition for the matched-vs-mismatched NRSE comparison
    heavy_t60: float = 0.5
    heavy_snr_db: float = 0.0
    # k0 and delta_k as pool fractions (4000 and +1000 of a pool of about 8000)
    k0_fraction: float = 0.5
    delta_fraction: float = 0.125
    num_passes: int = 3
    rescore_with_latest: bool = True

    def pass_config(self, pool_size: int) -> PassConfig:
        k0, dk = relative_k_schedule(pool_size, self.k0_fraction, self.delta_fraction)
        return PassConfig(k0=k0, delta_k=dk, num_passes=self.num_passes, entropy=self.entropy,
                          adapt=self.adapt, rescore_with_latest=self.rescore_with_latest)


@dataclass
class SeedResult:
    seed: int
    baseline: dict
    nrse_matched: np.ndarray
    nrse_heavy: np.ndarray
    pool_scores: ScoreTable
    pool_r: float
    loop: LoopHistory
    all_data: dict
    timings: dict = field(default_factory=dict)

    @property
    def selected_half(self) -> dict:
        """Metrics of the first loop pass, a single pass at k = k0."""
        return self.loop.passes[0].metrics


def _utterances(synth_utts, cfg: GfbConfig) -> list[Utterance]:
    return [Utterance(u.audio.utterance_id, gfb_extract(u.audio, cfg).frames, u.labels, u.condition)
            for u in synth_utts]


def build_data(seed: int, p: DeskProtocol) -> dict[str, list[Utterance]]:
    corpus = synth_corpus(replace(p.synth, seed=seed))
    data = {split: _utterances(utts, p.features) for split, utts in corpus.items()}
    heavy = [quantize(corrupt(u.audio, p.heavy_t60, p.heavy_snr_db, seed * 100_003 + i))
             for i, u in enumerate(corpus["eval_matched"])]
    data["eval_heavy"] = [Utterance(f"heavy_{i:05d}", gfb_extract(a, p.features).frames, u.labels)
                          for i, (a, u) in enumerate(zip(heavy, corpus["eval_matched"]))]
    return data


def train_base(seed: int, data, p: DeskProtocol) -> Model:
    spec = tfcnn_lite_spec(num_classes=p.synth.num_classes, num_bands=p.features.num_filters)
    spec = spec.with_input_norm([u.features for u in data["train"]])
    params, tlog = train(spec, init_network(spec, seed), frame_set(spec, data["train"]),
                         frame_set(spec, data["cv"]), replace(p.train, seed=seed))
    log.info("seed %d: base cv fer %.4f (%d epochs)", seed, tlog.best_cv_frame_error, len(tlog.records))
    return Model(spec, params)


def run_seed(seed: int, p: DeskProtocol = DeskProtocol(), adapt: bool = True) -> SeedResult:
    """Run the protocol for one seed; ``adapt=False`` stops after scoring."""
    t = {"start": time.process_time()}
    data = build_data(seed, p)
    model = train_base(seed, data, p)
    evals = {"eval_matched": data["eval_matched"], "eval_mismatched": data["eval_mismatched"]}
    baseline = evaluate_sets(model, evals)
    matched = score_utterances(model, data["eval_matched"], p.entropy).values()
    heavy = score_utterances(model, data["eval_heavy"], p.entropy).values()
    pool_scores = score_utterances(model, data["pool"], p.entropy)
    r = pearson_r(pool_scores.values(), pool_scores.errors())
    t["scored"] = time.process_time()

    loop, all_data = LoopHistory(), {}
    if adapt:
        cfg = replace(p.pass_config(len(data["pool"])), adapt=replace(p.adapt, seed=seed))
        loop = run_loop(model, data["train"], data["pool"], cfg, data["cv"], evals)
        everything = replace(cfg, k0=len(data["pool"]), num_passes=1)
        all_data = adaptation_pass(model, data["train"], data["pool"], 0, everything, data["cv"],
                                   evals)[2]
    t["adapted"] = time.process_time()
    timings = {"score_cpu_s": t["scored"] - t["start"], "adapt_cpu_s": t["adapted"] - t["scored"]}
    return SeedResult(seed, baseline, matched, heavy, pool_scores, r, loop, all_data, timings)


def summary_rows(results: list[SeedResult]) -> list[list]:
    """One row per seed for the summary CSV written by the experiment script."""
    header = ["seed", "base_matched_fer", "base_mismatched_fer", "nrse_matched", "nrse_heavy",
              "pool_r", "sel_mismatched_fer", "all_mismatched_fer", "p0_mismatched_fer",
              "plast_mismatched_fer", "plast_matched_fer"]
    rows = [header]
    for res in results:
        passes = res.loop.passes
        rows.append([
            res.seed, res.baseline["eval_matched_fer"], res.baseline["eval_mismatched_fer"],
            float(res.nrse_matched.mean()), float(res.nrse_heavy.mean()), res.pool_r,
            res.selected_half.get("eval_mismatched_fer") if passes else None,
            res.all_data.get("eval_mismatched_fer"),
            passes[0].metrics["eval_mismatched_fer"] if passes else None,
            passes[-1].metrics["eval_mismatched_fer"] if passes else None,
            passes[-1].metrics["eval_matched_fer"] if passes else None,
        ])
    return rows
