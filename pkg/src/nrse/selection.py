"""NRSE-based data selection and the multi-pass unsupervised adaptation loop.

Each pass scores every pool utterance with the current model, keeps the
``k`` lowest-NRSE utterances, labels them with the model's own frame-level
argmax, and fine-tunes on those pseudo-labeled utterances together with the
original labeled training data.  Early stopping only ever looks at
original-domain CV data.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import atomic
from .corpus import Checkpoint, save_checkpoint
from .entropy import EntropyParams, nrse, utterance_entropy_profile
from .errors import ConfigError, FormatError, InputError
from .net import (AdaptConfig, FrameSet, NetworkSpec, Parameters, adapt_finetune, evaluate,
                  forward, forward_with_taps, frame_error, network_input)

log = logging.getLogger(__name__)

SCORE_HEADER = ["utterance_id", "layer", "nrse", "frame_error"]
METRICS_HEADER = ["pass", "k", "eval_matched_fer", "eval_mismatched_fer"]


@dataclass
class Utterance:
    """Feature frames of one utterance; ``labels`` are reference frame labels
    when known (never used for training on pool data)."""

    utterance_id: str
    features: np.ndarray
    labels: np.ndarray | None = None
    condition: str = ""


@dataclass
class Model:
    spec: NetworkSpec
    params: Parameters

    def stacked(self, features: np.ndarray) -> np.ndarray:
        return network_input(self.spec, features)


# ----------------------------------------------------------------------------
# score tables


@dataclass(frozen=True)
class ScoreRow:
    utterance_id: str
    layer: int
    nrse: float
    frame_error: float | None = None


@dataclass
class ScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if r.utterance_id in seen:
                raise InputError(f"duplicate utterance_id {r.utterance_id!r} in score table")
            if not 0.0 <= r.nrse <= 1.0:
                raise InputError(f"{r.utterance_id}: nrse {r.nrse} outside [0, 1]")
            seen.add(r.utterance_id)

    def __len__(self) -> int:
        return len(self.rows)

    def values(self) -> np.ndarray:
        return np.array([r.nrse for r in self.rows])

    def errors(self) -> np.ndarray:
        return np.array([np.nan if r.frame_error is None else r.frame_error for r in self.rows])

    def has_errors(self) -> bool:
        return bool(self.rows) and all(r.frame_error is not None for r in self.rows)

    def write_csv(self, path) -> None:
        atomic.write_csv(path, SCORE_HEADER, [
            [r.utterance_id, r.layer, f"{r.nrse:.9f}",
             "" if r.frame_error is None else f"{r.frame_error:.6f}"]
            for r in self.rows])

    @classmethod
    def read_csv(cls, path) -> "ScoreTable":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != SCORE_HEADER:
                raise FormatError(f"{path}: expected header {','.join(SCORE_HEADER)}")
            for lineno, rec in enumerate(reader, 2):
                if len(rec) != 4:
                    raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
                try:
                    fe = float(rec[3]) if rec[3] else None
                    rows.append(ScoreRow(rec[0], int(rec[1]), float(rec[2]), fe))
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: malformed number") from None
        return cls(rows)


def score_utterances(model: Model, utts: Sequence[Utterance], e: EntropyParams) -> ScoreTable:
    """NRSE at ``e.layer_index`` for every utterance, plus frame error when labels exist."""
    e.validate()
    rows = []
    for u in utts:
        post, trace = forward_with_taps(model.spec, model.params, model.stacked(u.features),
                                        e.layer_index)
        score = nrse(utterance_entropy_profile(trace, e, u.utterance_id), e.percentile)
        fe = frame_error(post, u.labels) if u.labels is not None else None
        rows.append(ScoreRow(u.utterance_id, e.layer_index, score.value, fe))
    return ScoreTable(rows)


# ----------------------------------------------------------------------------
# selection and pseudo-labels


@dataclass(frozen=True)
class SelectionResult:
    pass_index: int
    k: int
    selected: tuple[str, ...]

    def write(self, path) -> None:
        atomic.write_text(path, "".join(u + "\n" for u in self.selected))


def read_selection(path) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def rank_select(table: ScoreTable, k: int, pass_index: int = 0) -> SelectionResult:
    """The ``k`` lowest-NRSE utterances, ascending; ties go to the smaller id."""
    if len(table) == 0:
        raise InputError("cannot select from an empty score table")
    if k < 0:
        raise InputError(f"k must be >= 0, got {k}")
    ordered = sorted(table.rows, key=lambda r: (r.nrse, r.utterance_id))
    return SelectionResult(pass_index, k, tuple(r.utterance_id for r in ordered[:k]))


def pseudo_label(spec: NetworkSpec, params: Parameters, features: np.ndarray) -> np.ndarray:
    """Frame-level argmax of the posteriors (ties to the lowest class index).

    ``features`` may be raw T x D frames or already context-stacked.
    """
    return forward(spec, params, network_input(spec, features)).argmax(axis=1)


# ----------------------------------------------------------------------------
# adaptation loop


@dataclass(frozen=True)
class PassConfig:
    k0: int = 4000
    delta_k: int = 1000
    num_passes: int = 4
    entropy: EntropyParams = EntropyParams()
    adapt: AdaptConfig = AdaptConfig()
    rescore_with_latest: bool = True

    @property
    def layer_index(self) -> int:
        return self.entropy.layer_index

    def validate(self) -> None:
        if self.k0 < 1:
            raise ConfigError(f"k0 must be >= 1, got {self.k0}")
        if self.num_passes < 1:
            raise ConfigError(f"num_passes must be >= 1, got {self.num_passes}")
        self.entropy.validate()
        self.adapt.validate()

    def k_for_pass(self, pass_index: int) -> int:
        return self.k0 + pass_index * self.delta_k


def relative_k_schedule(pool_size: int, k0_fraction: float, delta_fraction: float) -> tuple[int, int]:
    """Absolute (k0, delta_k) for a pool, e.g. 4000/+1000 of a 7861-file pool
    is about (0.51, 0.13)."""
    return max(1, math.ceil(k0_fraction * pool_size)), math.ceil(delta_fraction * pool_size)


@dataclass
class PassRecord:
    selection: SelectionResult
    metrics: dict
    checkpoint: Path | None = None
    scores: ScoreTable | None = None
    adapt_log: object = None


@dataclass
class LoopHistory:
    passes: list[PassRecord] = field(default_factory=list)
    baseline: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.passes)

    def metrics_rows(self) -> list[list]:
        rows = []
        for i, p in enumerate(self.passes):
            rows.append([i, p.selection.k, p.metrics.get("eval_matched_fer"),
                         p.metrics.get("eval_mismatched_fer")])
        return rows

    def write_metrics_csv(self, path) -> None:
        write_metrics_csv(path, self.metrics_rows())


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def write_metrics_csv(path, rows) -> None:
    atomic.write_csv(path, METRICS_HEADER, [[i, k, _fmt(m), _fmt(mm)] for i, k, m, mm in rows])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise FormatError(f"{path}: expected header {','.join(METRICS_HEADER)}")
        return [
            {"pass": int(r["pass"]), "k": int(r["k"]),
             "eval_matched_fer": float(r["eval_matched_fer"]) if r["eval_matched_fer"] else None,
             "eval_mismatched_fer": float(r["eval_mismatched_fer"]) if r["eval_mismatched_fer"] else None}
            for r in reader
        ]


def frame_set(spec: NetworkSpec, utts: Sequence[Utterance], labels=None) -> FrameSet:
    labels = [u.labels for u in utts] if labels is None else labels
    if any(l is None for l in labels):
        raise InputError("every utterance needs frame labels")
    return FrameSet.for_spec(spec, [u.features for u in utts], labels)


def evaluate_sets(model: Model, evals: dict[str, Sequence[Utterance]] | None) -> dict:
    """``{name}_fer`` for every named labeled evaluation set."""
    out = {}
    for name, utts in (evals or {}).items():
        if utts:
            out[f"{name}_fer"] = evaluate(model.spec, model.params, frame_set(model.spec, utts))[
                "frame_error_rate"]
    return out


def adaptation_pass(model: Model, labeled_train: Sequence[Utterance], pool: Sequence[Utterance],
                    pass_index: int, cfg: PassConfig, cv: Sequence[Utterance],
                    evals: dict[str, Sequence[Utterance]] | None = None,
                    scoring_model: Model | None = None):
    """One selection + pseudo-label + fine-tune step.

    ``scoring_model`` (default ``model``) computes NRSE and pseudo-labels;
    fine-tuning always starts from ``model``.  Returns
    ``(adapted model, SelectionResult, metrics, score table, adapt log)``.
    """
    cfg.validate()
    if not pool:
        raise InputError("empty adaptation pool")
    scorer = scoring_model or model
    table = score_utterances(scorer, pool, cfg.entropy)
    k = cfg.k_for_pass(pass_index)
    selection = rank_select(table, k, pass_index)
    adapted, metrics, adapt_log = adapt_on_selection(model, labeled_train, pool, selection, cfg, cv,
                                                     evals, scorer)
    log.info("pass %d: k=%d %s", pass_index, len(selection.selected),
             " ".join(f"{k}={v:.4f}" for k, v in metrics.items() if isinstance(v, float)))
    return adapted, selection, metrics, table, adapt_log


def adapt_on_selection(model: Model, labeled_train: Sequence[Utterance], pool: Sequence[Utterance],
                       selection: SelectionResult, cfg: PassConfig, cv: Sequence[Utterance],
                       evals: dict[str, Sequence[Utterance]] | None = None,
                       scoring_model: Model | None = None):
    """Pseudo-label the selected pool utterances and fine-tune on them plus
    ``labeled_train``.  Returns ``(adapted model, metrics, adapt log)``."""
    scorer = scoring_model or model
    by_id = {u.utterance_id: u for u in pool}
    missing = [uid for uid in selection.selected if uid not in by_id]
    if missing:
        raise InputError(f"selected utterance(s) not in pool: {', '.join(missing[:5])}")
    chosen = [by_id[uid] for uid in selection.selected]
    pseudo = [pseudo_label(scorer.spec, scorer.params, u.features) for u in chosen]

    train_feats = [u.features for u in labeled_train] + [u.features for u in chosen]
    train_labels = [u.labels for u in labeled_train] + pseudo
    adapt_set = FrameSet.for_spec(model.spec, train_feats, train_labels)
    cv_set = frame_set(model.spec, cv)
    adapt_cfg = replace(cfg.adapt, seed=cfg.adapt.seed + selection.pass_index)
    params, adapt_log = adapt_finetune(model.spec, model.params, adapt_set, cv_set, adapt_cfg)
    adapted = Model(model.spec, params)
    metrics = evaluate_sets(adapted, evals)
    metrics["k"] = len(selection.selected)
    metrics["cv_fer"] = adapt_log.best_cv_frame_error
    return adapted, metrics, adapt_log


def run_loop(model: Model, labeled_train: Sequence[Utterance], pool: Sequence[Utterance],
             cfg: PassConfig, cv: Sequence[Utterance],
             evals: dict[str, Sequence[Utterance]] | None = None,
             out_dir=None) -> LoopHistory:
    """``cfg.num_passes`` adaptation passes.  With ``out_dir`` each pass
    writes ``pass_<i>/{scores.csv, selection.txt, model.ents, adapt_log.csv}``
    and ``metrics.csv`` is rewritten after every pass."""
    cfg.validate()
    history = LoopHistory(baseline=evaluate_sets(model, evals))
    initial = model
    current = model
    out_dir = Path(out_dir) if out_dir is not None else None
    for i in range(cfg.num_passes):
        scorer = current if cfg.rescore_with_latest else initial
        current, selection, metrics, table, adapt_log = adaptation_pass(
            current, labeled_train, pool, i, cfg, cv, evals, scoring_model=scorer)
        record = PassRecord(selection, metrics, scores=table, adapt_log=adapt_log)
        if out_dir is not None:
            pdir = out_dir / f"pass_{i}"
            pdir.mkdir(parents=True, exist_ok=True)
            table.write_csv(pdir / "scores.csv")
            selection.write(pdir / "selection.txt")
            adapt_log.write_csv(pdir / "adapt_log.csv")
            record.checkpoint = pdir / "model.ents"
            save_checkpoint(record.checkpoint, Checkpoint(
                current.spec, current.params,
                {"pass": i, "k": len(selection.selected), "adapt": adapt_log.summary()}))
        history.passes.append(record)
        if out_dir is not None:
            history.write_metrics_csv(out_dir / "metrics.csv")
    return history

