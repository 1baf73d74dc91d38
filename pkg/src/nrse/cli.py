"""Command-line front end.

Usage::

    nrse <command> [--config FILE] [--section.key VALUE ...] [command options]

Commands and what they write under ``paths.workdir``:

``synth``    ``corpus/``: WAVs, label files and one manifest per split
``extract``  ``features/<split>/<id>.ents`` and ``features/<split>.jsonl``
``train``    ``model/base.ents`` and ``model/train_log.csv``
``score``    ``score/<split>_scores.csv`` (NRSE of every utterance)
``select``   ``select/selection.txt`` (the ``passes.k0`` lowest scores)
``adapt``    ``adapt/model.ents``, ``adapt/adapt_log.csv``, ``adapt/metrics.csv``
``loop``     ``loop/pass_<i>/...`` and ``loop/metrics.csv``
``report``   ``report/`` (see :mod:`nrse.report`)

Exit status is 0 on success, 1 for configuration or input errors and 2 for
runtime failures.  Logs go to standard error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, dump_config, load_config
from .corpus import (SPLITS, Checkpoint, Manifest, ManifestEntry, load_checkpoint, load_features,
                     load_manifest, read_labels, read_wav, save_checkpoint, save_features,
                     synth_corpus, write_corpus, write_manifest)
from .errors import ConfigError, InputError
from .features import FeatureMatrix, gfb_extract
from .net import forward_with_taps, init_network, network_input, train
from .report import build_report
from .selection import (Model, ScoreTable, SelectionResult, Utterance, adapt_on_selection,
                        evaluate_sets, frame_set, rank_select, read_metrics_csv, read_selection,
                        run_loop, score_utterances, write_metrics_csv)
from . import atomic

log = logging.getLogger("nrse")

COMMANDS = ("synth", "extract", "train", "score", "select", "adapt", "loop", "report")
EVAL_SPLITS = ("eval_matched", "eval_mismatched")


# ----------------------------------------------------------------------------
# workdir helpers


class Workdir:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = cfg.workpath

    def source_manifest(self, split: str) -> Path:
        if split in self.cfg.manifests:
            return Path(self.cfg.manifests[split])
        return self.root / "corpus" / f"{split}.jsonl"

    def feature_manifest(self, split: str) -> Path:
        return self.root / "features" / f"{split}.jsonl"

    @property
    def base_model(self) -> Path:
        return self.root / "model" / "base.ents"

    def require(self, *paths: Path) -> None:
        missing = [str(p) for p in paths if not Path(p).exists()]
        if missing:
            raise InputError("missing input(s): " + ", ".join(missing))

    def utterances(self, split: str) -> list[Utterance]:
        path = self.feature_manifest(split)
        self.require(path)
        utts = []
        for e in load_manifest(path):
            fm, labels = load_features(e.feature_path)
            utts.append(Utterance(e.utterance_id, fm.frames, labels, e.condition))
        if not utts:
            raise InputError(f"{path}: no utterances")
        return utts

    def model(self, path=None) -> Model:
        path = Path(path) if path is not None else self.base_model
        self.require(path)
        ckpt = load_checkpoint(path)
        return Model(ckpt.spec, ckpt.params)

    def evals(self) -> dict[str, list[Utterance]]:
        return {s: self.utterances(s) for s in EVAL_SPLITS if self.feature_manifest(s).exists()}


# ----------------------------------------------------------------------------
# commands


def cmd_synth(cfg: ExperimentConfig, args) -> None:
    paths = write_corpus(synth_corpus(cfg.synth), cfg.workpath / "corpus")
    for split, p in paths.items():
        log.info("wrote %s", p)


def _extract_entry(entry: ManifestEntry, cfg: ExperimentConfig):
    if entry.feature_path is not None:
        fm, labels = load_features(entry.feature_path)
    else:
        audio = read_wav(entry.audio_path)
        fm = gfb_extract(audio, cfg.features)
        fm = FeatureMatrix(entry.utterance_id, fm.frames, fm.frame_period)
        labels = None
    if entry.label_path is not None:
        labels = read_labels(entry.label_path)
    if labels is not None and len(labels) != fm.num_frames:
        raise InputError(f"{entry.utterance_id}: {len(labels)} labels for {fm.num_frames} frames")
    return fm, labels


def cmd_extract(cfg: ExperimentConfig, args) -> None:
    wd = Workdir(cfg)
    splits = [args.split] if args.split else [s for s in SPLITS if wd.source_manifest(s).exists()]
    if not splits:
        raise InputError("no manifests found; run synth or set paths.manifests")
    # read and check every input before writing anything
    manifests = {}
    for split in splits:
        wd.require(wd.source_manifest(split))
        manifests[split] = load_manifest(wd.source_manifest(split))
    extracted = {split: [(e, *_extract_entry(e, cfg)) for e in m] for split, m in manifests.items()}
    for split, items in extracted.items():
        entries = []
        for e, fm, labels in items:
            out = wd.root / "features" / split / f"{e.utterance_id}.ents"
            save_features(out, fm, labels)
            entries.append(ManifestEntry(e.utterance_id, feature_path=out, condition=e.condition))
        write_manifest(wd.feature_manifest(split), Manifest(entries))
        log.info("%s: %d utterances", split, len(entries))


def cmd_train(cfg: ExperimentConfig, args) -> None:
    wd = Workdir(cfg)
    tr, cv = wd.utterances("train"), wd.utterances("cv")
    spec = cfg.build_spec().with_input_norm([u.features for u in tr])
    params, tlog = train(spec, init_network(spec, cfg.seed), frame_set(spec, tr), frame_set(spec, cv),
                         cfg.train)
    save_checkpoint(wd.base_model, Checkpoint(spec, params, tlog.summary()))
    tlog.write_csv(wd.root / "model" / "train_log.csv")
    log.info("trained: best cv fer %.4f at epoch %d (%s)", tlog.best_cv_frame_error,
             tlog.best_epoch, tlog.stop_reason)


def cmd_score(cfg: ExperimentConfig, args) -> None:
    wd = Workdir(cfg)
    split = args.split or "pool"
    model = wd.model(args.checkpoint)
    table = score_utterances(model, wd.utterances(split), cfg.entropy)
    out = wd.root / "score" / f"{split}_scores.csv"
    table.write_csv(out)
    log.info("scored %d utterances -> %s", len(table), out)


def cmd_select(cfg: ExperimentConfig, args) -> None:
    wd = Workdir(cfg)
    path = Path(args.scores) if args.scores else wd.root / "score" / "pool_scores.csv"
    wd.require(path)
    sel = rank_select(ScoreTable.read_csv(path), cfg.passes.k0)
    sel.write(wd.root / "select" / "selection.txt")
    log.info("selected %d of the lowest-NRSE utterances", len(sel.selected))


def cmd_adapt(cfg: ExperimentConfig, args) -> None:
    wd = Workdir(cfg)
    sel_path = Path(args.selection) if args.selection else wd.root / "select" / "selection.txt"
    wd.require(sel_path)
    ids = tuple(read_selection(sel_path))
    model = wd.model(args.checkpoint)
    pool, tr, cv = wd.utterances("pool"), wd.utterances("train"), wd.utterances("cv")
    evals = wd.evals()
    adapted, metrics, alog = adapt_on_selection(model, tr, pool, SelectionResult(0, len(ids), ids),
                                                cfg.pass_config(), cv, evals)
    out = wd.root / "adapt"
    save_checkpoint(out / "model.ents", Checkpoint(adapted.spec, adapted.params, alog.summary()))
    alog.write_csv(out / "adapt_log.csv")
    write_metrics_csv(out / "metrics.csv", [[0, len(ids), metrics.get("eval_matched_fer"),
                                             metrics.get("eval_mismatched_fer")]])
    log.info("adapted on %d selected utterances", len(ids))


def cmd_loop(cfg: ExperimentConfig, args) -> None:
    wd = Workdir(cfg)
    model = wd.model(args.checkpoint)
    pool, tr, cv = wd.utterances("pool"), wd.utterances("train"), wd.utterances("cv")
    out = wd.root / "loop"
    hist = run_loop(model, tr, pool, cfg.pass_config(), cv, wd.evals(), out)
    atomic.write_text(out / "config.json", dump_config(cfg))
    for i, k, matched, mismatched in hist.metrics_rows():
        log.info("P%d k=%d matched fer=%s mismatched fer=%s", i, k,
                 _fmt(matched), _fmt(mismatched))


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def _first_trace(model: Model, utts: list[Utterance], layer: int) -> np.ndarray:
    _, trace = forward_with_taps(model.spec, model.params, network_input(model.spec, utts[0].features),
                                 layer)
    return trace


def cmd_report(cfg: ExperimentConfig, args) -> None:
    wd = Workdir(cfg)
    loop_dir = wd.root / "loop"
    needed = [wd.base_model, loop_dir / "metrics.csv", wd.feature_manifest("pool")]
    needed += [wd.feature_manifest(s) for s in EVAL_SPLITS]
    wd.require(*needed)
    rows = [[r["pass"], r["k"], r["eval_matched_fer"], r["eval_mismatched_fer"]]
            for r in read_metrics_csv(loop_dir / "metrics.csv")]
    model = wd.model()
    pool = wd.utterances("pool")
    evals = wd.evals()
    tables = {}
    for layer in cfg.report.layers:
        tables[layer] = score_utterances(model, pool, replace(cfg.entropy, layer_index=layer))
    layer = cfg.entropy.layer_index
    traces = {"matched": _first_trace(model, evals["eval_matched"], layer),
              "mismatched": _first_trace(model, evals["eval_mismatched"], layer)}
    rep = build_report(tables, rows, wd.root / "report", traces, layer,
                       baseline=evaluate_sets(model, evals), neurons=cfg.report.heatmap_neurons)
    for c in rep.correlations:
        log.info("layer %d: r=%.3f (n=%d)", c.layer, c.r, c.n)


HANDLERS = {
    "synth": cmd_synth, "extract": cmd_extract, "train": cmd_train, "score": cmd_score,
    "select": cmd_select, "adapt": cmd_adapt, "loop": cmd_loop, "report": cmd_report,
}


# ----------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nrse", description="Entropy-based data selection for unsupervised model adaptation.",
        epilog="Any config field can be overridden as --section.key VALUE (VALUE parsed as JSON "
               "when possible), e.g. --train.lr0 0.01 --paths.workdir run1.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    p.add_argument("--split", help="split for extract/score (default: all / pool)")
    p.add_argument("--checkpoint", help="model for score/adapt/loop (default: model/base.ents)")
    p.add_argument("--scores", help="score table for select")
    p.add_argument("--selection", help="selection list for adapt")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_overrides(extra: list[str]) -> list[tuple[str, str]]:
    """``['--a.b', '1', '--c.d=x']`` -> ``[('a.b', '1'), ('c.d', 'x')]``."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override --{key} needs a value")
            value = extra[i + 1]
            i += 2
        out.append((key, value))
    return out


def main(argv=None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = load_config(args.config, parse_overrides(extra))
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
            return 0
        HANDLERS[args.command](cfg, args)
    except (ConfigError, InputError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
