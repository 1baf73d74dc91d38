"""Acceptance suite: one verdict line per criterion, printed in the pytest summary.

The desk-scale criteria (3 to 7) share one seeded run per seed of the full
protocol in :mod:`nrse.experiment`; the run is cached for the session.
Frame error rate stands in for word error rate throughout.
"""

import contextlib
import io
import json
import shutil
import time
import wave

import numpy as np
import pytest
from scipy import stats

from nrse.cli import main
from nrse.corpus import Checkpoint, load_checkpoint, load_features, save_checkpoint, save_features
from nrse.entropy import window_entropy
from nrse.errors import FormatError
from nrse.experiment import DeskProtocol, run_seed
from nrse.features import FeatureMatrix
from nrse.net import init_network, tfcnn_lite_spec

from conftest import record
from helpers import finite_difference_check, tiny_dense_spec, tiny_tfcnn_spec

SEEDS = (1, 2, 3, 4, 5)


@pytest.fixture(scope="session")
def desk():
    return {s: run_seed(s, DeskProtocol()) for s in SEEDS}


# ----------------------------------------------------------------------------
# 1. entropy unit suite


def test_c1_entropy_unit_suite():
    t0 = time.perf_counter()
    constant = window_entropy([0.37] * 91)[0]
    split = window_entropy([0.1] * 45 + [0.9] * 46)[0]
    uniform = window_entropy(np.random.default_rng(0).random(10_000), window=10_000)[0]

    # 10^4 random windows drawn from shapes that stress the binning: uniform,
    # a few distinct levels, values pinned to the range ends, and beta mass
    # piled near 0 or 1
    rng = np.random.default_rng(1)
    outs = []
    kinds = 0
    for i in range(10_000):
        kind = i % 5
        n = int(rng.integers(2, 200))
        if kind == 0:
            x = rng.random(n)
        elif kind == 1:
            x = rng.choice(rng.random(int(rng.integers(1, 6))), n)
        elif kind == 2:
            x = rng.choice([0.0, 1.0, np.nextafter(1.0, 0), 1 / 32], n)
        elif kind == 3:
            x = rng.beta(0.05, 0.05, n)
        else:
            x = np.clip(rng.normal(0.5, rng.uniform(0, 2), n), 0, 1)
        h = window_entropy(x, window=n, hop=1)
        outs.append(h)
        kinds += 1
    allv = np.concatenate(outs)
    lo, hi = float(allv.min()), float(allv.max())
    elapsed = time.perf_counter() - t0

    ok = (constant == 0.0 and abs(split - 0.2000) <= 1e-4 and uniform >= 0.995
          and lo >= 0.0 and hi <= 1.0 and kinds == 10_000 and elapsed < 10)
    record(1, ok, f"constant={constant:.1f}, 45/46 split={split:.6f} (target 0.2000 +- 1e-4), "
                  f"uniform 1e4={uniform:.5f} (>= 0.995), fuzz range [{lo:.4f}, {hi:.4f}] over "
                  f"{kinds} windows, {elapsed:.2f} s (< 10 s)")
    assert ok


# ----------------------------------------------------------------------------
# 2. gradient check


def test_c2_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(50):
        if i % 2 == 0:
            hidden = tuple(int(h) for h in rng.integers(2, 7, size=rng.integers(1, 4)))
            spec = tiny_dense_spec(int(rng.integers(2, 7)), hidden, int(rng.integers(2, 5)))
        else:
            spec = tiny_tfcnn_spec(bands=int(rng.integers(6, 9)), context=int(rng.integers(5, 7)),
                                   hidden=tuple(int(h) for h in rng.integers(2, 6, size=rng.integers(1, 3))),
                                   classes=int(rng.integers(2, 5)))
        worst = max(worst, finite_difference_check(spec, seed=i, l2=float(rng.choice([0.0, 0.01]))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    record(2, ok, f"50 nets (25 dense, 25 TFCNN heads), max relative error {worst:.2e} (< 1e-4), "
                  f"{elapsed:.1f} s (< 60 s)")
    assert ok


# ----------------------------------------------------------------------------
# 3 to 7. desk-scale protocol


def test_c3_mismatched_nrse_higher(desk):
    matched = np.concatenate([desk[s].nrse_matched for s in SEEDS])
    heavy = np.concatenate([desk[s].nrse_heavy for s in SEEDS])
    # the heavy condition corrupts the same utterances, so the test is paired
    pooled = stats.ttest_rel(heavy, matched, alternative="greater")
    seed_diffs = np.array([desk[s].nrse_heavy.mean() - desk[s].nrse_matched.mean() for s in SEEDS])
    by_seed = stats.ttest_1samp(seed_diffs, 0.0, alternative="greater")
    n = {desk[s].nrse_matched.size for s in SEEDS}
    ok = pooled.pvalue < 0.05 and by_seed.pvalue < 0.05 and n == {100}
    record(3, ok, f"mean NRSE heavy {heavy.mean():.4f} vs matched {matched.mean():.4f}; paired "
                  f"one-sided p={pooled.pvalue:.2e} (500 pairs), across-seed p={by_seed.pvalue:.2e}; "
                  f"per-seed diffs {np.round(seed_diffs, 4).tolist()}")
    assert ok


def test_c4_correlation(desk):
    rs = [desk[s].pool_r for s in SEEDS]
    sizes = {len(desk[s].pool_scores) for s in SEEDS}
    cpu = sum(desk[s].timings["score_cpu_s"] for s in SEEDS)
    hits = sum(r >= 0.2 for r in rs)
    ok = hits >= 4 and sizes == {200} and cpu < 600
    record(4, ok, f"Pearson r (layer 3 NRSE vs frame error, 200-utterance pool) = "
                  f"{[round(r, 3) for r in rs]}, {hits}/5 >= 0.2 (need 4); "
                  f"CPU incl. synthesis and training {cpu:.0f} s (< 600 s)")
    assert ok


def test_c5_selection_vs_all_data(desk):
    sel = [desk[s].selected_half["eval_mismatched_fer"] for s in SEEDS]
    alld = [desk[s].all_data["eval_mismatched_fer"] for s in SEEDS]
    base = [desk[s].baseline["eval_mismatched_fer"] for s in SEEDS]
    wins = sum(a <= b for a, b in zip(sel, alld))
    both = sum(a < c and b < c for a, b, c in zip(sel, alld, base))
    ok = wins >= 3 and both == 5
    record(5, ok, "mismatched fer base/selected(k=50%)/all: "
                  + "; ".join(f"s{s} {c:.4f}/{a:.4f}/{b:.4f}" for s, a, b, c in zip(SEEDS, sel, alld, base))
                  + f"; selected <= all in {wins}/5 (need 3), both < base in {both}/5 (need 5)")
    assert ok


def test_c6_iteration_helps(desk):
    p0 = [desk[s].loop.passes[0].metrics["eval_mismatched_fer"] for s in SEEDS]
    p2 = [desk[s].loop.passes[2].metrics["eval_mismatched_fer"] for s in SEEDS]
    ks = [p.selection.k for p in desk[SEEDS[0]].loop.passes]
    sizes = [len(p.selection.selected) for p in desk[SEEDS[0]].loop.passes]
    hits = sum(b <= a for a, b in zip(p0, p2))
    ok = hits >= 4
    record(6, ok, f"k schedule {ks} (selected {sizes}); mismatched fer P0 -> P2: "
                  + ", ".join(f"{a:.4f}->{b:.4f}" for a, b in zip(p0, p2)) + f"; P2 <= P0 in {hits}/5 (need 4)")
    assert ok


def test_c7_retention(desk):
    base = [desk[s].baseline["eval_matched_fer"] for s in SEEDS]
    final = [desk[s].loop.passes[-1].metrics["eval_matched_fer"] for s in SEEDS]
    rel = [(f - b) / b for b, f in zip(base, final)]
    ok = all(r <= 0.10 for r in rel)
    record(7, ok, "matched fer base -> after loop: "
                  + ", ".join(f"{b:.4f}->{f:.4f} ({100 * r:+.1f}%)" for b, f, r in zip(base, final, rel))
                  + " (each <= +10% relative)")
    assert ok


# ----------------------------------------------------------------------------
# 8 to 10. CLI, determinism and formats


SMALL = {
    "version": 1,
    "synth": {"n_train": 8, "n_cv": 3, "n_eval_matched": 4, "n_pool": 10, "n_eval_mismatched": 4,
              "duration": [1.5, 2.0]},
    "network": {"name": "tfcnn-lite", "options": {"hidden": [16, 16, 16, 16, 16]}},
    "train": {"max_epochs": 3},
    "adapt": {"max_epochs": 2},
    "passes": {"k0": 5, "delta_k": 1, "num_passes": 3},
}


def cli(cfg, workdir, *commands):
    return [main([c, "--config", str(cfg), "--paths.workdir", str(workdir)]) for c in commands]


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("accept_cli")
    cfg = base / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    codes = cli(cfg, base / "a", "synth", "extract", "train")
    shutil.copytree(base / "a", base / "b")
    codes += cli(cfg, base / "a", "loop", "report")
    codes += cli(cfg, base / "b", "loop")
    return base, codes


def test_c8_layer_sweep_report(cli_runs):
    base, codes = cli_runs
    lines = (base / "a" / "report" / "correlations.csv").read_text().splitlines()
    rows = [line.split(",") for line in lines[1:]]
    layers = [int(r[0]) for r in rows]
    rs = [float(r[1]) for r in rows]
    ok = (all(c == 0 for c in codes) and lines[0] == "layer,r,n" and layers == [2, 3, 4, 5]
          and all(-1 <= r <= 1 for r in rs))
    record(8, ok, f"report correlation rows for layers {layers} with r = {[round(r, 3) for r in rs]}"
                  f" (all in [-1, 1]); command exit codes {codes}")
    assert ok


def test_c9_loop_determinism(cli_runs):
    base, _ = cli_runs
    compared, differing = 0, []
    for i in range(SMALL["passes"]["num_passes"]):
        for name in ("scores.csv", "selection.txt", "model.ents"):
            a = (base / "a" / "loop" / f"pass_{i}" / name).read_bytes()
            b = (base / "b" / "loop" / f"pass_{i}" / name).read_bytes()
            compared += 1
            if a != b:
                differing.append(f"pass_{i}/{name}")
    ok = not differing and compared == 9
    record(9, ok, f"two loop runs: {compared} score tables, selection lists and checkpoints compared, "
                  f"differing: {differing or 'none'}")
    assert ok


def test_c10_formats(cli_runs, tmp_path):
    base, _ = cli_runs
    checks = {}
    rng = np.random.default_rng(10)

    spec = tfcnn_lite_spec()
    params = init_network(spec, 3)
    params.arrays[0].flat[:4] = [np.float32(-0.0), np.float32(1e-45), np.float32(3.4e38), np.float32(-1.5)]
    save_checkpoint(tmp_path / "m.ents", Checkpoint(spec, params, {"note": "x"}))
    back = load_checkpoint(tmp_path / "m.ents")
    checks["checkpoint roundtrip"] = back.spec == spec and back.params.identical_to(params)

    frames = rng.random((37, 40)).astype(np.float32)
    labels = rng.integers(0, 8, 37)
    save_features(tmp_path / "f.ents", FeatureMatrix("u", frames), labels)
    fm, lab = load_features(tmp_path / "f.ents")
    checks["feature roundtrip"] = (fm.frames.tobytes() == frames.tobytes()
                                   and np.array_equal(lab, labels) and fm.utterance_id == "u")

    # malformed WAV: 8-bit PCM
    with wave.open(str(tmp_path / "bad.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(1)
        w.setframerate(16000)
        w.writeframes(bytes(1600))
    (tmp_path / "wav.jsonl").write_text(json.dumps({"utterance_id": "b", "audio_path": "bad.wav"}) + "\n")
    (tmp_path / "man.jsonl").write_text('{"utterance_id": "b", "audio_path": "bad.wav"}\n{"oops"\n')

    def run_quiet(argv):
        err = io.StringIO()
        with contextlib.redirect_stderr(err):
            code = main(argv)
        return code, err.getvalue()

    out = tmp_path / "w_wav"
    code, err = run_quiet(["extract", "--split", "train", "--paths.workdir", str(out),
                           "--paths.manifests", json.dumps({"train": str(tmp_path / "wav.jsonl")})])
    checks["bad WAV -> sample width error, no output"] = code == 1 and "sample width" in err and not out.exists()

    out = tmp_path / "w_man"
    code, err = run_quiet(["extract", "--split", "train", "--paths.workdir", str(out),
                           "--paths.manifests", json.dumps({"train": str(tmp_path / "man.jsonl")})])
    checks["bad manifest -> line-numbered error, no output"] = (code == 1 and "man.jsonl:2" in err
                                                               and not out.exists())

    bad = tmp_path / "bad.ents"
    bad.write_bytes(b"XXXX" + (tmp_path / "m.ents").read_bytes()[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(bad)
    work = tmp_path / "w_ck"
    shutil.copytree(base / "a" / "features", work / "features")
    code, err = run_quiet(["score", "--split", "cv", "--paths.workdir", str(work),
                           "--checkpoint", str(bad)])
    checks["bad checkpoint -> magic error, no output"] = (code == 1 and "magic" in err
                                                         and not (work / "score").exists())
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    record(10, ok, f"{len(checks) - len(failed)}/{len(checks)} format checks passed"
                   + (f"; failed: {failed}" if failed else f" ({', '.join(checks)})"))
    assert ok
