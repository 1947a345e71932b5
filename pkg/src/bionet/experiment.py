"""Desk-scale phantom experiment driven through the command-line interface.

Runs: phantom dataset -> stage 1 -> stage 2 for every ablation mode -> report,
plus untrained (zero-epoch) baselines for each mode.
"""
from __future__ import annotations

import contextlib
import io
import json
import time
from pathlib import Path

from .cli import load_bundle, main
from .metrics import MetricsReport
from .networks import load_checkpoint, parameter_digest
from .phantom import read_dataset
from .training import ABLATION_MODES, TrainConfig, TrainLog, evaluate_model


def _run(argv: list[str]) -> str:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"command failed ({code}): bionet {' '.join(map(str, argv))}")
    return buf.getvalue()


def run_desk_experiment(out_dir, seed: int = 0, n_train: int = 64, n_test: int = 16,
                        modes=ABLATION_MODES, size: int = 128) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = out / "data"
    bio_cfg = out / "desk_bio.txt"
    cascade_cfg = out / "desk_cascade.txt"
    TrainConfig.desk("bio").save(bio_cfg)
    TrainConfig.desk("cascade").save(cascade_cfg)
    timings = {}

    t0 = time.perf_counter()
    _run(["phantom", "--out", data, "--train", n_train, "--test", n_test,
          "--height", size, "--width", size, "--seed", seed])
    _run(["train-bio", "--data", data, "--config", bio_cfg, "--out", out / "bio.pt", "--seed", seed])
    timings["bio"] = time.perf_counter() - t0
    bio_net, bio_payload = load_checkpoint(out / "bio.pt")

    runs = {}
    for mode in modes:
        t = time.perf_counter()
        run_dir = out / "runs" / mode.replace("+", "_")
        _run(["train", "--data", data, "--config", cascade_cfg, "--bio", out / "bio.pt",
              "--mode", mode, "--out", run_dir, "--seed", seed])
        timings[mode] = time.perf_counter() - t
        runs[mode] = run_dir

    table = _run(["report", "--data", data, "--runs", *[runs[m] for m in modes], "--out", out / "report"])

    test = list(read_dataset(data, "test"))
    untrained = {}
    for mode in modes:
        run_dir = out / "untrained" / mode.replace("+", "_")
        _run(["train", "--data", data, "--config", cascade_cfg, "--bio", out / "bio.pt",
              "--mode", mode, "--out", run_dir, "--seed", seed, "--epochs", 0])
        untrained[mode] = evaluate_model(load_bundle(run_dir), test)

    bio_log = TrainLog.load(out / "bio_log.json")
    logs = {m: TrainLog.load(runs[m] / "trainlog.json") for m in modes}
    reports = {m: MetricsReport.from_dict(json.loads((runs[m] / "metrics.json").read_text())) for m in modes}
    result = {
        "out": out,
        "bio_val_mae": bio_payload["extra"]["val_mae"],
        "bio_digest": bio_payload["digest"],
        "bio_digest_reloaded": parameter_digest(bio_net),
        "bio_log": bio_log,
        "logs": logs,
        "reports": reports,
        "untrained": untrained,
        "table": table.strip(),
        "table_tsv": (out / "report" / "table.tsv").read_text(),
        "timings": timings,
    }
    return result
