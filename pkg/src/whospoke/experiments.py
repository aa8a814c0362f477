"""Experiment harnesses: curvature sweep for Hyper-SD and the positional ablation grid."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

from .hyper_sd import HyperSdConfig, evaluate_hyper_sd, fit_hyper_sd, prototype_report
from .metrics import evaluate_corpus
from .model import AsrConfig, token_accuracy, train_asr, transcribe_corpus

log = logging.getLogger(__name__)

REFERENCE_CURVATURE = 1.0

# (label, mode, ablation)
ABLATION_GRID = (
    ("ts_rope", "ts_rope", "full"),
    ("w/o query bias", "ts_rope", "no_query"),
    ("w/o query bias, turns", "ts_rope", "no_query_no_turns"),
    ("w/o query bias, turns, activity", "ts_rope", "no_query_no_turns_no_activity"),
    ("time-only rope", "time_only_rope", "full"),
    ("absolute", "absolute", "full"),
)


def curvature_sweep(train, test, base: HyperSdConfig = HyperSdConfig(), curvatures=(0.5, 1.0, 1.5),
                    checkpoint_dir=None) -> dict:
    """Train one model per curvature and report DER changes relative to ``c = 1``."""
    curvatures = sorted(set(curvatures) | {REFERENCE_CURVATURE})
    runs = {}
    for c in curvatures:
        res = fit_hyper_sd(train, replace(base, curvature=c))
        ev = evaluate_hyper_sd(res.model, test)
        ev["final_loss"] = res.history[-1] if res.history else None
        ev["min_prototype_distance"] = prototype_report(res.model.prototypes, c)["min_pairwise_distance"]
        runs[f"{c:g}"] = ev
        if checkpoint_dir is not None:
            res.model.save(Path(checkpoint_dir) / f"hyper_sd_c{c:g}.json")
        log.info("curvature %g: accuracy %.4f", c, ev["frame_accuracy"])
    ref = runs[f"{REFERENCE_CURVATURE:g}"]
    for ev in runs.values():
        ev["delta_der"] = {k: v - ref["der"][k] for k, v in ev["der"].items()}
        ev["delta_accuracy"] = ev["frame_accuracy"] - ref["frame_accuracy"]
    return {"reference_curvature": REFERENCE_CURVATURE, "runs": runs}


def format_curvature_table(report: dict) -> str:
    runs = report["runs"]
    collars = sorted(next(iter(runs.values()))["der"])
    head = f"{'c':>5} {'acc':>7} " + " ".join(f"DER@{k}".rjust(9) + f" dDER@{k}".rjust(10) for k in collars)
    lines = [head]
    for c, ev in runs.items():
        cells = " ".join(f"{ev['der'][k]:9.4f}{ev['delta_der'][k]:+10.4f}" for k in collars)
        lines.append(f"{c:>5} {ev['frame_accuracy']:7.4f} {cells}")
    return "\n".join(lines)


def ablation_grid(train, test, base: AsrConfig, grid=ABLATION_GRID, max_tokens: int = 128,
                  eval_noise: float = 0.0) -> list[dict]:
    """Train every positional variant with the same budget and seed; score the test split."""
    refs = {d.dialogue_id: d.transcript for d in test}
    rows = []
    for label, mode, ablation in grid:
        cfg = replace(base, mode=mode, ablation=ablation)
        res = train_asr(train, cfg)
        hyps = transcribe_corpus(res.model, test, max_tokens=max_tokens, noise=eval_noise, seed=base.seed)
        rep = evaluate_corpus(refs, hyps, approx=True)
        agg = rep["aggregate"]
        rows.append({
            "label": label,
            "mode": mode,
            "ablation": ablation,
            "final_loss": res.losses[-1][2] if res.losses else None,
            "train_token_accuracy": token_accuracy(res.model, train),
            "test_token_accuracy": token_accuracy(res.model, test),
            "cp_wer": agg["cp_wer"]["rate"],
            "tcp_wer": agg["tcp_wer"]["rate"],
            "orc_wer": agg["orc_wer"]["rate"],
            "tcorc_wer": agg["tcorc_wer"]["rate"],
            "der": {k: v["der"] for k, v in agg["der"].items()},
            "grad_check_error": res.grad_check_error,
        })
        log.info("%s: cp-wer %.4f", label, rows[-1]["cp_wer"])
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    lines = [f"{'variant':<34} {'CP-WER':>7} {'TCP-WER':>8} {'ORC-WER':>8} {'TCORC-WER':>10} {'tok-acc':>8}"]
    for r in rows:
        lines.append(
            f"{r['label']:<34} {100 * r['cp_wer']:7.2f} {100 * r['tcp_wer']:8.2f} "
            f"{100 * r['orc_wer']:8.2f} {100 * r['tcorc_wer']:10.2f} {r['test_token_accuracy']:8.4f}"
        )
    return "\n".join(lines)
