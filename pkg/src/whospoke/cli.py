"""Command-line driver: corpus synthesis, training, evaluation and inspection dumps.

Every subcommand reads optional YAML (``--config``), then dotted overrides such
as ``--asr.stage2_steps 500``, then its named flags, and writes the resolved
configuration as ``resolved_config.yaml`` next to its outputs.
"""

from __future__ import annotations

import copy
import csv
import functools
import json
import logging
import os
from pathlib import Path

import click
import numpy as np
import yaml

from .errors import NumericalError, OracleMismatchError
from .synth import SPLITS, CorpusConfig, format_statistics_table, load_corpus, write_corpus

log = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_ORACLE = 4
SNAPSHOT_NAME = "resolved_config.yaml"
LOG_LEVEL_ENV = "WHOSPOKE_LOG_LEVEL"
EXTRA_ARGS = {"ignore_unknown_options": True, "allow_extra_args": True}


# -- config resolution -----------------------------------------------------------

def _coerce(old, new, key: str):
    """Convert ``new`` to the type of the default ``old`` where that is unambiguous."""
    if old is None or new is None:
        return new
    try:
        if isinstance(old, bool):
            if not isinstance(new, bool):
                raise ValueError
            return new
        if isinstance(old, int) and not isinstance(new, bool):
            if float(new) != int(float(new)):
                raise ValueError
            return int(float(new))
        if isinstance(old, float) and not isinstance(new, bool):
            return float(new)
        if isinstance(old, list):
            return list(new) if isinstance(new, (list, tuple)) else [new]
        if isinstance(old, str):
            return str(new)
    except (TypeError, ValueError):
        raise click.UsageError(f"bad value {new!r} for {key} (expected {type(old).__name__})") from None
    return new


def set_dotted(cfg: dict, key: str, value) -> None:
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise click.UsageError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise click.UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = _coerce(node[parts[-1]], value, key)


def _flatten(tree: dict, prefix: str = ""):
    for k, v in tree.items():
        if isinstance(v, dict) and v:
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def parse_overrides(args: list[str]) -> list[tuple[str, object]]:
    """``--a.b value`` / ``--a.b=value`` pairs; values are parsed as YAML scalars."""
    out, i = [], 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or len(arg) == 2:
            raise click.UsageError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        elif i + 1 < len(args):
            raw = args[i + 1]
            i += 2
        else:
            raise click.UsageError(f"missing value for {arg}")
        out.append((key.replace("-", "_"), yaml.safe_load(raw)))
    return out


def resolve_config(defaults: dict, config_path, overrides, flags: dict) -> dict:
    """Defaults, then the config file, then dotted overrides, then named flags."""
    cfg = copy.deepcopy(defaults)
    if config_path is not None:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise click.UsageError(f"cannot parse {config_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise click.UsageError(f"{config_path}: top level must be a mapping")
        for key, value in _flatten(loaded):
            set_dotted(cfg, key, value)
    for key, value in overrides:
        set_dotted(cfg, key, value)
    for key, value in flags.items():
        if value is not None:
            set_dotted(cfg, key, value)
    return cfg


def write_snapshot(cfg: dict, directory) -> Path:
    path = Path(directory) / SNAPSHOT_NAME
    path.write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
    return path


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise click.UsageError("missing required setting(s): " + ", ".join(f"--{k.replace('_', '-')}" for k in missing))


def _without_seed(d: dict) -> dict:
    return {k: v for k, v in d.items() if k != "seed"}


def _emit_json(obj, out) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out is None:
        click.echo(text, nl=False)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _load_corpus_or_fail(path):
    p = Path(path)
    if not (p / "manifest.json").exists() and not (p.is_file() and p.name.endswith(".json")):
        raise click.UsageError(f"no corpus manifest at {path}")
    return load_corpus(p)


def _eval_split(corpus):
    for split in ("test", "dev"):
        if corpus.splits.get(split):
            return corpus.splits[split]
    raise click.UsageError("corpus has no test or dev dialogues to evaluate on")


def guarded(fn):
    """Map pipeline failures onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericalError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            raise SystemExit(EXIT_NUMERICAL) from None
        except OracleMismatchError as exc:
            click.echo(f"oracle mismatch: {exc}", err=True)
            raise SystemExit(EXIT_ORACLE) from None
        except (ValueError, OSError, KeyError) as exc:
            click.echo(f"error: {exc}", err=True)
            raise SystemExit(EXIT_USAGE) from None

    return wrapper


def common_options(fn):
    fn = click.option("--seed", type=int, default=None, help="Global seed for every random stream.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                      help="YAML config; any key can also be overridden with --dotted.key VALUE.")(fn)
    return fn


@click.group()
def main():
    """Synthetic who-spoke-what-when lab."""
    level = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# -- synth -------------------------------------------------------------------------

def synth_defaults() -> dict:
    corpus = CorpusConfig().to_dict()
    corpus["dialogue"] = _without_seed(corpus["dialogue"])
    return {"out": None, "seed": 0, "corpus": _without_seed(corpus)}


@main.command(context_settings=EXTRA_ARGS)
@common_options
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--overlap", type=float, default=None, help="Target overlap ratio.")
@click.option("--speakers", type=click.IntRange(1, 4), default=None, help="Fixed speakers per dialogue.")
@click.option("--num-train", type=click.IntRange(0), default=None)
@click.option("--num-test", type=click.IntRange(0), default=None)
@click.option("--duration", type=float, default=None, help="Dialogue length in seconds.")
@click.pass_context
@guarded
def synth(ctx, config_path, seed, out, overlap, speakers, num_train, num_test, duration):
    """Generate a synthetic corpus and print its statistics table."""
    cfg = resolve_config(synth_defaults(), config_path, parse_overrides(ctx.args), {
        "out": out, "seed": seed, "corpus.dialogue.overlap_ratio": overlap,
        "corpus.min_speakers": speakers, "corpus.max_speakers": speakers,
        "corpus.num_train": num_train, "corpus.num_test": num_test, "corpus.dialogue.duration": duration,
    })
    _require(cfg, "out")
    from .synth import generate_corpus

    corpus = generate_corpus(CorpusConfig.from_dict({**cfg["corpus"], "seed": cfg["seed"]}))
    out_dir = Path(cfg["out"])
    manifest = write_corpus(corpus, out_dir)
    write_snapshot(cfg, out_dir)
    stats = json.loads(manifest.read_text(encoding="utf-8"))["statistics"]
    click.echo(format_statistics_table({s: stats[s] for s in SPLITS if stats[s]["dialogues"]}))


# -- train-sd ------------------------------------------------------------------------

def sd_defaults() -> dict:
    from .hyper_sd import HyperSdConfig

    return {"corpus": None, "out": None, "seed": 0, "sweep": [], "der_collars": [0.0, 0.25],
            "sd": _without_seed(HyperSdConfig().to_dict())}


@main.command("train-sd", context_settings=EXTRA_ARGS)
@common_options
@click.option("--corpus", type=click.Path(), default=None, help="Corpus directory written by synth.")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--epochs", type=click.IntRange(0), default=None)
@click.option("--curvature", type=float, multiple=True,
              help="Ball curvature; repeat to run a sweep reported against c = 1.")
@click.pass_context
@guarded
def train_sd(ctx, config_path, seed, corpus, out, epochs, curvature):
    """Train the hyperbolic diarization classifier and report held-out DER and accuracy."""
    from .experiments import curvature_sweep, format_curvature_table
    from .hyper_sd import HyperSD, HyperSdConfig, evaluate_hyper_sd, fit_hyper_sd, prototype_report

    flags = {"corpus": corpus, "out": out, "seed": seed, "sd.epochs": epochs}
    if len(curvature) == 1:
        flags["sd.curvature"] = curvature[0]
    elif curvature:
        flags["sweep"] = list(curvature)
    cfg = resolve_config(sd_defaults(), config_path, parse_overrides(ctx.args), flags)
    _require(cfg, "corpus", "out")
    data = _load_corpus_or_fail(cfg["corpus"])
    train, test = data.splits["train"], _eval_split(data)
    if not train:
        raise click.UsageError("corpus has no training dialogues")
    L, _, F = train[0].layer_stack.shape
    cfg["sd"]["num_layers"], cfg["sd"]["feature_dim"] = int(L), int(F)
    sd_cfg = HyperSdConfig(**{**cfg["sd"], "seed": cfg["seed"]})
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out_dir)
    if cfg["sweep"]:
        report = curvature_sweep(train, test, sd_cfg, cfg["sweep"], checkpoint_dir=out_dir)
        _emit_json(report, out_dir / "sweep.json")
        click.echo(format_curvature_table(report))
        return
    init = prototype_report(HyperSD(sd_cfg).prototypes, sd_cfg.curvature)
    res = fit_hyper_sd(train, sd_cfg)
    res.model.save(out_dir / "hyper_sd.json")
    metrics = evaluate_hyper_sd(res.model, test, tuple(cfg["der_collars"]))
    metrics.update({
        "curvature": sd_cfg.curvature,
        "loss_history": res.history,
        "steps": res.steps,
        "min_prototype_distance": {
            "init": init["min_pairwise_distance"],
            "final": prototype_report(res.model.prototypes, sd_cfg.curvature)["min_pairwise_distance"],
        },
    })
    _emit_json(metrics, out_dir / "metrics.json")
    click.echo(f"frame accuracy {metrics['frame_accuracy']:.4f}  "
               + "  ".join(f"DER@{k} {v:.4f}" for k, v in metrics["der"].items()))


# -- train-asr ----------------------------------------------------------------------

def asr_defaults() -> dict:
    from .model import AsrConfig

    return {"corpus": None, "out": None, "seed": 0, "sd_checkpoint": None, "stage2_only": False,
            "max_tokens": 128, "eval_noise": 0.0, "asr": _without_seed(AsrConfig().to_dict())}


@main.command("train-asr", context_settings=EXTRA_ARGS)
@common_options
@click.option("--corpus", type=click.Path(), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--mode", type=click.Choice(["ts_rope", "time_only_rope", "absolute"]), default=None)
@click.option("--ablation", type=click.Choice(["full", "no_query", "no_query_no_turns",
                                                "no_query_no_turns_no_activity"]), default=None)
@click.option("--stage2-only/--two-stage", default=None, help="Skip the single-speaker stage.")
@click.option("--steps", type=click.IntRange(0), default=None, help="Stage-2 optimizer steps.")
@click.option("--sd-checkpoint", type=click.Path(), default=None,
              help="Hyper-SD checkpoint whose predicted activity replaces ground truth.")
@click.pass_context
@guarded
def train_asr_cmd(ctx, config_path, seed, corpus, out, mode, ablation, stage2_only, steps, sd_checkpoint):
    """Train the structured-transcript model and decode the held-out split."""
    from .hyper_sd import HyperSD
    from .model import AsrConfig, StructuredAsr, token_accuracy, train_asr, transcribe_corpus
    from .transcript import write_transcript_jsonl

    cfg = resolve_config(asr_defaults(), config_path, parse_overrides(ctx.args), {
        "corpus": corpus, "out": out, "seed": seed, "asr.mode": mode, "asr.ablation": ablation,
        "stage2_only": stage2_only, "asr.stage2_steps": steps, "sd_checkpoint": sd_checkpoint,
    })
    _require(cfg, "corpus", "out")
    data = _load_corpus_or_fail(cfg["corpus"])
    train, test = data.splits["train"], _eval_split(data)
    cfg["asr"]["feature_dim"] = int(train[0].frames.shape[1]) if train else cfg["asr"]["feature_dim"]
    cfg["asr"]["frame_rate"] = int(data.config.dialogue.frame_rate)
    try:
        asr_cfg = AsrConfig(**{**cfg["asr"], "seed": cfg["seed"]})
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    source = None
    if cfg["sd_checkpoint"]:
        if not Path(cfg["sd_checkpoint"]).is_file():
            raise click.UsageError(f"missing checkpoint {cfg['sd_checkpoint']}")
        sd = HyperSD.load(cfg["sd_checkpoint"])
        source = lambda d: sd.infer_activity(d.layer_stack)  # noqa: E731
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out_dir)
    res = train_asr(train, asr_cfg, StructuredAsr(asr_cfg), cfg["stage2_only"], source)
    res.model.save(out_dir / "asr.json")
    with open(out_dir / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "stage", "loss"])
        writer.writerows([(step, stage, repr(loss)) for step, stage, loss in res.losses])
    hyps = transcribe_corpus(res.model, test, source, cfg["max_tokens"], cfg["eval_noise"], cfg["seed"])
    write_transcript_jsonl(sorted(hyps.items()), out_dir / "hypotheses.jsonl")
    write_transcript_jsonl([(d.dialogue_id, d.transcript) for d in test], out_dir / "references.jsonl")
    summary = {
        "mode": asr_cfg.mode,
        "ablation": asr_cfg.ablation,
        "steps": len(res.losses),
        "final_loss": res.losses[-1][2] if res.losses else None,
        "grad_check_error": res.grad_check_error,
        "test_token_accuracy": token_accuracy(res.model, test),
    }
    _emit_json(summary, out_dir / "summary.json")
    click.echo(json.dumps(summary, sort_keys=True))


# -- eval -------------------------------------------------------------------------------

def eval_defaults() -> dict:
    return {"ref": None, "hyp": None, "out": None, "seed": 0, "collar": 0.5, "der_collars": [0.0, 0.25],
            "approx": False, "oracle": False, "oracle_max_streams": 5, "oracle_max_utterances": 6}


@main.command("eval", context_settings=EXTRA_ARGS)
@common_options
@click.option("--ref", type=click.Path(), default=None, help="Reference transcripts (JSONL).")
@click.option("--hyp", type=click.Path(), default=None, help="Hypothesis transcripts (JSONL).")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Report path; stdout if omitted.")
@click.option("--collar", type=float, default=None, help="Time collar in seconds for TCP/TCORC (default 0.5).")
@click.option("--approx/--exact", default=None, help="Allow heuristic assignment above the exact-search caps.")
@click.option("--oracle", is_flag=True, default=None, help="Cross-check assignment solvers by brute force.")
@click.pass_context
@guarded
def eval_cmd(ctx, config_path, seed, ref, hyp, out, collar, approx, oracle):
    """Score hypotheses with CP/TCP/ORC/TCORC-WER and DER."""
    from .metrics import evaluate_corpus, oracle_cross_check
    from .transcript import read_transcript_jsonl

    cfg = resolve_config(eval_defaults(), config_path, parse_overrides(ctx.args), {
        "ref": ref, "hyp": hyp, "out": out, "seed": seed, "collar": collar, "approx": approx,
        "oracle": oracle or None,
    })
    _require(cfg, "ref", "hyp")
    for key in ("ref", "hyp"):
        if not Path(cfg[key]).is_file():
            raise click.UsageError(f"missing {key} file {cfg[key]}")
    refs, hyps = read_transcript_jsonl(cfg["ref"]), read_transcript_jsonl(cfg["hyp"])
    report = evaluate_corpus(refs, hyps, cfg["collar"], tuple(cfg["der_collars"]), cfg["approx"])
    if cfg["out"] is not None:
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        write_snapshot(cfg, Path(cfg["out"]).parent)
    mismatches = []
    if cfg["oracle"]:
        mismatches = oracle_cross_check(refs, hyps, cfg["collar"], cfg["oracle_max_streams"],
                                        cfg["oracle_max_utterances"])
        report["oracle"] = {"mismatches": mismatches}
    _emit_json(report, cfg["out"])
    for fid in report["unmatched_hypothesis_ids"]:
        click.echo(f"warning: hypothesis {fid} has no reference", err=True)
    for fid in report["missing_hypothesis_ids"]:
        click.echo(f"warning: reference {fid} has no hypothesis", err=True)
    if mismatches:
        raise OracleMismatchError(f"{len(mismatches)} solver/oracle disagreement(s)")


# -- inspection dumps ------------------------------------------------------------------

def load_activity(path) -> np.ndarray:
    """Activity matrix ``[T, S]`` from .npy, a corpus .npz, or comma-separated text; padded to 4 speakers."""
    from .ts_rope import NUM_SPEAKERS

    p = Path(path)
    if p.suffix == ".npy":
        act = np.load(p, allow_pickle=False)
    elif p.suffix == ".npz":
        with np.load(p, allow_pickle=False) as data:
            act = data["activity"]
    else:
        act = np.loadtxt(p, delimiter=",", ndmin=2, dtype=np.float64)
    act = np.asarray(act, dtype=np.float64)
    if act.ndim == 1:
        act = act[:, None]
    if act.ndim != 2 or act.shape[1] > NUM_SPEAKERS:
        raise ValueError(f"activity must be [T, <= {NUM_SPEAKERS}], got shape {act.shape}")
    return np.pad(act, ((0, 0), (0, NUM_SPEAKERS - act.shape[1])))


@main.command("inspect-rope", context_settings=EXTRA_ARGS)
@common_options
@click.option("--activity", type=click.Path(), default=None, help="Activity file (.csv, .npy or corpus .npz).")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV path; stdout if omitted.")
@click.option("--tau", type=float, default=None, help="Activity threshold.")
@click.pass_context
@guarded
def inspect_rope(ctx, config_path, seed, activity, out, tau):
    """Dump the per-frame, per-speaker position trace as CSV."""
    from .ts_rope import DEFAULT_TAU, inspect_csv

    defaults = {"activity": None, "out": None, "seed": 0, "tau": DEFAULT_TAU}
    cfg = resolve_config(defaults, config_path, parse_overrides(ctx.args),
                         {"activity": activity, "out": out, "seed": seed, "tau": tau})
    _require(cfg, "activity")
    if not Path(cfg["activity"]).is_file():
        raise click.UsageError(f"missing activity file {cfg['activity']}")
    text = inspect_csv(load_activity(cfg["activity"]), cfg["tau"])
    if cfg["out"] is None:
        click.echo(text, nl=False)
        return
    path = Path(cfg["out"])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    write_snapshot(cfg, path.parent)


@main.command("proto-report", context_settings=EXTRA_ARGS)
@common_options
@click.option("--checkpoint", type=click.Path(), default=None, help="Hyper-SD checkpoint.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="JSON path; stdout if omitted.")
@click.pass_context
@guarded
def proto_report(ctx, config_path, seed, checkpoint, out):
    """Pairwise prototype distances and radii of a trained classifier."""
    from .hyper_sd import HyperSD, prototype_report

    cfg = resolve_config({"checkpoint": None, "out": None, "seed": 0}, config_path, parse_overrides(ctx.args),
                         {"checkpoint": checkpoint, "out": out, "seed": seed})
    _require(cfg, "checkpoint")
    if not Path(cfg["checkpoint"]).is_file():
        raise click.UsageError(f"missing checkpoint {cfg['checkpoint']}")
    model = HyperSD.load(cfg["checkpoint"])
    _emit_json(prototype_report(model.prototypes, model.cfg.curvature), cfg["out"])
    if cfg["out"] is not None:
        write_snapshot(cfg, Path(cfg["out"]).parent)


if __name__ == "__main__":
    main()
