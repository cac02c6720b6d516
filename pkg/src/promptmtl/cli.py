"""Command-line entry point: ``promptmtl <command>``.

Every command resolves its settings as defaults < config file < flags and
writes into a fresh timestamped directory under ``out_dir`` together with a
copy of the resolved config.  Exit codes: 3 missing file, 4 vocabulary hash
mismatch, 5 schema violation, 1 anything else.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import torch

from . import experiment as X
from .errors import PromptMTLError, SchemaError, VocabularyMismatch
from .evaluation import CONDITIONS, run_eval, write_predictions
from .model import load_checkpoint
from .prompts import GRAMMARS, ParaphrasePool, audit_pool, load_pools, training_references

log = logging.getLogger("promptmtl")

EXIT_OTHER = 1
EXIT_MISSING = 3
EXIT_HASH = 4
EXIT_SCHEMA = 5


def _guard(fn):
    """Map library errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except click.ClickException:
            raise
        except FileNotFoundError as exc:
            click.echo(f"error: missing file: {exc}", err=True)
            sys.exit(EXIT_MISSING)
        except VocabularyMismatch as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_HASH)
        except SchemaError as exc:
            click.echo(f"error: schema: {exc}", err=True)
            sys.exit(EXIT_SCHEMA)
        except (PromptMTLError, OSError, ValueError, RuntimeError) as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(EXIT_OTHER)

    return wrapper


def _run_dir(out_dir, command: str) -> Path:
    root = Path(out_dir)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = root / f"{stamp}-{command}"
    n = 1
    while path.exists():
        n += 1
        path = root / f"{stamp}-{command}-{n}"
    path.mkdir(parents=True)
    return path


def _resolve(config, **flags) -> X.ExperimentConfig:
    nested = {}
    for key, value in flags.items():
        if value is None:
            continue
        section, _, name = key.partition("__")
        if name:
            nested.setdefault(section, {})[name] = value
        else:
            nested[key] = value
    return X.resolve_config(config, nested)


def _start(cfg: X.ExperimentConfig, command: str) -> Path:
    run = _run_dir(cfg.out_dir, command)
    cfg.dump(run / "config.yaml")
    torch.set_num_threads(1)
    log.info("run directory %s", run)
    return run


config_option = click.option(
    "--config", "config", type=click.Path(dir_okay=False), default=None, help="YAML experiment config."
)
seed_option = click.option("--seed", type=int, default=None, help="Master seed.")
out_option = click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Parent of run directories.")
data_option = click.option("--data-dir", type=click.Path(file_okay=False), default=None, help="Directory written by synth-data.")
mode_option = click.option("--mode", type=click.Choice(GRAMMARS), default=None, help="Prompt grammar.")
pools_option = click.option("--pools", type=click.Path(), default=None, help="Paraphrase pool file or directory.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Multi-task prompting experiments on synthetic spoken-language tasks."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("synth-data")
@config_option
@seed_option
@out_option
@click.option("--n-train", "data__n_train", type=int, default=None, help="Training examples per task.")
@click.option("--n-test", "data__n_test", type=int, default=None, help="Test examples per task.")
@click.option("--asr/--no-asr", "data__asr", default=None, help="Add the auxiliary transcript task.")
@_guard
def synth_data(config, **flags):
    """Generate the synthetic task suite, its zero-shot variant and the vocabulary."""
    cfg = _resolve(config, **flags)
    run = _start(cfg, "synth-data")
    pools = cfg.load_pools()
    manifests, zs = X.build_suite(cfg.data_config(), cfg.seed)
    vocab = X.suite_vocabulary(manifests + [zs], pools)
    data_dir = X.write_suite(run / "data", manifests, zs, vocab)
    for m in manifests + [zs]:
        click.echo(f"{m.descriptor.task_id:<24} train={len(m.train):<6} test={len(m.test)}")
    click.echo(f"vocabulary {len(vocab)} tokens, hash {vocab.hash[:12]}")
    click.echo(str(data_dir))


@main.command()
@config_option
@seed_option
@out_option
@data_option
@mode_option
@pools_option
@click.option("--max-lr", "train__max_lr", type=float, default=None)
@click.option("--warmup-steps", "train__warmup_steps", type=int, default=None)
@click.option("--batch-size", "train__batch_size", type=int, default=None)
@click.option("--max-epochs", "train__max_epochs", type=int, default=None)
@click.option("--steps-per-epoch", "train__steps_per_epoch", type=int, default=None)
@_guard
def train(config, **flags):
    """Train one model on every task in the data directory."""
    from .plotting import plot_training_curve
    from .train import fit

    cfg = _resolve(config, **flags)
    manifests, _, vocab = X.read_suite(cfg.data_dir)
    pools = cfg.load_pools()
    run = _start(cfg, "train")
    model_cfg = cfg.model_config(len(vocab))
    train_cfg = cfg.train_config()
    X.write_json(run / "resolved.json", {"model": asdict(model_cfg), "train": asdict(train_cfg)})
    result = fit(manifests, pools, model_cfg, train_cfg, vocab, out_dir=run / "checkpoint")
    plot_training_curve(result.log, run / "training_curve.png", result.evals)
    last = result.log[-1]
    click.echo(f"final step {last['step']} loss {last['loss']:.6f} lr {last['lr']:.3e}")
    click.echo(f"best dev {result.best_metric:.4f} at step {result.best_step} ({result.state.stopped})")
    click.echo(str(result.checkpoint))


def _eval_settings(cfg: X.ExperimentConfig) -> dict:
    ev = dict(cfg.eval)
    ev.pop("conditions", None)
    return ev


def _write_report(run: Path, name: str, report, preds) -> None:
    (run / "reports").mkdir(exist_ok=True)
    (run / "predictions").mkdir(exist_ok=True)
    (run / "reports" / f"{name}.json").write_text(report.dumps() + "\n", encoding="utf-8")
    (run / "reports" / f"{name}.txt").write_text(report.to_text(), encoding="utf-8")
    for i, sub in enumerate(preds):
        write_predictions(run / "predictions" / f"{name}__{i}.jsonl", sub)


def _load_model(cfg: X.ExperimentConfig, vocab):
    if not cfg.checkpoint:
        raise SchemaError("no checkpoint given (use --checkpoint or set checkpoint in the config)")
    model, _ = load_checkpoint(cfg.checkpoint, vocab)
    model.eval()
    return model


@main.command("eval")
@config_option
@seed_option
@out_option
@data_option
@mode_option
@pools_option
@click.option("--checkpoint", type=click.Path(), default=None, help="Checkpoint directory (e.g. <run>/checkpoint/best).")
@click.option("--condition", "conditions", type=click.Choice(CONDITIONS), multiple=True, help="Repeatable; default all.")
@click.option("--constrained/--unconstrained", "decode__constrained", default=None, help="Restrict the first token to option numbers.")
@click.option("--beam-size", "decode__beam_size", type=int, default=None)
@_guard
def eval_cmd(config, conditions, **flags):
    """Evaluate a checkpoint on every task's test split under prompt conditions."""
    if conditions:
        flags["eval__conditions"] = list(conditions)
    cfg = _resolve(config, **flags)
    manifests, _, vocab = X.read_suite(cfg.data_dir)
    pools = cfg.load_pools()
    model = _load_model(cfg, vocab)
    run = _start(cfg, "eval")
    conds = cfg.eval.get("conditions") or list(CONDITIONS)
    if cfg.mode == "specifier":
        conds = ["specifier"]
    refs = training_references(pools)
    settings = _eval_settings(cfg)
    for m in manifests:
        for cond in conds:
            report, preds = run_eval(
                model, vocab, m, mode=cfg.mode, condition="seen" if cond == "specifier" else cond, pools=pools,
                references=refs, decode_cfg=cfg.decode_config(), seed=cfg.seed, return_predictions=True, **settings,
            )
            _write_report(run, f"{X.manifest_dirname(m)}__{cond}", report, preds)
            click.echo(f"{report.task_id:<24} {cond:<9} {report.metric:<12} {report.value:.4f}  follow {report.following_rate:.4f}")
    click.echo(str(run))


@main.command("zero-shot")
@config_option
@seed_option
@out_option
@data_option
@pools_option
@click.option("--checkpoint", type=click.Path(), default=None, help="Checkpoint directory.")
@click.option("--constrained/--unconstrained", "decode__constrained", default=None)
@_guard
def zero_shot(config, **flags):
    """Evaluate on relabeled tasks in the configured mode and in specifier mode."""
    cfg = _resolve(config, **flags)
    _, zs_manifests, vocab = X.read_suite(cfg.data_dir)
    if not zs_manifests:
        raise FileNotFoundError(f"no zero-shot manifests under {cfg.data_dir}")
    pools = cfg.load_pools()
    model = _load_model(cfg, vocab)
    run = _start(cfg, "zero-shot")
    modes = [cfg.mode] if cfg.mode == "specifier" else [cfg.mode, "specifier"]
    settings = _eval_settings(cfg)
    lines = [f"{'task':<24}{'mode':<18}{'value':>8}{'random':>8}{'majority':>9}"]
    for m in zs_manifests:
        for mode in modes:
            report, preds = run_eval(
                model, vocab, m, mode=mode, condition="seen", pools=pools, references=training_references(pools),
                decode_cfg=cfg.decode_config(), seed=cfg.seed, return_predictions=True, **settings,
            )
            _write_report(run, f"{X.manifest_dirname(m)}__{mode}", report, preds)
            b = report.baselines
            lines.append(f"{report.task_id:<24}{mode:<18}{report.value:>8.4f}{b['random']:>8.4f}{b['majority']:>9.4f}")
    table = "\n".join(lines) + "\n"
    (run / "zero_shot.txt").write_text(table, encoding="utf-8")
    click.echo(table, nl=False)
    click.echo(str(run))


@main.command("prompt-audit")
@click.argument("pool_file", type=click.Path())
@click.option("--against", type=click.Path(), default=None,
              help="Pool file or directory whose seen phrases are the references "
                   "(default: every pool next to POOL_FILE, i.e. all training prompts).")
@click.option("--own", is_flag=True, help="Compare only with the pool's own seen phrases.")
@click.option("--unit", type=click.Choice(["word", "char"]), default="word", show_default=True)
@click.option("--threshold", type=float, default=0.9, show_default=True)
@click.option("--strict", is_flag=True, help="Exit with status 6 when any phrase fails.")
@_guard
def prompt_audit(pool_file, against, own, unit, threshold, strict):
    """Normalized edit distance of each unseen phrase from the training phrases."""
    path = Path(pool_file)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        pool = ParaphrasePool.load(path)
        refs = None
        if not own:
            source = Path(against) if against is not None else path.parent
            if not source.exists():
                raise FileNotFoundError(source)
            refs = training_references(load_pools(source))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{exc}") from None
    rows = audit_pool(pool, refs, threshold, unit=unit)
    failed = 0
    for r in rows:
        status = "pass" if r["passed"] else "FAIL"
        failed += not r["passed"]
        click.echo(f"{r['distance']:.4f}  {status}  {r['phrase']}")
    click.echo(f"{len(rows) - failed}/{len(rows)} unseen phrases pass at {threshold}")
    if strict and failed:
        sys.exit(6)


def _collect_reports(run_dirs) -> list[dict]:
    rows = []
    for d in run_dirs:
        d = Path(d)
        if not d.is_dir():
            raise FileNotFoundError(d)
        for f in sorted((d / "reports").glob("*.json")):
            try:
                rows.append(json.loads(f.read_text(encoding="utf-8")))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{f}: {exc}") from None
    return rows


@main.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path())
@_guard
def report(run_dirs):
    """Consolidate eval/zero-shot reports into one table and figure.

    Columns follow seen / unseen / order conditions; the output lands in the
    first run directory given.
    """
    from .plotting import plot_condition_bars

    rows = _collect_reports(run_dirs)
    if not rows:
        raise FileNotFoundError(f"no reports under {', '.join(run_dirs)}")
    cols = ["seen", "unseen", "order", "specifier"]
    present = [c for c in cols if any(r["condition"] == c for r in rows)]
    tasks = sorted({r["task_id"] for r in rows})
    header = f"{'task':<24}{'metric':<14}" + "".join(f"{c:>11}" for c in present) + f"{'follow':>9}{'random':>9}{'majority':>10}"
    lines = [header]
    summary = []
    for task_id in tasks:
        sel = [r for r in rows if r["task_id"] == task_id]
        by_cond = {r["condition"]: r for r in sel}
        cells = "".join(f"{by_cond[c]['value']:>11.4f}" if c in by_cond else f"{'-':>11}" for c in present)
        follow = float(np.mean([r["following_rate"] for r in sel]))
        base = next((r["baselines"] for r in sel if r["baselines"]), {})
        rnd = f"{base['random']:>9.4f}" if "random" in base else f"{'-':>9}"
        maj = f"{base['majority']:>10.4f}" if "majority" in base else f"{'-':>10}"
        lines.append(f"{task_id:<24}{sel[0]['metric']:<14}{cells}{follow:>9.4f}{rnd}{maj}")
        summary.append({"task_id": task_id, "metric": sel[0]["metric"], "following_rate": follow, "baselines": base,
                        **{c: by_cond[c]["value"] for c in present if c in by_cond}})
    table = "\n".join(lines) + "\n"
    out = Path(run_dirs[0])
    (out / "report.txt").write_text(table, encoding="utf-8")
    X.write_json(out / "report.json", summary)
    plot_condition_bars(rows, out / "report.png")
    click.echo(table, nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
