"""Command line driver: ``shortcutlab <subcommand>``.

Configuration precedence is flags > environment (``SHORTCUTLAB_<KEY>``) >
``--config`` JSON file > the config stored in the input artifact > defaults.
Failures exit nonzero with one JSON object on stderr.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import data as D
from . import interp as I
from . import pipeline as P
from . import render as R
from .attribution import write_attributions_jsonl
from .errors import ConfigError, ShortcutLabError
from .evaluation import ShortcutImpactReport, monotone_with_tolerance, roc_curve, summarize_sweep, SweepPoint, write_rows_csv
from .model import ComponentId, load_checkpoint, save_checkpoint

ENV_PREFIX = "SHORTCUTLAB_"
EXIT_ERROR = 1
EXIT_USAGE = 2


def _coerce(key: str, raw):
    """Parse a string override into the type of the config field ``key``."""
    default = getattr(P.ExperimentConfig(), key)
    if not isinstance(raw, str):
        return raw
    if raw.lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return float(raw)
    return raw


def resolve_config(base: dict | None, config_file: str | None, sets: tuple[str, ...], flags: dict) -> P.ExperimentConfig:
    values = dict(base or {})
    if config_file:
        with open(config_file) as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_file}: expected a JSON object")
        values.update(loaded)
    known = set(P.ExperimentConfig().to_dict())
    for key in sorted(known):
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            values[key] = env
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    values.update({k: v for k, v in flags.items() if v is not None})
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return P.ExperimentConfig.from_dict({k: _coerce(k, v) for k, v in values.items()})


def config_options(fn):
    fn = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override any config field.")(fn)
    fn = click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), help="JSON config file.")(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    return fn


def _load_run(corpus: str, checkpoint: str | None, config_file, sets, flags) -> P.Workbench:
    splits, header = D.load_corpus(corpus)
    base = dict(header.get("config", {}).get("config", {}))
    model = None
    if checkpoint:
        model, meta = load_checkpoint(checkpoint, dtype=torch.float64)
        base.update(meta.get("config", {}))
    cfg = resolve_config(base, config_file, sets, flags)
    return P.workbench(cfg, splits, model)


def _parse_heads(text: str | None) -> list[tuple[int, int]] | None:
    if not text:
        return None
    out = []
    for part in text.split(","):
        comp = ComponentId.parse(part.strip())
        if not comp.is_head:
            raise ConfigError(f"{part!r} is not a head (use layer.head)")
        out.append((comp.layer, comp.head))
    return out


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Shortcut workbench: generate data, train, patch, attribute, detect, ablate."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@config_options
@click.option("--frequency", type=float, default=None)
@click.option("--purity", type=float, default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def gen_data(seed, config_file, sets, frequency, purity, out):
    """Write the shortcut-injected corpus as JSONL."""
    cfg = resolve_config(None, config_file, sets, {"seed": seed, "frequency": frequency, "purity": purity})
    splits = P.build_splits(cfg)
    D.save_corpus(out, splits, P.artifact_header(cfg))
    click.echo(json.dumps({"corpus": out, "train": len(splits.train), "test_triplets": len(splits.test_triplets)}))


@main.command()
@config_options
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Checkpoint path (.npz).")
@click.option("--epochs", type=int, default=None)
def train(seed, config_file, sets, corpus, out, epochs):
    """Pretrain and fine-tune a classifier on the corpus."""
    bench = _load_run(corpus, None, config_file, sets, {"seed": seed, "epochs": epochs})
    model, trainlog = P.train_model(bench)
    save_checkpoint(model, out, P.artifact_header(bench.cfg))
    log_path = Path(out).with_suffix(".log.csv")
    write_rows_csv(trainlog.rows, log_path, header=_flat_header(bench.cfg))
    click.echo(json.dumps({"checkpoint": out, "log": str(log_path), "final": trainlog.rows[-1]}))


def _flat_header(cfg: P.ExperimentConfig, **extra) -> dict:
    h = P.artifact_header(cfg, **extra)
    h["config"] = json.dumps(h["config"], sort_keys=True)
    return h


@main.command("eval-shortcut")
@config_options
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def eval_shortcut(seed, config_file, sets, corpus, checkpoint, out):
    """Accuracy per (class, actor variant) and the ACAC."""
    bench = _load_run(corpus, checkpoint, config_file, sets, {"seed": seed})
    report = ShortcutImpactReport.from_table(P.evaluate_shortcut(bench))
    write_rows_csv(report.rows(), out, header=_flat_header(bench.cfg))
    click.echo(json.dumps({"acac": report.acac, "out": out}))


@main.command()
@config_options
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--routing", type=click.Choice(["direct", "total", "via_values", "via_keys"]), default="direct")
@click.option("--samples", type=int, default=None)
@click.option("--heads", default=None, help="Receiver heads for via routings, e.g. 3.0,3.1 (default: discovered).")
@click.option("--label", type=click.Choice(["positive", "negative"]), default="positive")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--svg", type=click.Path(dir_okay=False), default=None)
def patch(seed, config_file, sets, corpus, checkpoint, routing, samples, heads, label, out, svg):
    """Path patching: original-name run patched with the anti-correlated actor run."""
    bench = _load_run(corpus, checkpoint, config_file, sets, {"seed": seed, "samples": samples})
    lab = 1 if label == "positive" else 0
    clean, corrupt, last = P.patch_pair(bench, lab)
    patcher = I.Patcher(bench.model, clean, corrupt, bench.direction, last)
    receivers = _parse_heads(heads)
    if routing in I.VIA and receivers is None:
        receivers = P.discover_label_heads(patcher.patch_all("direct"), bench.cfg.n_label_heads)
    results = patcher.patch_all(routing, receivers or ())
    cfg = bench.cfg.model_config(len(bench.tok))
    header = _flat_header(bench.cfg, routing=routing, label=label, heads=json.dumps(receivers or []))
    I.write_patch_csv(results, out, cfg.n_layers, cfg.n_heads, header=header)
    if svg:
        R.write_text(svg, R.patch_heatmap_svg(I.read_patch_csv(out), cfg.n_layers, cfg.n_heads, title=routing, metadata=header))
    top = [(str(r.component), r.delta_ld) for r in I.rank_components(results)[:5]]
    click.echo(json.dumps({"out": out, "top": top, "receivers": receivers}))


@main.command()
@config_options
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--method", "methods", type=click.Choice(P.METHODS), multiple=True, default=("HTA",))
@click.option("--reviews", type=int, default=None, help="Positive test reviews (each scored twice).")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def attribute(seed, config_file, sets, corpus, checkpoint, methods, reviews, out):
    """Token attributions for Bad-actor and random-name positive reviews, as JSONL."""
    bench = _load_run(corpus, checkpoint, config_file, sets, {"seed": seed, "detect_reviews": reviews})
    run = P.detect(bench, tuple(methods))
    write_attributions_jsonl(run.records, out, header=P.artifact_header(bench.cfg, methods=list(methods)))
    click.echo(json.dumps({"out": out, "records": len(run.records), "seconds": run.seconds}))


@main.command("detect-eval")
@config_options
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--method", "methods", type=click.Choice(P.METHODS), multiple=True, default=P.METHODS)
@click.option("--reviews", type=int, default=None)
@click.option("--aggregation", type=click.Choice(["max", "sum"]), default=None)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
def detect_eval(seed, config_file, sets, corpus, checkpoint, methods, reviews, aggregation, out_dir):
    """AUROC and Cohen's d of name-word scores, shortcut actor vs random names."""
    bench = _load_run(corpus, checkpoint, config_file, sets, {"seed": seed, "detect_reviews": reviews, "aggregation": aggregation})
    run = P.detect(bench, tuple(methods))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = _flat_header(bench.cfg)
    reports = [run.report(m, bench.cfg.aggregation) for m in methods]
    write_rows_csv([vars(r) for r in reports], out / "detection.csv", header=header)
    scores = [
        {"method": m, "group": g, "index": i, "score": float(s)}
        for m in methods for g, d in (("shortcut", run.shortcut), ("random", run.random)) for i, s in enumerate(d[m])
    ]
    write_rows_csv(scores, out / "scores.csv", header=header)
    meta = P.artifact_header(bench.cfg)
    for m in methods:
        R.write_text(out / f"hist_{m}.svg", R.histogram_svg({"shortcut": run.shortcut[m], "random": run.random[m]}, title=m, metadata=meta))
    curves = {m: roc_curve(run.shortcut[m], run.random[m]) for m in methods}
    R.write_text(out / "roc.svg", R.roc_svg(curves, title="ROC", metadata=meta))
    click.echo(json.dumps({r.method: {"auroc": r.auroc, "cohens_d": r.cohens_d} for r in reports}))


@main.command()
@config_options
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--heads", default=None, help="Heads to zero, e.g. 3.0,2.1 (default: discovered label heads).")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--save", type=click.Path(dir_okay=False), default=None, help="Also write the ablated checkpoint.")
def ablate(seed, config_file, sets, corpus, checkpoint, heads, out, save):
    """Zero-ablate heads and compare accuracy cells and ACAC before and after."""
    bench = _load_run(corpus, checkpoint, config_file, sets, {"seed": seed})
    chosen = _parse_heads(heads) or P.localize(bench).label_heads
    result = P.mitigate(bench, chosen)
    write_rows_csv(result.rows(), out, header=_flat_header(bench.cfg, heads=json.dumps(chosen)))
    if save:
        from .model import ablate_heads

        save_checkpoint(ablate_heads(bench.model, chosen), save, P.artifact_header(bench.cfg, ablated=chosen))
    click.echo(json.dumps({"heads": chosen, "acac_before": result.acac_before, "acac_after": result.acac_after}))


@main.command()
@config_options
@click.option("--parameter", type=click.Choice(["frequency", "purity"]), default="frequency")
@click.option("--values", required=True, help="Comma-separated grid, e.g. 0,0.001,0.01.")
@click.option("--seeds", default="0,1,2")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def sweep(seed, config_file, sets, parameter, values, seeds, out):
    """Train one model per (value, seed) and tabulate mean and std ACAC."""
    cfg = resolve_config(None, config_file, sets, {"seed": seed})
    grid = [float(v) for v in values.split(",")]
    seed_list = [int(s) for s in seeds.split(",")]
    points = []
    for value in grid:
        for s in seed_list:
            bench = P.workbench(cfg.with_(**{parameter: value, "seed": s}))
            P.train_model(bench)
            points.append(SweepPoint(parameter, value, s, _acac(bench)))
    header = _flat_header(cfg, parameter=parameter, seeds=seeds)
    write_rows_csv(points, out, header=header)
    summary = summarize_sweep(points)
    write_rows_csv(summary, Path(out).with_suffix(".summary.csv"), header=header)
    means = [r["mean_acac"] for r in summary]
    click.echo(json.dumps({"summary": summary, "monotone": monotone_with_tolerance(means)}))


def _acac(bench: P.Workbench) -> float:
    return ShortcutImpactReport.from_table(P.evaluate_shortcut(bench)).acac


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--example", type=int, default=0, help="Record index for token views of attribution files.")
def report(input_path, out, example):
    """Render a patch CSV as a layer-by-component heatmap, or one attribution record as a token view."""
    path = Path(input_path)
    if path.suffix == ".csv":
        rows = I.read_patch_csv(path)
        if not rows:
            click.echo("warning: empty patch file, writing an empty plot", err=True)
            R.write_text(out, R.heatmap_svg(np.full((1, 1), np.nan), [""], [""]))
            return
        n_layers = max(r["layer"] for r in rows) + 1
        n_heads = sum(1 for r in rows if r["layer"] == 0 and r["component"] != "mlp")
        R.write_text(out, R.patch_heatmap_svg(rows, n_layers, n_heads, title=path.stem))
    else:
        header, records = D.read_jsonl(path)
        if not records:
            click.echo("warning: no attribution records, writing an empty plot", err=True)
            R.write_text(out, R.token_svg([], [], metadata=header))
            return
        if not 0 <= example < len(records):
            raise ConfigError(f"--example {example} out of range (0..{len(records) - 1})")
        rec = records[example]
        view = R.token_html if out.endswith(".html") else R.token_svg
        if view is R.token_html:
            R.write_text(out, R.token_html(rec["tokens"], rec["scores"], title=f"{rec['method']} {rec['example_id']}"))
        else:
            R.write_text(out, R.token_svg(rec["tokens"], rec["scores"], metadata={"method": rec["method"], "example": rec["example_id"]}))
    click.echo(json.dumps({"out": out}))


def _error(kind: str, message: str, code: int) -> int:
    click.echo(json.dumps({"error": kind, "message": message}), err=True)
    return code


def run(argv: list[str] | None = None) -> int:
    """Entry point returning an exit status instead of raising."""
    try:
        main.main(args=argv, prog_name="shortcutlab", standalone_mode=False)
    except click.exceptions.NoSuchOption as e:
        return _error("unknown_flag", e.format_message(), EXIT_USAGE)
    except click.exceptions.BadParameter as e:
        kind = "missing_input" if "does not exist" in e.format_message() else "bad_parameter"
        return _error(kind, e.format_message(), EXIT_USAGE)
    except click.exceptions.UsageError as e:
        return _error("usage", e.format_message(), EXIT_USAGE)
    except click.exceptions.Abort:
        return _error("aborted", "aborted", EXIT_ERROR)
    except FileNotFoundError as e:
        return _error("missing_input", str(e), EXIT_ERROR)
    except ShortcutLabError as e:
        kind = {"SchemaError": "schema_mismatch", "ConfigError": "config"}.get(type(e).__name__, type(e).__name__)
        return _error(kind, str(e), EXIT_ERROR)
    return 0


def entry() -> None:
    sys.exit(run())
