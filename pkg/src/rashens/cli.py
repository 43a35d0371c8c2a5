"""Command-line entry points: run, ablate, drift, serve, report."""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from .ensemble import drift_experiment
from .pipeline import (RunConfig, StageError, load_run, run_ablation,
                       run_pipeline)


@click.group()
def main():
    """Rashomon ensemble toolkit."""


def _load_config(config_path: str, overrides: dict) -> RunConfig:
    config = RunConfig.from_json(config_path)
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    clean = {k: v for k, v in overrides.items()
             if v is not None and k in fields}
    return dataclasses.replace(config, **clean)


@main.command()
@click.option("-c", "--config", "config_path", required=True,
              type=click.Path(exists=True), help="JSON run configuration.")
@click.option("--out", "out_dir", default=None, help="Output directory.")
@click.option("--seed", type=int, default=None)
@click.option("--n-models", "n_models", type=int, default=None)
@click.option("--epsilon", type=float, default=None)
@click.option("--combiner", type=click.Choice(["voting", "stacking"]),
              default=None)
@click.option("--lam", type=float, default=None,
              help="Weight of the divergence term in the search score.")
@click.option("--max-expansions", "max_expansions", type=int, default=None)
@click.option("--ensemble-loss", "ensemble_loss_search", is_flag=True,
              default=None, help="Score searches by full-ensemble loss.")
def run(config_path, **overrides):
    """Run the full pipeline from a config file."""
    config = _load_config(config_path, overrides)
    try:
        result = run_pipeline(config)
    except StageError as err:
        click.echo(str(err), err=True)
        sys.exit(1)
    man = result.manifest.doc
    click.echo(f"rashomon ratio: {man['rashomon']['ratio']:.4f} "
               f"({man['rashomon']['n_members']}/{man['rashomon']['n_sampled']})")
    click.echo(f"clusters: k={man['clusters']['k']} "
               f"silhouette={man['clusters']['silhouette']:.4f}")
    metrics = man["ensemble"]["metrics"][config.combiner]
    key = "auroc" if "auroc" in metrics["test"] else "mape"
    click.echo(f"ensemble test {key}: {metrics['test'][key]:.4f}")
    click.echo(f"manifest: {Path(config.out_dir) / 'manifest.json'}")


@main.command()
@click.option("-s", "--scenario", type=click.Choice(["I", "II", "III"]),
              required=True)
@click.option("-n", "--repeats", type=int, default=30)
@click.option("--dir", "run_dir", required=True,
              type=click.Path(exists=True), help="Completed run directory.")
def ablate(scenario, repeats, run_dir):
    """Composition/robustness study against a completed reference run."""
    try:
        reference = load_run(run_dir)
        report = run_ablation(reference.config, scenario, repeats,
                              reference=reference)
    except StageError as err:
        click.echo(str(err), err=True)
        sys.exit(1)
    reports = Path(run_dir) / "reports"
    reports.mkdir(exist_ok=True)
    out = reports / f"ablation_{scenario}.json"
    out.write_text(json.dumps(report, sort_keys=True, indent=2))
    click.echo(f"scenario {scenario}: jaccard std {report['jaccard_std']:.4f},"
               f" cosine std {report['cosine_std']:.4f}")
    click.echo(f"report: {out}")


@main.command()
@click.option("--dir", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--levels", default="0,0.4,0.8,1.2,1.6,2.0",
              help="Comma-separated perturbation levels.")
@click.option("--kind", type=click.Choice(["gaussian", "shuffle"]),
              default="gaussian")
@click.option("--repeats", type=int, default=30)
def drift(run_dir, levels, kind, repeats):
    """Re-run the drift experiment with custom levels."""
    try:
        reference = load_run(run_dir)
    except StageError as err:
        click.echo(str(err), err=True)
        sys.exit(1)
    level_values = [float(v) for v in levels.split(",") if v.strip() != ""]
    seeds = reference.manifest["seeds"]
    report = drift_experiment(reference.voting_ensemble, reference.test,
                              level_values, kind=kind, seed=seeds["drift"],
                              repeats=repeats)
    reports = Path(run_dir) / "reports"
    reports.mkdir(exist_ok=True)
    report.write_json(reports / "drift.json")
    report.write_csv(reports / "drift.csv")
    report.write_gnuplot(reports / "drift.dat")
    for row in report.rows:
        click.echo(f"level {row['level']:g}: loss {row['loss']:.4f} "
                   f"jsd {row['mean_pairwise_jsd']:.4f} "
                   f"agreement {row['mean_agreement']:.4f}")


@main.command()
@click.option("--dir", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--port", type=int, default=8080)
@click.option("--static", "static_dir", default=None,
              help="Directory with the built UI (defaults to frontend/dist "
                   "when present).")
def serve(run_dir, port, static_dir):
    """Serve the read/veto/rebuild API (and the UI, when built) locally."""
    from .server import serve as _serve
    if static_dir is None:
        default = Path("frontend") / "dist"
        static_dir = str(default) if default.is_dir() else None
    try:
        click.echo(f"serving {run_dir} on http://127.0.0.1:{port}")
        _serve(run_dir, port, static_dir)
    except OSError as err:
        click.echo(f"[serve] {err}", err=True)
        sys.exit(1)
    except StageError as err:
        click.echo(str(err), err=True)
        sys.exit(1)


@main.command()
@click.option("--dir", "run_dir", required=True, type=click.Path(exists=True))
def report(run_dir):
    """Print a summary of a completed run."""
    manifest_path = Path(run_dir) / "manifest.json"
    if not manifest_path.exists():
        click.echo(f"no manifest in {run_dir}", err=True)
        sys.exit(1)
    man = json.loads(manifest_path.read_text())
    click.echo(json.dumps({
        "dataset": man["dataset"],
        "splits": man["splits"],
        "rashomon": {k: man["rashomon"][k]
                     for k in ("ratio", "n_members", "n_sampled", "ref_loss",
                               "epsilon")},
        "clusters": man["clusters"],
        "constituents": [c["id"] for c in man["constituents"]],
        "ensemble": man["ensemble"],
        "reference": man["reference"],
        "similarity_to_reference": man["similarity_to_reference"],
    }, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
