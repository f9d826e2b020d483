"""
Command line interface for DD-Search

    ddsearch gen --n 100000 --seed 7 --out d.mdd
    ddsearch index --config cube5.cfg --backend kmeans --out d.kmeans.npz
    ddsearch solve --config cube5.cfg --backend kmeans --fd-final 0.4
    ddsearch bench configs/refinement.cfg
    ddsearch report bench/
"""

import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click

from .bench import aggregate_runs, choose_metric, load_or_sample, prepare_run, run_experiment, run_single
from .dataset_io import save_dataset
from .errors import ConfigError, DDSearchError
from .models import BackendKind
from .phase_space import bind_metric
from .search import build_index, save_index
from .settings import load_experiment, load_settings

logger = logging.getLogger(__name__)

BACKEND_CHOICES = [kind.value for kind in BackendKind]


def _overrides(**sections: Dict[str, Any]) -> Dict[str, Any]:
    """Nested override dict without the options the user did not give"""
    cleaned = {}
    for name, values in sections.items():
        if isinstance(values, dict):
            nested = _overrides(**values)
            if nested:
                cleaned[name] = nested
        elif values is not None:
            cleaned[name] = values
    return cleaned


def config_option(func):
    return click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                        help="Structured key-value config file")(func)


@click.group()
@click.option("--log-level", default=None, help="Logging level (default: LOG_LEVEL or INFO)")
def cli(log_level: Optional[str]):
    """Data-driven mechanics solver with exact and approximate nearest-neighbor search"""
    level = (log_level or os.getenv("LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@click.option("--n", "n_points", type=click.IntRange(min=1), default=None, help="Number of data points")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Target .mdd or .csv file")
def gen(config_path, n_points, seed, out):
    """Sample a material data set"""
    settings = load_settings(config_path, _overrides(data={"n_points": n_points, "seed": seed}))
    data = load_or_sample(settings)
    path = save_dataset(data, out)
    click.echo(f"✅ Wrote {data.n_points} points to {path}")


@cli.command()
@config_option
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--backend", type=click.Choice(BACKEND_CHOICES), default=None)
@click.option("--seed", type=int, default=None, help="Index build seed")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Target .npz index file")
def index(config_path, data_path, backend, seed, out):
    """Build and serialize a nearest-neighbor index"""
    settings = load_settings(
        config_path,
        _overrides(data={"path": data_path}, solver={"backend": {"kind": backend, "seed": seed}}),
    )
    raw = load_or_sample(settings)
    data = bind_metric(raw, choose_metric(raw, settings))
    built = build_index(data, settings.solver.backend.kind, **settings.solver.backend.index_kwargs())
    save_index(built, out)
    stats = built.build_stats()
    click.echo(f"✅ {stats['kind']} index: {stats['memory_bytes']} bytes, built in {stats['build_time_s']:.3f} s -> {out}")


@cli.command()
@config_option
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--n", "n_points", type=click.IntRange(min=1), default=None)
@click.option("--backend", type=click.Choice(BACKEND_CHOICES), default=None)
@click.option("--index", "index_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--fd-final", type=click.FloatRange(0.0, 1.0), default=None)
@click.option("--fd-start", type=click.FloatRange(0.0, 1.0), default=None)
@click.option("--ramp", type=click.IntRange(min=1), default=None)
@click.option("--fs", "f_s", type=click.IntRange(min=1), default=None, help="Graph step bound")
@click.option("--max-iter", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=click.IntRange(min=1), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--run-id", default=None)
@click.option("--export", is_flag=True, help="Also write nodal and integration point CSVs")
@click.option("--reference", is_flag=True, help="Also time the Newton reference solve and report the strain error")
def solve(config_path, data_path, n_points, backend, index_path, fd_final, fd_start, ramp, f_s,
          max_iter, seed, threads, out, run_id, export, reference):
    """Run one DD solve and write its run CSV"""
    settings = load_settings(config_path, _overrides(
        data={"path": data_path, "n_points": n_points},
        solver={
            "backend": {"kind": backend, "index_path": index_path, "f_s": f_s},
            "schedule": {"fd_final": fd_final, "fd_start": fd_start, "ramp": ramp},
            "max_iterations": max_iter, "seed": seed, "threads": threads,
        },
        out=out, run_id=run_id, reference=True if reference else None,
    ))
    click.echo(f"🚀 DD solve: {settings.solver.backend.label}, N={settings.data.n_points}, "
               f"{settings.mesh.n_edge}^3 elements")
    outcome = run_single(settings, settings.out, context=prepare_run(settings), export=export)
    marker = "✅" if outcome.converged else "⚠️ "
    click.echo(f"{marker} {outcome.summary['iterations']} iterations, "
               f"final d2 {outcome.summary['final_global_d2']:.6e}, converged={outcome.converged}")
    if settings.reference:
        click.echo(f"📐 reference solve {outcome.summary['t_reference_s']:.3f} s, "
                   f"strain error {outcome.summary['reference_strain_error']:.3e}")
    for path in outcome.files:
        click.echo(f"   {path}")


@cli.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--threads", type=click.IntRange(min=1), default=None)
def bench(config_path, out, threads):
    """Run an experiment grid described by a config file"""
    spec = load_experiment(config_path, _overrides(solver={"threads": threads}))
    click.echo(f"🚀 Experiment {spec.name}")
    summary = run_experiment(spec, out)
    failed = int((summary["error"].fillna("") != "").sum()) if "error" in summary else 0
    click.echo(f"✅ {len(summary) - failed} runs finished, {failed} failed -> {out or spec.out}")


@cli.command()
@click.argument("out_dir", type=click.Path(exists=True, file_okay=False))
def report(out_dir):
    """Recompute aggregate.csv from the run CSVs of an experiment"""
    aggregate = aggregate_runs(out_dir)
    click.echo(aggregate.to_string(index=False))
    click.echo(f"✅ Aggregated {aggregate['group'].nunique()} groups -> {Path(out_dir) / 'aggregate.csv'}")


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Entry point returning an exit code: 0 success, 1 runtime failure, 2 usage error"""
    try:
        # --help and similar early exits come back as their exit code
        code = cli.main(args=argv, prog_name="ddsearch", standalone_mode=False)
        if isinstance(code, int):
            return code
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.Abort:
        click.echo("❌ Aborted", err=True)
        return 1
    except ConfigError as exc:
        click.echo(f"❌ Configuration error: {exc}", err=True)
        return 2
    except DDSearchError as exc:
        click.echo(f"❌ {exc}", err=True)
        return 1
    return 0


def main():
    sys.exit(cli_main())
