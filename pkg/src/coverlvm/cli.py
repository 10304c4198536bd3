"""Command-line interface: reproducible batch pipelines over the library.

Every command validates its flags, derives all randomness from --seed, and
writes the resolved configuration next to its outputs.  Exit codes: 0 on
success, 1 on runtime failure (one-line error on stderr), 2 on usage errors.
"""

from __future__ import annotations

import functools
import os

import click
import numpy as np

from . import __version__, estimator, metrics, ordination, plots, simulation
from . import io as cio
from .errors import CoverLvmError
from .model import CovariateMatrix, ModelSpec

FAMILY_CHOICE = click.Choice(["beta-shifted", "hurdle-beta", "ordered-beta",
                              "cumulative-logit", "bernoulli"])


def _runtime_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CoverLvmError as exc:
            raise click.ClickException(str(exc).replace("\n", " "))
    return wrapper


def _out(ctx, name):
    return os.path.join(ctx.obj["out_dir"], name)


def _write_config(ctx, command, options):
    config = {"command": command, "seed": ctx.obj["seed"], "threads": ctx.obj["threads"],
              "out_dir": ctx.obj["out_dir"], "version": __version__, "options": options}
    cio.write_run_config(_out(ctx, f"{command}_config.json"), config)


@click.group()
@click.version_option(__version__)
@click.option("--seed", default=0, show_default=True, help="Seed for all randomness.")
@click.option("--threads", default=1, show_default=True, help="Worker processes for sweeps.")
@click.option("--out-dir", default=".", show_default=True,
              type=click.Path(file_okay=False), help="Directory for all outputs.")
@click.pass_context
def main(ctx, seed, threads, out_dir):
    """Latent variable models and ordination for percent cover data."""
    os.makedirs(out_dir, exist_ok=True)
    ctx.obj = {"seed": seed, "threads": threads, "out_dir": out_dir}


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

@main.command()
@click.option("--generator", type=click.Choice(simulation.GENERATORS),
              default="ordered-beta", show_default=True)
@click.option("--n", default=60, show_default=True, help="Sites.")
@click.option("--m", default=40, show_default=True, help="Species.")
@click.option("--latent-dim", default=2, show_default=True)
@click.option("--p", "zero_prop", default=0.5, show_default=True,
              help="Target mean zero proportion.")
@click.option("--one-prop", default=0.05, show_default=True)
@click.option("--phi", default=4.0, show_default=True)
@click.pass_context
@_runtime_errors
def simulate(ctx, generator, n, m, latent_dim, zero_prop, one_prop, phi):
    """Draw one synthetic cover dataset and its true scores."""
    design = simulation.SimDesign(generator=generator, n=n, m=m, d=latent_dim,
                                  zero_prop=zero_prop, one_prop=one_prop,
                                  phi_value=phi, seed=ctx.obj["seed"])
    rng = np.random.default_rng([design.seed, 0, 0])
    params, scores = simulation.draw_calibrated_model(design, rng)
    data = simulation.simulate_dataset(params, scores, design, rng)
    cio.write_matrix_csv(_out(ctx, "cover.csv"), data.values, data.site_names,
                         data.species_names)
    cio.write_scores_csv(_out(ctx, "true_scores.csv"), scores, data.site_names)
    _write_config(ctx, "simulate", {"generator": generator, "n": n, "m": m,
                                    "latent_dim": latent_dim, "zero_prop": zero_prop,
                                    "one_prop": one_prop, "phi": phi})
    click.echo(f"wrote {_out(ctx, 'cover.csv')} and {_out(ctx, 'true_scores.csv')}")


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _load_covariates(path, data):
    if path is None:
        return CovariateMatrix.empty(data.n_sites)
    cov = cio.read_covariates_csv(path)
    if cov.site_names and cov.site_names != data.site_names:
        raise click.ClickException("covariate site ids do not match the response panel")
    return cov


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--long", "long_format", is_flag=True,
              help="Data file is long-format (site,species,value).")
@click.option("--covariates", "cov_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--family", type=FAMILY_CHOICE, required=True)
@click.option("--latent-dim", default=2, show_default=True)
@click.option("--row-effects", is_flag=True)
@click.option("--hurdle-parts", type=click.Choice(["zeros-only", "zeros-and-ones"]),
              default="zeros-and-ones", show_default=True)
@click.option("--cutoff-mode", type=click.Choice(["species-specific", "common"]),
              default="species-specific", show_default=True)
@click.option("--pooled-phi", is_flag=True, help="One shared precision for all species.")
@click.option("--shift-n", default=100, show_default=True,
              help="N in the boundary shift (y(N-1)+0.5)/N.")
@click.option("--max-iter", default=500, show_default=True)
@click.option("--restarts", default=3, show_default=True)
@click.option("--variational-cov", type=click.Choice(["diagonal", "full"]),
              default="diagonal", show_default=True)
@click.option("--optimizer", type=click.Choice(["quasi-newton", "first-order-adaptive"]),
              default="quasi-newton", show_default=True)
@click.pass_context
@_runtime_errors
def fit(ctx, data_path, long_format, cov_path, family, latent_dim, row_effects,
        hurdle_parts, cutoff_mode, pooled_phi, shift_n, max_iter, restarts,
        variational_cov, optimizer):
    """Fit a cover GLLVM; writes the model JSON plus the ordination scores."""
    reader = cio.read_long_csv if long_format else cio.read_cover_csv
    data = reader(data_path, ordinal=(family == "cumulative-logit"))
    cov = _load_covariates(cov_path, data)
    spec = ModelSpec(family=family, latent_dim=latent_dim, row_effects=row_effects,
                     hurdle_parts=hurdle_parts, cutoff_mode=cutoff_mode,
                     shift_n=shift_n, pooled_precision=pooled_phi)
    opts = estimator.FitOptions(max_iterations=max_iter, n_restarts=restarts,
                                seed=ctx.obj["seed"], variational_cov=variational_cov,
                                optimizer=optimizer)
    model = estimator.fit(data, cov, spec, opts)
    cio.write_model(model, _out(ctx, "model.json"))
    if latent_dim >= 1:
        scores = ordination.model_scores(model)
        cio.write_scores_csv(_out(ctx, "ordination.csv"), scores.coords, model.site_names)
        plots.ordination_scatter(scores.coords, _out(ctx, "ordination.svg"),
                                 title=f"{family} ordination")
    _write_config(ctx, "fit", {"data": data_path, "long": long_format,
                               "covariates": cov_path,
                               "family": family, "latent_dim": latent_dim,
                               "row_effects": row_effects, "hurdle_parts": hurdle_parts,
                               "cutoff_mode": cutoff_mode, "pooled_phi": pooled_phi,
                               "shift_n": shift_n, "max_iter": max_iter,
                               "restarts": restarts, "variational_cov": variational_cov,
                               "optimizer": optimizer})
    dg = model.diagnostics
    click.echo(f"fit done: elbo={dg.final_elbo:.6g} converged={dg.converged} "
               f"restart={dg.best_restart}")


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def _site_map(model, site_names):
    lookup = {name: i for i, name in enumerate(model.site_names)}
    try:
        return np.array([lookup[s] for s in site_names], dtype=int)
    except KeyError as exc:
        raise click.ClickException(
            f"site {exc.args[0]!r} has no estimated latent score in the model")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--covariates", "cov_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--sites", "sites_path", type=click.Path(exists=True, dir_okay=False),
              help="Text file with one training-site id per prediction row.")
@click.option("--kind", type=click.Choice(["mean", "presence"]), default="mean",
              show_default=True)
@click.pass_context
@_runtime_errors
def predict(ctx, model_path, cov_path, sites_path, kind):
    """Predict expected cover (or presence probability) for mapped sites."""
    model = cio.read_model(model_path)
    if cov_path is not None:
        cov = cio.read_covariates_csv(cov_path)
        sites = cov.site_names
    elif sites_path is not None:
        with open(sites_path) as fh:
            sites = tuple(line.strip() for line in fh if line.strip())
        cov = CovariateMatrix(values=np.zeros((len(sites), 0)), site_names=sites)
    else:
        raise click.UsageError("predict needs --covariates or --sites")
    idx = _site_map(model, sites)
    if kind == "mean":
        pred = estimator.predict_expected(model, cov, idx)
    else:
        pred = estimator.predict_presence(model, cov, idx)
    out_name = "predictions.csv" if kind == "mean" else "presence.csv"
    cio.write_matrix_csv(_out(ctx, out_name), pred, sites, model.species_names)
    _write_config(ctx, "predict", {"model": model_path, "covariates": cov_path,
                                   "sites": sites_path, "kind": kind})
    click.echo(f"wrote {_out(ctx, out_name)}")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

@main.command()
@click.option("--predictions", "pred_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--observed", "obs_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--presence", "presence_path", type=click.Path(exists=True, dir_okay=False),
              help="Presence-probability CSV enabling AUC / Tjur R2.")
@click.option("--covariates", "cov_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--holdout-after", type=float, default=None,
              help="Score only rows whose year column exceeds this value.")
@click.option("--year-column", default="year", show_default=True)
@click.option("--prevalence-from", "prev_path", type=click.Path(exists=True, dir_okay=False),
              help="Complete panel used for species prevalences (default: observed).")
@click.option("--groups", "n_groups", default=5, show_default=True)
@click.pass_context
@_runtime_errors
def evaluate(ctx, pred_path, obs_path, presence_path, cov_path, holdout_after,
             year_column, prev_path, n_groups):
    """Score predictions against held-out data; writes metric tables and a figure."""
    observed = cio.read_cover_csv(obs_path)
    pred = cio.read_cover_csv(pred_path)
    if pred.site_names != observed.site_names or pred.species_names != observed.species_names:
        raise click.ClickException("predictions and observations must share sites and species")
    presence = None
    if presence_path is not None:
        presence = cio.read_cover_csv(presence_path)
        if presence.site_names != observed.site_names:
            raise click.ClickException("presence file must share the observation layout")
        presence = presence.values
    if holdout_after is not None:
        if cov_path is None:
            raise click.UsageError("--holdout-after requires --covariates with a year column")
        cov = cio.read_covariates_csv(cov_path)
        if year_column not in cov.names:
            raise click.ClickException(f"covariates lack a {year_column!r} column")
        years = cov.values[:, cov.names.index(year_column)]
        keep = years > holdout_after
        if not np.any(keep):
            raise click.ClickException("no rows fall after the holdout year")
        mask = observed.mask & keep[:, None]
        observed = type(observed)(values=observed.values, mask=mask,
                                  species_names=observed.species_names,
                                  site_names=observed.site_names)
    prevalence_data = cio.read_cover_csv(prev_path) if prev_path else None
    report = metrics.build_report(pred.values, observed, presence_probs=presence,
                                  prevalence_data=prevalence_data, n_groups=n_groups,
                                  metadata={"predictions": pred_path,
                                            "observed": obs_path,
                                            "holdout_after": holdout_after})
    report.write_csv(_out(ctx, "metrics_species.csv"), _out(ctx, "metrics_groups.csv"))
    report.to_json(_out(ctx, "metrics.json"))
    plots.metric_group_figure(report, _out(ctx, "metrics.svg"))
    _write_config(ctx, "evaluate", {"predictions": pred_path, "observed": obs_path,
                                    "presence": presence_path, "covariates": cov_path,
                                    "holdout_after": holdout_after,
                                    "year_column": year_column,
                                    "prevalence_from": prev_path, "groups": n_groups})
    click.echo(f"pooled: {report.pooled}")


# ---------------------------------------------------------------------------
# ordinate / nmds / procrustes
# ---------------------------------------------------------------------------

@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--groups-file", type=click.Path(exists=True, dir_okay=False),
              help="CSV with columns site,group for point coloring.")
@click.pass_context
@_runtime_errors
def ordinate(ctx, model_path, groups_file):
    """Export a fitted model's ordination scores as CSV and SVG."""
    model = cio.read_model(model_path)
    scores = ordination.model_scores(model)
    groups = None
    if groups_file:
        import csv as _csv
        with open(groups_file, newline="") as fh:
            table = {row[0]: row[1] for row in _csv.reader(fh) if row and row[0] != "site"}
        groups = [table.get(s, "?") for s in model.site_names]
    cio.write_scores_csv(_out(ctx, "ordination.csv"), scores.coords, model.site_names)
    plots.ordination_scatter(scores.coords, _out(ctx, "ordination.svg"), groups=groups,
                             title=f"{model.spec.family} ordination")
    _write_config(ctx, "ordinate", {"model": model_path, "groups_file": groups_file})
    click.echo(f"wrote {_out(ctx, 'ordination.csv')}")


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--metric", type=click.Choice(list(ordination.METRICS)),
              default="bray-curtis", show_default=True)
@click.option("--dim", default=2, show_default=True)
@click.option("--restarts", default=4, show_default=True)
@click.option("--max-iter", default=500, show_default=True)
@click.pass_context
@_runtime_errors
def nmds(ctx, data_path, metric, dim, restarts, max_iter):
    """Distance-based ordination baseline on a cover panel."""
    data = cio.read_cover_csv(data_path)
    if metric == "jaccard":
        data = simulation.to_presence_absence(data)
    diss = ordination.dissimilarity(data, metric)
    scores = ordination.nmds(diss, d=dim, n_restarts=restarts, seed=ctx.obj["seed"],
                             max_iter=max_iter)
    cio.write_scores_csv(_out(ctx, "nmds.csv"), scores.coords, data.site_names)
    plots.ordination_scatter(scores.coords, _out(ctx, "nmds.svg"),
                             title=f"NMDS ({metric}), stress={scores.stress:.4f}")
    _write_config(ctx, "nmds", {"data": data_path, "metric": metric, "dim": dim,
                                "restarts": restarts, "max_iter": max_iter,
                                "stress": scores.stress, "converged": scores.converged})
    click.echo(f"stress={scores.stress!r} converged={scores.converged}")


@main.command()
@click.option("--target", "target_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--candidate", "candidate_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@_runtime_errors
def procrustes(ctx, target_path, candidate_path):
    """Procrustes error between two score configurations."""
    target, _ = cio.read_scores_csv(target_path)
    candidate, _ = cio.read_scores_csv(candidate_path)
    err = ordination.procrustes_error(target, candidate)
    cio.write_run_config(_out(ctx, "procrustes.json"),
                         {"target": target_path, "candidate": candidate_path, "error": err})
    click.echo(repr(err))


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

@main.command()
@click.option("--generator", type=click.Choice(simulation.GENERATORS),
              default="ordered-beta", show_default=True)
@click.option("--p", "p_list", default="0.5", show_default=True,
              help="Comma-separated zero proportions.")
@click.option("--reps", default=30, show_default=True)
@click.option("--n", default=60, show_default=True)
@click.option("--m", default=40, show_default=True)
@click.option("--latent-dim", default=2, show_default=True)
@click.option("--one-prop", default=0.05, show_default=True)
@click.option("--phi", default=4.0, show_default=True)
@click.option("--methods", default=",".join(simulation.SWEEP_METHODS), show_default=True)
@click.option("--max-iter", default=300, show_default=True)
@click.option("--restarts", default=2, show_default=True)
@click.option("--shift-n", default=100, show_default=True)
@click.pass_context
@_runtime_errors
def sweep(ctx, generator, p_list, reps, n, m, latent_dim, one_prop, phi, methods,
          max_iter, restarts, shift_n):
    """Method-comparison sweep: simulate, fit, and summarize Procrustes errors."""
    try:
        zero_props = tuple(float(x) for x in p_list.split(","))
    except ValueError:
        raise click.UsageError("--p expects comma-separated numbers")
    method_list = tuple(s.strip() for s in methods.split(",") if s.strip())
    for mtd in method_list:
        if mtd not in simulation.SWEEP_METHODS:
            raise click.UsageError(
                f"unknown method {mtd!r}; choose from {', '.join(simulation.SWEEP_METHODS)}")
    design = simulation.SimDesign(generator=generator, n=n, m=m, d=latent_dim,
                                  zero_prop=zero_props[0], one_prop=one_prop,
                                  n_replicates=reps, seed=ctx.obj["seed"], phi_value=phi)
    opts = estimator.FitOptions(max_iterations=max_iter, n_restarts=restarts)
    result = simulation.run_sweep(design, methods=method_list, zero_props=zero_props,
                                  fit_options=opts, threads=ctx.obj["threads"],
                                  shift_n=shift_n)
    cio.write_sweep_csvs(result, _out(ctx, "sweep_raw.csv"), _out(ctx, "sweep_summary.csv"))
    plots.sweep_errorbars(result.summaries, _out(ctx, "sweep.svg"),
                          title=f"{generator} generator")
    _write_config(ctx, "sweep", result.metadata)
    click.echo(f"wrote {_out(ctx, 'sweep_summary.csv')} "
               f"({len(result.records)} records)")


if __name__ == "__main__":
    main()
