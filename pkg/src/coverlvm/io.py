"""CSV ingestion, model serialization, and output writers.

Wide CSV layout throughout: header row, first column the site id, one
column per species (or covariate).  Empty response cells are missing and
masked; covariates must be complete.  All writers are atomic
(write-to-temp then rename) and format floats with repr for exact
round-trips.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile

import numpy as np

from .errors import CsvFormatError, ModelFormatError
from .estimator import FitDiagnostics, FittedModel
from .model import CovariateMatrix, ModelSpec, ParameterSet, ResponseMatrix, VariationalState

MODEL_FORMAT_VERSION = "1.0"


# ---------------------------------------------------------------------------
# atomic writing
# ---------------------------------------------------------------------------

def atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _rows_to_csv(rows):
    out = []
    for row in rows:
        out.append(",".join(_fmt(c) for c in row))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# readers
# ---------------------------------------------------------------------------

def _read_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if len(rows) < 2:
        raise CsvFormatError(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise CsvFormatError(f"{path}: need a site-id column plus at least one value column")
    return header, rows[1:]


def read_cover_csv(path, ordinal=False):
    """Read a sites x species panel; empty cells become masked cells."""
    header, body = _read_table(path)
    species = tuple(header[1:])
    sites, values, mask = [], [], []
    seen = set()
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise CsvFormatError(
                f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        site = row[0].strip()
        if site in seen:
            raise CsvFormatError(f"{path}: duplicate site id {site!r} at row {r}")
        seen.add(site)
        sites.append(site)
        vrow, mrow = [], []
        for c, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell == "":
                vrow.append(1.0 if ordinal else 0.0)
                mrow.append(False)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise CsvFormatError(
                    f"{path}: row {r}, column {species[c]!r}: not a number: {cell!r}")
            if ordinal:
                if v != round(v) or v < 1:
                    raise CsvFormatError(
                        f"{path}: row {r}, column {species[c]!r}: "
                        f"ordinal labels must be integers >= 1, got {cell}")
            elif not 0.0 <= v <= 1.0:
                raise CsvFormatError(
                    f"{path}: row {r}, column {species[c]!r}: "
                    f"cover value {cell} outside [0, 1]")
            vrow.append(v)
            mrow.append(True)
        values.append(vrow)
        mask.append(mrow)
    return ResponseMatrix(values=np.asarray(values, dtype=float),
                          mask=np.asarray(mask, dtype=bool),
                          species_names=species, site_names=tuple(sites),
                          ordinal=ordinal)


def read_long_csv(path, ordinal=False):
    """Read a long-format panel: columns site, species, value.

    Unlisted (site, species) pairs become masked cells; duplicate pairs are
    rejected.
    """
    header, body = _read_table(path)
    if len(header) != 3:
        raise CsvFormatError(f"{path}: long format needs exactly site,species,value columns")
    cells = {}
    sites, species = [], []
    for r, row in enumerate(body, start=2):
        if len(row) != 3:
            raise CsvFormatError(f"{path}: row {r} has {len(row)} cells, expected 3")
        site, sp, cell = (c.strip() for c in row)
        if site not in sites:
            sites.append(site)
        if sp not in species:
            species.append(sp)
        if (site, sp) in cells:
            raise CsvFormatError(f"{path}: duplicate cell ({site!r}, {sp!r}) at row {r}")
        try:
            v = float(cell)
        except ValueError:
            raise CsvFormatError(f"{path}: row {r}: not a number: {cell!r}")
        if ordinal:
            if v != round(v) or v < 1:
                raise CsvFormatError(
                    f"{path}: row {r}: ordinal labels must be integers >= 1, got {cell}")
        elif not 0.0 <= v <= 1.0:
            raise CsvFormatError(f"{path}: row {r}: cover value {cell} outside [0, 1]")
        cells[(site, sp)] = v
    values = np.full((len(sites), len(species)), 1.0 if ordinal else 0.0)
    mask = np.zeros((len(sites), len(species)), dtype=bool)
    for (site, sp), v in cells.items():
        i, j = sites.index(site), species.index(sp)
        values[i, j] = v
        mask[i, j] = True
    return ResponseMatrix(values=values, mask=mask, species_names=tuple(species),
                          site_names=tuple(sites), ordinal=ordinal)


def read_covariates_csv(path):
    """Read a sites x covariates table; every cell must be a finite number."""
    header, body = _read_table(path)
    names = tuple(header[1:])
    sites, values = [], []
    seen = set()
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise CsvFormatError(
                f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        site = row[0].strip()
        if site in seen:
            raise CsvFormatError(f"{path}: duplicate site id {site!r} at row {r}")
        seen.add(site)
        sites.append(site)
        vrow = []
        for c, cell in enumerate(row[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise CsvFormatError(
                    f"{path}: row {r}, column {names[c]!r}: not a number: {cell!r}")
            if not np.isfinite(v):
                raise CsvFormatError(
                    f"{path}: row {r}, column {names[c]!r}: value must be finite")
            vrow.append(v)
        values.append(vrow)
    return CovariateMatrix(values=np.asarray(values, dtype=float), names=names,
                           site_names=tuple(sites))


def read_scores_csv(path):
    """Read an ordination-scores table (site, dim1, dim2, ...)."""
    header, body = _read_table(path)
    sites, rows = [], []
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise CsvFormatError(
                f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        sites.append(row[0].strip())
        try:
            rows.append([float(c) for c in row[1:]])
        except ValueError:
            raise CsvFormatError(f"{path}: row {r}: non-numeric coordinate")
    return np.asarray(rows, dtype=float), tuple(sites)


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def write_matrix_csv(path, values, site_names, column_names, mask=None,
                     id_header="site"):
    values = np.asarray(values)
    rows = [[id_header, *column_names]]
    for i, site in enumerate(site_names):
        row = [site]
        for j in range(values.shape[1]):
            if mask is not None and not mask[i, j]:
                row.append("")
            else:
                row.append(float(values[i, j]))
        rows.append(row)
    atomic_write_text(path, _rows_to_csv(rows))


def write_scores_csv(path, coords, site_names=None, extra=None):
    coords = np.asarray(coords)
    d = coords.shape[1]
    names = site_names or tuple(f"site{i + 1}" for i in range(coords.shape[0]))
    header = ["site", *(f"dim{k + 1}" for k in range(d))]
    extra = extra or {}
    header += list(extra.keys())
    rows = [header]
    for i, site in enumerate(names):
        row = [site, *(float(coords[i, k]) for k in range(d))]
        row += [extra[k][i] for k in extra]
        rows.append(row)
    atomic_write_text(path, _rows_to_csv(rows))


def write_sweep_csvs(result, raw_path, summary_path):
    raw_rows = [["generator", "method", "zero_prop", "replicate", "error",
                 "seconds", "converged"]]
    for rec in result.records:
        raw_rows.append([rec.generator, rec.method, float(rec.zero_prop), rec.replicate,
                         float(rec.error), float(rec.seconds), int(rec.converged)])
    atomic_write_text(raw_path, _rows_to_csv(raw_rows))
    sum_rows = [["method", "zero_prop", "mean_error", "sd_error", "n_kept"]]
    for s in result.summaries:
        sum_rows.append([s.method, float(s.zero_prop), float(s.mean_error),
                         float(s.sd_error), s.n_kept])
    atomic_write_text(summary_path, _rows_to_csv(sum_rows))


def write_run_config(path, config):
    atomic_write_text(path, json.dumps(config, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# model serialization
# ---------------------------------------------------------------------------

def _arr(x):
    return None if x is None else np.asarray(x).tolist()


def write_model(model, path):
    """Serialize a fitted model to versioned JSON."""
    spec = model.spec
    params = model.params
    cutoffs = params.cutoffs
    if isinstance(cutoffs, tuple):
        cut_doc = [np.asarray(c).tolist() for c in cutoffs]
    else:
        cut_doc = _arr(cutoffs)
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "spec": {
            "family": spec.family, "latent_dim": spec.latent_dim,
            "row_effects": spec.row_effects, "hurdle_parts": spec.hurdle_parts,
            "cutoff_mode": spec.cutoff_mode,
            "ordinal_bounds": None if spec.ordinal_bounds is None else list(spec.ordinal_bounds),
            "shift_n": spec.shift_n, "pooled_precision": spec.pooled_precision,
        },
        "names": {
            "species": list(model.species_names),
            "sites": list(model.site_names),
            "covariates": list(model.covariate_names),
        },
        "class_counts": (None if model.class_counts is None
                         else np.asarray(model.class_counts).tolist()),
        "parameters": {
            "intercepts": {p: _arr(v) for p, v in params.intercepts.items()},
            "slopes": {p: _arr(v) for p, v in params.slopes.items()},
            "loadings": {p: _arr(v) for p, v in params.loadings.items()},
            "log_precisions": _arr(params.log_precisions),
            "cutoffs": cut_doc,
            "row_effects": _arr(params.row_effects),
        },
        "variational": {
            "means": _arr(model.vstate.means),
            "covariances": _arr(model.vstate.covariances),
            "kind": model.vstate.kind,
        },
        "diagnostics": {
            "final_elbo": model.diagnostics.final_elbo,
            "iterations": model.diagnostics.iterations,
            "grad_inf_norm": model.diagnostics.grad_inf_norm,
            "best_restart": model.diagnostics.best_restart,
            "converged": model.diagnostics.converged,
            "restart_elbos": list(model.diagnostics.restart_elbos),
        },
    }
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def read_model(path):
    """Inverse of :func:`write_model`; refuses incompatible format versions."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a valid model file ({exc})") from exc
    try:
        version = doc["format_version"]
        if version.split(".")[0] != MODEL_FORMAT_VERSION.split(".")[0]:
            raise ModelFormatError(
                f"{path}: format version {version} needs migration; "
                f"this build reads {MODEL_FORMAT_VERSION}")
        s = doc["spec"]
        spec = ModelSpec(family=s["family"], latent_dim=s["latent_dim"],
                         row_effects=s["row_effects"], hurdle_parts=s["hurdle_parts"],
                         cutoff_mode=s["cutoff_mode"],
                         ordinal_bounds=(None if s["ordinal_bounds"] is None
                                         else tuple(s["ordinal_bounds"])),
                         shift_n=s["shift_n"], pooled_precision=s["pooled_precision"])
        p = doc["parameters"]
        cutoffs = p["cutoffs"]
        if cutoffs is not None:
            if spec.family == "cumulative-logit" and spec.cutoff_mode == "species-specific":
                cutoffs = tuple(np.asarray(c, dtype=float) for c in cutoffs)
            else:
                cutoffs = np.asarray(cutoffs, dtype=float)
        params = ParameterSet(
            intercepts={k: (None if v is None else np.asarray(v, dtype=float))
                        for k, v in p["intercepts"].items()},
            slopes={k: np.asarray(v, dtype=float) for k, v in p["slopes"].items()},
            loadings={k: np.asarray(v, dtype=float) for k, v in p["loadings"].items()},
            log_precisions=(None if p["log_precisions"] is None
                            else np.asarray(p["log_precisions"], dtype=float)),
            cutoffs=cutoffs,
            row_effects=(None if p["row_effects"] is None
                         else np.asarray(p["row_effects"], dtype=float)),
        )
        v = doc["variational"]
        vstate = VariationalState(means=np.asarray(v["means"], dtype=float),
                                  covariances=np.asarray(v["covariances"], dtype=float),
                                  kind=v["kind"])
        dg = doc["diagnostics"]
        diagnostics = FitDiagnostics(
            final_elbo=dg["final_elbo"], iterations=dg["iterations"],
            grad_inf_norm=dg["grad_inf_norm"], best_restart=dg["best_restart"],
            converged=dg["converged"], restart_elbos=tuple(dg["restart_elbos"]))
        names = doc["names"]
        cc = doc["class_counts"]
        if cc is not None and not np.isscalar(cc):
            cc = tuple(int(c) for c in cc)
        return FittedModel(spec=spec, params=params, vstate=vstate,
                           diagnostics=diagnostics,
                           species_names=tuple(names["species"]),
                           site_names=tuple(names["sites"]),
                           covariate_names=tuple(names["covariates"]),
                           class_counts=cc)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: malformed model document ({exc})") from exc
