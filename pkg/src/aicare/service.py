"""HTTP serving layer for browsing a scored cohort and ad-hoc prediction.

The app is stateless with respect to requests: everything it needs (model
parameters, imputation fallbacks, normalization moments, feature names)
comes from one checkpoint file, so identical requests against the same
checkpoint return identical risks. An optional cohort can be mounted for
the browsing endpoints; without one, those endpoints explain what to mount.

Endpoints:

* ``GET  /healthz``                      liveness plus the checkpoint id
* ``GET  /api/patients``                 paged patient directory
* ``GET  /api/patients/{id}/trajectory`` per-visit risk and attention
* ``POST /api/predict``                  score a raw patient payload
* ``GET  /api/statistics/features``      attention curve analysis artifacts

Malformed predict payloads get a 400 whose detail lists every missing and
unknown field by name, so a client can fix all of them in one pass.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from fastapi import Depends, FastAPI, Header, HTTPException, Query

from .model import ACTIVATIONS, ModelConfig, ModelParams, forward_batch, load_checkpoint
from .preprocess import NormStats, Preprocessor
from .records import (BASELINE_FIELDS, Cohort, Outcome, PatientRecord,
                      anonymize_dates, load_cohort)


@dataclass(frozen=True)
class ServeConfig:
    """Everything the app factory needs.

    ``visits/baseline/outcomes`` drag in a cohort for the browsing
    endpoints; ``analysis_path`` points at the directory the
    interpretation step wrote (``curves.json`` + ``heatmap.json``), or
    directly at a ``curves.json`` file. ``spec_path`` optionally names
    the generator spec whose units and reference ranges annotate the
    statistics payload. ``auth_token``, when set, gates every ``/api``
    route behind a bearer token.
    """

    checkpoint_path: str
    visits_path: str | None = None
    baseline_path: str | None = None
    outcomes_path: str | None = None
    analysis_path: str | None = None
    spec_path: str | None = None
    auth_token: str | None = None
    anonymize_dates: bool = False
    disclose_outcomes: bool = True


def preprocessor_from_extras(extras: dict, feature_names) -> Preprocessor:
    """Rebuild the fitted preprocessor stored in a checkpoint's extras."""
    pp = extras["preprocess"]
    arr = lambda key: np.array(pp[key], dtype=float)
    stats = NormStats(mean=arr("mean"), std=arr("std"),
                      scaled=np.array(pp["scaled"], dtype=bool),
                      baseline_mean=arr("baseline_mean"),
                      baseline_std=arr("baseline_std"),
                      baseline_scaled=np.array(pp["baseline_scaled"], dtype=bool))
    return Preprocessor(tuple(feature_names), arr("fallback"), stats)


def preprocessor_to_extras(prep: Preprocessor) -> dict:
    s = prep.stats
    return {"preprocess": {
        "fallback": prep.fallback.tolist(),
        "mean": s.mean.tolist(), "std": s.std.tolist(),
        "scaled": s.scaled.tolist(),
        "baseline_mean": s.baseline_mean.tolist(),
        "baseline_std": s.baseline_std.tolist(),
        "baseline_scaled": s.baseline_scaled.tolist(),
    }}


def _load_analysis(analysis_path: str, spec_path: str | None) -> dict | None:
    """Compose the statistics payload from the interpretation artifacts.

    ``analysis_path`` is the interpret output directory or its
    ``curves.json``; a sibling ``heatmap.json`` is picked up when present.
    A spec file, when given, contributes units and reference ranges.
    Missing analysis files leave the payload None (the endpoint answers
    503 with a remediation hint); a missing explicit spec file is a
    startup error.
    """
    if os.path.isdir(analysis_path):
        curves_path = os.path.join(analysis_path, "curves.json")
    else:
        curves_path = analysis_path
    try:
        with open(curves_path) as fh:
            curves = json.load(fh)
    except FileNotFoundError:
        return None
    heatmap = None
    heatmap_path = os.path.join(os.path.dirname(curves_path), "heatmap.json")
    if os.path.exists(heatmap_path):
        with open(heatmap_path) as fh:
            heatmap = json.load(fh)
    features: dict[str, dict] = {}
    if spec_path:
        with open(spec_path) as fh:
            spec = json.load(fh)
        for f in spec.get("features", []):
            rr = f.get("reference_range")
            features[f["name"]] = {
                "unit": f.get("unit", ""),
                "reference_range": list(rr) if rr else None,
            }
    return {"curves": curves, "heatmap": heatmap, "features": features}


class ServiceState:
    """Checkpoint, preprocessor, and (optionally) a browsable cohort."""

    def __init__(self, config: ServeConfig):
        self.config = config
        params, model_config, extras = load_checkpoint(config.checkpoint_path)
        self.params: ModelParams = params
        self.model_config: ModelConfig = model_config
        self.feature_names: tuple[str, ...] = tuple(extras["feature_names"])
        self.preprocessor = preprocessor_from_extras(extras, self.feature_names)
        with open(config.checkpoint_path, "rb") as fh:
            self.checkpoint_id = hashlib.sha256(fh.read()).hexdigest()[:16]

        self.cohort: Cohort | None = None
        if config.visits_path and config.baseline_path and config.outcomes_path:
            cohort = load_cohort(config.visits_path, config.baseline_path,
                                 config.outcomes_path,
                                 expected_features=self.feature_names)
            if config.anonymize_dates:
                cohort = anonymize_dates(cohort)
            self.cohort = cohort

        self.analysis: dict | None = None
        if config.analysis_path:
            self.analysis = _load_analysis(config.analysis_path, config.spec_path)

    def trajectory(self, record: PatientRecord, activation: str | None = None) -> dict:
        ready = self.preprocessor.apply_record(record)
        ts = list(range(1, record.num_visits + 1))
        risk, alpha, _ = forward_batch(ready, ts, self.params, self.model_config,
                                       activation=activation)
        visits = []
        for i, t in enumerate(ts):
            observed = {name: (None if np.isnan(record.values[t - 1, j])
                               else float(record.values[t - 1, j]))
                        for j, name in enumerate(self.feature_names)}
            visits.append({
                "visit_index": t,
                "date": record.dates[t - 1].isoformat(),
                "risk": float(risk.data[i]),
                "attention": {name: float(alpha.data[i, j])
                              for j, name in enumerate(self.feature_names)},
                "values": observed,
            })
        out = {
            "patient_id": record.patient_id,
            "baseline": {name: float(record.baseline[j])
                         for j, name in enumerate(BASELINE_FIELDS)},
            "visits": visits,
        }
        if self.config.disclose_outcomes:
            o = record.outcome
            out["outcome"] = {"status": o.status,
                              "death_date": o.death_date.isoformat() if o.death_date else None,
                              "cause": o.cause}
        return out


def _parse_predict_payload(body: dict, feature_names) -> tuple[PatientRecord | None, dict]:
    """Validate by hand so the 400 detail can name every bad field at once."""
    problems = {"missing_baseline": [], "unknown_baseline": [],
                "unknown_features": [], "errors": []}
    if not isinstance(body, dict):
        problems["errors"].append("body must be a JSON object")
        return None, problems

    baseline_in = body.get("baseline")
    if not isinstance(baseline_in, dict):
        problems["errors"].append("'baseline' must be an object")
        baseline_in = {}
    for name in BASELINE_FIELDS:
        if name not in baseline_in:
            problems["missing_baseline"].append(name)
    for name in baseline_in:
        if name not in BASELINE_FIELDS:
            problems["unknown_baseline"].append(name)

    visits_in = body.get("visits")
    if not isinstance(visits_in, list) or not visits_in:
        problems["errors"].append("'visits' must be a non-empty array")
        visits_in = []

    known = set(feature_names)
    dates: list[dt.date] = []
    rows: list[np.ndarray] = []
    for i, visit in enumerate(visits_in):
        if not isinstance(visit, dict):
            problems["errors"].append(f"visits[{i}] must be an object")
            continue
        date_s = visit.get("date")
        try:
            date = dt.date.fromisoformat(str(date_s))
        except (TypeError, ValueError):
            problems["errors"].append(f"visits[{i}].date is not an ISO date: {date_s!r}")
            date = None
        values_in = visit.get("values")
        if not isinstance(values_in, dict):
            problems["errors"].append(f"visits[{i}].values must be an object")
            values_in = {}
        for name in values_in:
            if name not in known and name not in problems["unknown_features"]:
                problems["unknown_features"].append(name)
        row = np.full(len(feature_names), np.nan)
        for j, name in enumerate(feature_names):
            v = values_in.get(name)
            if v is None:
                continue
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                problems["errors"].append(f"visits[{i}].values.{name} must be a number or null")
                continue
            row[j] = float(v)
        if date is not None:
            dates.append(date)
            rows.append(row)

    if dates and any(b <= a for a, b in zip(dates, dates[1:])):
        problems["errors"].append("visit dates must be strictly increasing")

    bad_baseline_values = []
    baseline = np.zeros(len(BASELINE_FIELDS))
    for j, name in enumerate(BASELINE_FIELDS):
        v = baseline_in.get(name)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            if name in baseline_in:
                bad_baseline_values.append(name)
            continue
        baseline[j] = float(v)
    for name in bad_baseline_values:
        problems["errors"].append(f"baseline.{name} must be a number")

    if any(problems[k] for k in problems):
        return None, problems
    record = PatientRecord("adhoc", tuple(dates), np.vstack(rows), baseline,
                           Outcome("alive"))
    return record, problems


def create_app(config: ServeConfig) -> FastAPI:
    state = ServiceState(config)
    app = FastAPI(title="dynamic mortality risk service", docs_url=None, redoc_url=None)
    app.state.service = state

    def require_auth(authorization: str | None = Header(default=None)):
        if config.auth_token is None:
            return
        expected = f"Bearer {config.auth_token}"
        if authorization != expected:
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    def need_cohort() -> Cohort:
        if state.cohort is None:
            raise HTTPException(
                status_code=503,
                detail="no cohort mounted; start the service with visit, baseline, "
                       "and outcome files to enable patient browsing")
        return state.cohort

    def check_activation(activation: str | None):
        if activation is not None and activation not in ACTIVATIONS:
            raise HTTPException(status_code=400,
                                detail=f"activation must be one of {list(ACTIVATIONS)}")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "checkpoint_id": state.checkpoint_id}

    @app.get("/api/patients", dependencies=[Depends(require_auth)])
    def list_patients(limit: int = Query(default=50, ge=1, le=500),
                      offset: int = Query(default=0, ge=0)):
        cohort = need_cohort()
        page = cohort.patients[offset:offset + limit]
        rows = []
        for p in page:
            row = {"patient_id": p.patient_id,
                   "num_visits": p.num_visits,
                   "first_visit": p.dates[0].isoformat(),
                   "last_visit": p.dates[-1].isoformat()}
            if config.disclose_outcomes:
                row["status"] = p.outcome.status
                row["cause"] = p.outcome.cause
            rows.append(row)
        return {"total": len(cohort.patients), "offset": offset, "patients": rows}

    @app.get("/api/patients/{patient_id}/trajectory",
             dependencies=[Depends(require_auth)])
    def trajectory(patient_id: str, activation: str | None = None):
        cohort = need_cohort()
        check_activation(activation)
        try:
            record = cohort.by_id(patient_id)
        except KeyError:
            raise HTTPException(status_code=404,
                                detail=f"unknown patient id {patient_id!r}")
        return state.trajectory(record, activation)

    @app.post("/api/predict", dependencies=[Depends(require_auth)])
    def predict(body: dict, activation: str | None = None):
        check_activation(activation)
        record, problems = _parse_predict_payload(body, state.feature_names)
        if record is None:
            raise HTTPException(status_code=400, detail=problems)
        out = state.trajectory(record, activation)
        out.pop("patient_id", None)
        out.pop("outcome", None)
        return out

    @app.get("/api/statistics/features", dependencies=[Depends(require_auth)])
    def statistics():
        if state.analysis is None:
            raise HTTPException(
                status_code=503,
                detail="no analysis artifacts mounted; run the interpret command "
                       "to produce curves.json and pass its path at startup")
        return state.analysis

    return app
