"""Local HTTP JSON service over a completed run directory: read endpoints for
the explorer UI plus the expert veto/rebuild loop.

The run directory is never mutated; vetoes and rebuilt ensembles are written
to a sibling session directory. Mutations are serialized behind one lock;
reads see a consistent snapshot.
"""

from __future__ import annotations

import csv
import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .data import CLASSIFICATION
from .ensemble import Ensemble, fit_stacking, risk_stratify
from .pipeline import PipelineResult, load_run
from .search import SearchBudget, search_constituent
from .tree import evaluate


class VetoError(ValueError):
    pass


@dataclass
class Veto:
    kind: str      # "model" | "cluster" | "feature"
    target: str
    reason: str
    timestamp: float

    def to_dict(self) -> dict:
        return {"kind": self.kind, "target": self.target,
                "reason": self.reason, "timestamp": self.timestamp}


@dataclass
class SessionState:
    """Mutable expert-session state layered over an immutable run."""

    run: PipelineResult
    session_dir: Path
    vetoes: list[Veto] = field(default_factory=list)
    ensemble: Ensemble | None = None
    stale: bool = False
    rebuilt_metrics: dict | None = None
    rebuild_count: int = 0

    def __post_init__(self):
        if self.ensemble is None:
            self.ensemble = self.run.ensemble

    # -- veto bookkeeping -------------------------------------------------
    def vetoed_model_ids(self) -> set[str]:
        return {v.target for v in self.vetoes if v.kind == "model"}

    def vetoed_clusters(self) -> set[int]:
        return {int(v.target) for v in self.vetoes if v.kind == "cluster"}

    def barred_features(self) -> set[int]:
        names = {v.target for v in self.vetoes if v.kind == "feature"}
        schema = self.run.train.schema
        return {schema.index_of(n) for n in names}

    def _eligible_member_ids(self, cluster: int) -> list[str]:
        barred = self.barred_features()
        vetoed = self.vetoed_model_ids()
        members = {m.id: m for m in self.run.rset.members}
        out = []
        for mid in self.run.clusters.members_of(cluster):
            if mid in vetoed or mid not in members:
                continue
            if any(j in barred for j in members[mid].subset.indices):
                continue
            out.append(mid)
        return out

    def _surviving_clusters(self, extra: list[Veto]) -> list[int]:
        """Clusters that would still contribute a constituent after the
        vetoes: model/cluster vetoes remove without replacement; only a
        feature veto re-opens a cluster's search."""
        trial = SessionState(run=self.run, session_dir=self.session_dir,
                             vetoes=self.vetoes + extra,
                             ensemble=self.ensemble)
        barred = trial.barred_features()
        vetoed_models = trial.vetoed_model_ids()
        vetoed_clusters = trial.vetoed_clusters()
        alive = []
        for c, current in enumerate(self.run.ensemble.constituents):
            if c in vetoed_clusters or current.id in vetoed_models:
                continue
            if any(j in barred for j in current.subset.indices):
                if trial._eligible_member_ids(c):
                    alive.append(c)
                continue
            alive.append(c)
        return alive

    def apply_veto(self, targets: dict, reason: str) -> list[Veto]:
        """Validate and record vetoes; rejects a veto that would leave no
        cluster able to contribute a constituent."""
        new: list[Veto] = []
        now = time.time()
        member_ids = {m.id for m in self.run.rset.members}
        constituent_ids = {c.id for c in self.run.ensemble.constituents}
        for mid in targets.get("models", []):
            if mid not in member_ids and mid not in constituent_ids:
                raise VetoError(f"unknown model id: {mid}")
            new.append(Veto("model", mid, reason, now))
        for cid in targets.get("clusters", []):
            if not 0 <= int(cid) < self.run.clusters.k:
                raise VetoError(f"unknown cluster id: {cid}")
            new.append(Veto("cluster", str(int(cid)), reason, now))
        for name in targets.get("features", []):
            if name not in self.run.train.schema.names:
                raise VetoError(f"unknown feature name: {name}")
            new.append(Veto("feature", name, reason, now))
        if not new:
            raise VetoError("no veto targets given")
        if not self._surviving_clusters(new):
            raise VetoError("veto rejected: it would empty the ensemble "
                            "(no cluster retains an eligible member)")
        self.vetoes.extend(new)
        self.stale = True
        self._persist_vetoes(new)
        return new

    def rebuild(self) -> dict:
        """Model/cluster vetoes remove constituents outright; feature vetoes
        re-run only the affected clusters' searches with the features barred.
        Candidate sampling is never re-run."""
        run = self.run
        barred = self.barred_features()
        vetoed_models = self.vetoed_model_ids()
        vetoed_clusters = self.vetoed_clusters()
        config = run.config
        budget = SearchBudget(
            m=config.search_m if config.search_m is not None
            else min(10, run.train.d),
            max_expansions=config.max_expansions, lam=config.lam)

        constituents = []
        for c, current in enumerate(run.ensemble.constituents):
            if c in vetoed_clusters or current.id in vetoed_models:
                continue
            if not any(j in barred for j in current.subset.indices):
                constituents.append(current)
                continue
            if not self._eligible_member_ids(c):
                continue
            constituents.append(search_constituent(
                c, run.clusters, run.rset, run.train, run.val, budget,
                ensemble_loss=config.ensemble_loss_search,
                barred_features=barred,
                excluded_member_ids=vetoed_models))
        if not constituents:
            raise VetoError("rebuild would empty the ensemble")

        if run.ensemble.combiner == "stacking":
            ens = fit_stacking(constituents, run.train,
                               seed=run.manifest["seeds"]["stacking"])
        else:
            ens = Ensemble(constituents=constituents, task=run.train.task,
                           combiner="voting",
                           vote_threshold=run.ensemble.vote_threshold)
        self.ensemble = ens
        self.stale = False
        self.rebuild_count += 1
        self.rebuilt_metrics = {
            "val": evaluate(ens, run.val),
            "test": evaluate(ens, run.test),
            "n_constituents": len(constituents),
        }
        self.session_dir.mkdir(parents=True, exist_ok=True)
        ens.save(self.session_dir / f"ensemble_rebuild_{self.rebuild_count}.json")
        self._persist_state()
        return self.rebuilt_metrics

    # -- persistence ------------------------------------------------------
    def _persist_vetoes(self, new: list[Veto]):
        self.session_dir.mkdir(parents=True, exist_ok=True)
        with open(self.session_dir / "vetoes.jsonl", "a") as fh:
            for v in new:
                fh.write(json.dumps(v.to_dict(), sort_keys=True) + "\n")
        self._persist_state()

    def _persist_state(self):
        self.session_dir.mkdir(parents=True, exist_ok=True)
        (self.session_dir / "state.json").write_text(json.dumps(
            self.snapshot_state(), sort_keys=True, indent=2))

    # -- read snapshots ---------------------------------------------------
    def snapshot_state(self) -> dict:
        man = self.run.manifest.doc
        return {
            "version": man["version"],
            "dataset": man["dataset"]["task"],
            "features": man["dataset"]["features"],
            "rashomon": man["rashomon"],
            "clusters": man["clusters"],
            "constituents": [
                {"id": c.id,
                 "subset": [self.run.train.schema.names[j]
                            for j in c.subset.indices],
                 "val_loss": c.val_loss}
                for c in self.ensemble.constituents],
            "combiner": self.ensemble.combiner,
            "metrics": man["ensemble"]["metrics"],
            "vetoes": [v.to_dict() for v in self.vetoes],
            "stale": self.stale,
            "rebuilt_metrics": self.rebuilt_metrics,
            "rebuild_count": self.rebuild_count,
        }

    def snapshot_clusters(self) -> dict:
        rows = []
        report = Path(self.run.config.out_dir) / "clusters.csv"
        if report.exists():
            with open(report, newline="") as fh:
                reader = csv.DictReader(fh)
                for r in reader:
                    rows.append({"model_id": r["model_id"],
                                 "cluster": int(r["cluster"]),
                                 "x": float(r["x"]), "y": float(r["y"]),
                                 "silhouette": float(r["silhouette"])})
        return {"k": self.run.clusters.k,
                "silhouette": self.run.clusters.silhouette,
                "clusteroid_ids": self.run.clusters.clusteroid_ids,
                "members": rows}

    def snapshot_model(self, model_id: str) -> dict:
        for m in self.run.rset.members + self.ensemble.constituents:
            if m.id == model_id:
                names = self.run.train.schema.names
                expl = (sorted(
                    ({"feature": names[j], "weight": float(m.explanation.e[j])}
                     for j in range(len(names))),
                    key=lambda r: -abs(r["weight"]))
                    if m.explanation is not None else None)
                return {"id": m.id,
                        "subset": [names[j] for j in m.subset.indices],
                        "val_loss": m.val_loss,
                        "n_nodes": m.tree.n_nodes,
                        "explanation": expl}
        raise VetoError(f"unknown model id: {model_id}")

    def snapshot_ensemble(self) -> dict:
        run = self.run
        ens = self.ensemble
        out = {"combiner": ens.combiner,
               "constituents": [c.id for c in ens.constituents],
               "stale": self.stale}
        if run.train.task == CLASSIFICATION:
            vr = ens.voting_ratios(run.test.rows)
            n_c = len(ens.constituents)
            counts = np.bincount(np.rint(vr * n_c).astype(int),
                                 minlength=n_c + 1)
            voting_twin = (ens if ens.combiner == "voting" else Ensemble(
                constituents=ens.constituents, task=ens.task,
                combiner="voting", vote_threshold=ens.vote_threshold))
            out["agreement_histogram"] = {
                "ratios": [i / n_c for i in range(n_c + 1)],
                "counts": counts.tolist()}
            out["risk_strata"] = risk_stratify(
                voting_twin, run.test, run.config.risk_bins)
            out["metrics"] = {"val": evaluate(ens, run.val),
                              "test": evaluate(ens, run.test)}
        return out

    def snapshot_drift(self) -> dict:
        drift = self.run.manifest.doc.get("drift")
        if drift is None:
            raise VetoError("no drift report in this run")
        return drift


def _json_error(code: int, message: str, stage: str) -> bytes:
    return json.dumps({"code": code, "message": message,
                       "stage": stage}).encode()


def make_handler(state: SessionState, static_dir: Path | None):
    lock = threading.Lock()

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _send(self, code: int, body: bytes,
                  ctype: str = "application/json"):
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_json(self, doc, code: int = 200):
            self._send(code, json.dumps(doc).encode())

        def do_GET(self):
            path = self.path.split("?")[0].rstrip("/") or "/"
            try:
                if path == "/api/state":
                    with lock:
                        return self._send_json(state.snapshot_state())
                if path == "/api/clusters":
                    with lock:
                        return self._send_json(state.snapshot_clusters())
                if path.startswith("/api/models/"):
                    model_id = path.rsplit("/", 1)[1]
                    with lock:
                        return self._send_json(state.snapshot_model(model_id))
                if path == "/api/ensemble":
                    with lock:
                        return self._send_json(state.snapshot_ensemble())
                if path == "/api/drift":
                    with lock:
                        return self._send_json(state.snapshot_drift())
                if path.startswith("/api/"):
                    return self._send(404, _json_error(404, "unknown endpoint",
                                                       "serve"))
                return self._serve_static(path)
            except VetoError as err:
                return self._send(404, _json_error(404, str(err), "serve"))
            except Exception as err:  # surfaced verbatim to the client
                return self._send(500, _json_error(500, str(err), "serve"))

        def _serve_static(self, path: str):
            if static_dir is None:
                return self._send(404, _json_error(404, "no UI built",
                                                   "serve"))
            rel = "index.html" if path == "/" else path.lstrip("/")
            target = (static_dir / rel).resolve()
            if not str(target).startswith(str(static_dir.resolve())) \
                    or not target.is_file():
                return self._send(404, _json_error(404, "not found", "serve"))
            ctype = {"html": "text/html", "js": "text/javascript",
                     "css": "text/css", "json": "application/json",
                     "svg": "image/svg+xml",
                     "map": "application/json"}.get(
                         target.suffix.lstrip("."), "application/octet-stream")
            return self._send(200, target.read_bytes(), ctype)

        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length) if length else b"{}"
            try:
                body = json.loads(raw.decode() or "{}")
            except json.JSONDecodeError:
                return self._send(400, _json_error(400, "invalid JSON",
                                                   "veto"))
            path = self.path.split("?")[0].rstrip("/")
            try:
                if path == "/api/veto":
                    with lock:
                        new = state.apply_veto(body.get("targets", {}),
                                               body.get("reason", ""))
                    return self._send_json(
                        {"applied": [v.to_dict() for v in new],
                         "stale": True})
                if path == "/api/rebuild":
                    with lock:
                        metrics = state.rebuild()
                    return self._send_json(
                        {"rebuilt": True, "metrics": metrics,
                         "state": state.snapshot_state()})
                return self._send(404, _json_error(404, "unknown endpoint",
                                                   "serve"))
            except VetoError as err:
                return self._send(409, _json_error(409, str(err), "veto"))
            except Exception as err:
                return self._send(500, _json_error(500, str(err), "rebuild"))

    return Handler


def session_dir_for(run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    return run_dir.parent / (run_dir.name + "-session")


def create_server(run_dir: str | Path, port: int,
                  static_dir: str | Path | None = None
                  ) -> tuple[ThreadingHTTPServer, SessionState]:
    """Bind the API server for a completed run (raises if the directory is
    incomplete or the port is taken)."""
    run = load_run(run_dir)
    state = SessionState(run=run, session_dir=session_dir_for(run_dir))
    static = Path(static_dir) if static_dir else None
    if static is not None and not static.is_dir():
        static = None
    server = ThreadingHTTPServer(("127.0.0.1", port),
                                 make_handler(state, static))
    return server, state


def serve(run_dir: str | Path, port: int,
          static_dir: str | Path | None = None):
    server, _ = create_server(run_dir, port, static_dir)
    try:
        server.serve_forever()
    finally:
        server.server_close()
