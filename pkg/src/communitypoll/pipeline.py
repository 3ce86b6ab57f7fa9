"""Stage runner: ingest, synthesize, context, poll, analyze, calibrate, report.

Every stage writes its artifacts under the output directory and records a
hash of the configuration it depends on (its own sections plus its upstream
stages' hashes) in ``manifest.json``. A stage whose hash and artifacts are
unchanged is skipped unless forced.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import filelock

from .analytics import (
    AggregateResult,
    MockTopicProvider,
    Theme,
    TopicReport,
    aggregate,
    ldta,
    net_support,
    open_texts,
    summary_lines,
)
from .calibration import calibrate_grouped, model_for, predict_interval, read_pairs_csv
from .census import AcsClient, CountyProfile, MarginalTable, fetch_county_profile, fetch_marginals, packaged_fixture_dir
from .config import RunConfig
from .errors import CommunityPollError, StageOrderError
from .impact import EconomicFigures, ProjectSpec, StateContext, build_regional_context
from .ipf import IpfConfig
from .polling import PollConfig, atomic_write_text, read_responses, run_poll
from .population import DEFAULT_MARITAL_MULTIPLIERS, format_fit_table, read_population, synthesize
from .providers import BehaviorProfile, HttpBatchProvider, MockProvider
from .survey import load_questionnaire

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class Stage:
    name: str
    sections: tuple[str, ...]
    requires: tuple[str, ...]
    missing_label: str


STAGES = {
    "ingest": Stage("ingest", ("region",), (), "census"),
    "synthesize": Stage("synthesize", ("population",), ("ingest",), "population"),
    "context": Stage("context", ("region", "state_context", "project"), ("ingest",), "context"),
    "poll": Stage("poll", ("poll", "questionnaire"), ("synthesize", "context"), "poll"),
    "analyze": Stage("analyze", ("topics",), ("poll",), "analysis"),
    "calibrate": Stage("calibrate", ("calibration",), ("analyze",), "calibration"),
    "report": Stage("report", ("calibration",), ("analyze",), "report"),
}
ORDER = tuple(STAGES)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


class Pipeline:
    def __init__(self, config: RunConfig, *, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.out = config.out_dir
        self.sleep = sleep

    # manifest ---------------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.out / MANIFEST

    def manifest(self) -> dict:
        if self.manifest_path.is_file():
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return {"stages": {}}

    def stage_hash(self, name: str) -> str:
        stage = STAGES[name]
        parts = [self.config.canonical(list(stage.sections))] + [self.stage_hash(r) for r in stage.requires]
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()

    def is_current(self, name: str, manifest: dict | None = None) -> bool:
        entry = (manifest or self.manifest())["stages"].get(name)
        if not entry or entry.get("hash") != self.stage_hash(name):
            return False
        return all((self.out / p).exists() for p in entry.get("artifacts", []))

    def _require(self, name: str, manifest: dict) -> None:
        for req in STAGES[name].requires:
            entry = manifest["stages"].get(req)
            label = STAGES[req].missing_label
            if not entry or not all((self.out / p).exists() for p in entry.get("artifacts", [])):
                raise StageOrderError(f"{label} artifact missing; run '{req}' first")
            if entry.get("hash") != self.stage_hash(req):
                raise StageOrderError(f"{label} artifact is stale; rerun '{req}'")

    def run(self, name: str, force: bool = False) -> str:
        """Run one stage. Returns ``"ran"`` or ``"skipped"``."""
        if name not in STAGES:
            raise CommunityPollError(f"unknown stage {name!r}")
        self.out.mkdir(parents=True, exist_ok=True)
        lock = filelock.FileLock(str(self.out / ".lock"), timeout=0)
        try:
            with lock:
                return self._run_locked(name, force)
        except filelock.Timeout:
            raise CommunityPollError(f"{self.out} is in use by another command") from None

    def _run_locked(self, name: str, force: bool) -> str:
        manifest = self.manifest()
        self._require(name, manifest)
        if not force and self.is_current(name, manifest):
            log.info("%s is up to date", name)
            return "skipped"
        started = time.time()
        artifacts, extra = getattr(self, f"_stage_{name}")()
        manifest = self.manifest()
        manifest["config_hash"] = self.config.hash()
        manifest["stages"][name] = {
            "hash": self.stage_hash(name),
            "artifacts": sorted(artifacts),
            "completed_at": time.time(),
            "seconds": round(time.time() - started, 3),
            **extra,
        }
        atomic_write_text(self.manifest_path, _dump(manifest))
        return "ran"

    def run_all(self, force: bool = False, stages=ORDER) -> dict[str, str]:
        return {name: self.run(name, force) for name in stages}

    # helpers ----------------------------------------------------------------

    def _write(self, rel: str, text: str) -> str:
        atomic_write_text(self.out / rel, text)
        return rel

    def _read_json(self, rel: str):
        return json.loads((self.out / rel).read_text(encoding="utf-8"))

    def questionnaire(self):
        return load_questionnaire(self.config.resolve(self.config["questionnaire"]["path"]))

    # stages -----------------------------------------------------------------

    def _stage_ingest(self):
        region, paths = self.config["region"], self.config["paths"]
        client = AcsClient(self.config.cache_dir, year=region["year"], offline=paths["offline"],
                           fixture_dirs=[packaged_fixture_dir()])
        tables = fetch_marginals(region["state_fips"], region["county_fips"], client=client)
        profile = fetch_county_profile(region["state_fips"], region["county_fips"], client=client)
        return [
            self._write("ingest/marginals.json", _dump([t.to_dict() for t in tables])),
            self._write("ingest/profile.json", _dump(profile.to_dict())),
        ], {}

    def _stage_synthesize(self):
        pop = self.config["population"]
        tables = [MarginalTable.from_dict(d) for d in self._read_json("ingest/marginals.json")]
        ipf = IpfConfig(pop["max_iterations"], pop["epsilon"], pop["seed"])
        multipliers = pop["marital_multipliers"]
        if multipliers is None:
            multipliers = DEFAULT_MARITAL_MULTIPLIERS
        result = synthesize(tables, ipf, pop["agent_count"], max_retries=pop["max_retries"], alpha=pop["alpha"],
                            multipliers=multipliers, path=self.out / "population" / "population.jsonl")
        title = f"Chi-square goodness-of-fit, {self.config['region']['county_name']} County"
        reports = {"seed": result.seed, "attempts": result.attempts,
                   "reports": [r.to_dict() for r in result.reports]}
        return [
            "population/population.jsonl",
            self._write("population/fit_report.txt", format_fit_table(result.reports, title) + "\n"),
            self._write("population/fit_report.json", _dump(reports)),
        ], {"seed": result.seed, "attempts": result.attempts}

    def _stage_context(self):
        region, state, project = self.config["region"], self.config["state_context"], self.config["project"]
        spec = ProjectSpec(
            rated_capacity_mw=project["rated_capacity_mw"],
            capacity_factor=project["capacity_factor"],
            pue=project["pue"],
            wue_l_per_kwh=project["wue_l_per_kwh"],
            ewif_l_per_kwh=project["ewif_l_per_kwh"],
            state_emission_factor=project["state_emission_factor"],
            pollutant_intensities=dict(project["pollutant_intensities"]),
            economics=EconomicFigures(**project["economics"]),
        )
        profile = CountyProfile.from_dict(self._read_json("ingest/profile.json"))
        ctx = build_regional_context(spec, profile, StateContext(region["state_name"], state["year"],
                                                                 state["dc_energy_mwh"]), region["county_name"])
        return [
            self._write("context/system_prompt.txt", ctx.rendered_text),
            self._write("context/impact.json", _dump(ctx.impact.to_dict())),
        ], {}

    def _provider(self, kind: str, questionnaire):
        poll = self.config["poll"]
        if kind == "mock":
            return MockProvider(questionnaire, poll["seed"], BehaviorProfile.from_dict(poll["mock"]))
        return HttpBatchProvider(poll["base_url"])

    def _stage_poll(self):
        poll = self.config["poll"]
        q = self.questionnaire()
        _, agents = read_population(self.out / "population" / "population.jsonl")
        system_text = (self.out / "context" / "system_prompt.txt").read_text(encoding="utf-8")
        cfg = PollConfig(model_name=poll["model_name"], temperature=poll["temperature"],
                         max_output_tokens=poll["max_output_tokens"], max_retries=poll["max_retries"],
                         batch_size=poll["batch_size"], concurrency=poll["concurrency"],
                         poll_interval=poll["poll_interval"], max_wait=poll["max_wait"],
                         submit_attempts=poll["submit_attempts"], backoff_base=poll["backoff_base"],
                         seed=poll["seed"])
        result = run_poll(agents, system_text, q, self._provider(poll["provider"], q), cfg,
                          run_dir=self.out / "poll", sleep=self.sleep,
                          manifest_extra={"config_hash": self.stage_hash("poll")})
        files = ["poll/requests.jsonl", "poll/raw_results.jsonl", "poll/responses.jsonl", "poll/manifest.json"]
        return files, {"n_ok": result.n_ok, "n_failed": result.n_failed, "tokens": result.tokens,
                       "cost": result.cost}

    def _stage_analyze(self):
        topics_cfg = self.config["topics"]
        q = self.questionnaire()
        responses = read_responses(self.out / "poll" / "responses.jsonl")
        results = aggregate(responses, q)
        if topics_cfg["enabled"]:
            provider = (MockTopicProvider() if topics_cfg["provider"] == "mock"
                        else HttpBatchProvider(self.config["poll"]["base_url"]))
            topics = ldta(open_texts(responses), provider, model_name=topics_cfg["model_name"],
                          max_themes=topics_cfg["max_themes"], sleep=self.sleep)
        else:
            topics = TopicReport((), (), 0)
        return [
            self._write("analysis/aggregates.json", _dump([r.to_dict() for r in results])),
            self._write("analysis/topics.json", _dump({"enabled": topics_cfg["enabled"], **topics.to_dict()})),
        ], {}

    def _stage_calibrate(self):
        cal = self.config["calibration"]
        if cal["pairs_csv"] is None:
            body = {"status": "not configured"}
        else:
            pairs = read_pairs_csv(self.config.resolve(cal["pairs_csv"]))
            models = calibrate_grouped(pairs, cal["alpha"], cal["grouping"])
            intervals = []
            for agg in self._read_json("analysis/aggregates.json"):
                model = model_for(models, agg["question_id"])
                if model is None:
                    continue
                for opt in agg["options"]:
                    y_hat = opt["count"] / agg["n_ok"]
                    lo, hi = predict_interval(model, y_hat)
                    intervals.append({"question_id": agg["question_id"], "option": opt["option"],
                                      "y_hat": y_hat, "lo": lo, "hi": hi})
            body = {"status": "calibrated", "alpha": cal["alpha"], "grouping": cal["grouping"],
                    "models": {k: m.to_dict() for k, m in models.items()}, "intervals": intervals}
        return [self._write("calibration/intervals.json", _dump(body))], {}

    def _stage_report(self):
        q = self.questionnaire()
        aggs = self._read_json("analysis/aggregates.json")
        topics = self._read_json("analysis/topics.json")
        written = []

        rows = [(a["question_id"], a["kind"], o["option"], o["count"], f"{o['percent']:.1f}", a["n_ok"])
                for a in aggs for o in a["options"]]
        written.append(self._write("report/aggregates.csv",
                                   _csv_text(["question_id", "kind", "option", "count", "percent", "n_ok"], rows)))
        written.append(self._write("report/aggregates.json", _dump(aggs)))
        written.append(self._write("report/topics.json", _dump(topics)))
        for a in aggs:
            chart = [(o["option"], o["count"], f"{o['percent']:.1f}") for o in a["options"]]
            written.append(self._write(f"report/charts/{a['question_id']}.csv",
                                       _csv_text(["option", "count", "percent"], chart)))
        if topics["themes"]:
            chart = [(t["label"], t["count"], f"{t['percent']:.1f}") for t in topics["themes"]]
            written.append(self._write("report/charts/themes.csv", _csv_text(["theme", "count", "percent"], chart)))

        results = [AggregateResult(a["question_id"], a["kind"], tuple(o["option"] for o in a["options"]),
                                   tuple(o["count"] for o in a["options"]), a["n_ok"], a["n_failed"],
                                   tuple(a["other_texts"])) for a in aggs]
        topic_report = None
        if topics.get("enabled") and topics["n_responses"]:
            topic_report = TopicReport(tuple(Theme(t["label"], t["count"], t["percent"]) for t in topics["themes"]),
                                       (), topics["n_responses"], topics["n_extraction_failures"],
                                       topics["theme_stage_failed"])
        lines = summary_lines(results, q, topic_report)
        cal_path = self.out / "calibration" / "intervals.json"
        calibration = json.loads(cal_path.read_text()) if cal_path.is_file() else None
        if calibration and calibration.get("status") == "calibrated":
            rows = [(i["question_id"], i["option"], f"{i['y_hat']:.4f}", f"{i['lo']:.4f}", f"{i['hi']:.4f}")
                    for i in calibration["intervals"]]
            written.append(self._write("report/intervals.csv",
                                       _csv_text(["question_id", "option", "y_hat", "lo", "hi"], rows)))
            lines += ["", f"Conformal intervals: alpha {calibration['alpha']}, {len(rows)} options"]
        else:
            lines += ["", "Conformal intervals: not configured"]
        net = net_support(next(r for r in results if r.question_id == "q12"))
        chart = [("net_support", f"{net:.1f}")]
        written.append(self._write("report/charts/net_support.csv", _csv_text(["measure", "percent"], chart)))
        written.append(self._write("report/summary.txt", "\n".join(lines) + "\n"))
        return written, {}
