"""Wire catalog, simulated fabric, tracking table and scheduler into one run.

A run lives in a working directory::

    journal.log     tracking-table journal
    catalog.json    the catalog the run replicates (extended by ingest)
    events.jsonl    simulator event log
    actions.jsonl   scheduler action log
    state.json      destination holdings at the end of the run
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import scenarios
from .catalog import Catalog, CatalogSpec, catalog_from_paths, generate_catalog, load_path_list
from .core import NON_TERMINAL, Site, build_plan
from .errors import InvalidSpec
from .metrics import VerificationReport, build_report, emit_report, verify_replicas
from .scheduler import ActionLog, RunSummary, SchedulerPolicy, resume_point, run, summarize
from .simnet import MS, FabricConfig, SimFabric, read_event_log
from .store import TrackingTable, open_table

log = logging.getLogger(__name__)

FABRIC_PRESETS = {
    "full": lambda seed: scenarios.fabric(seed=seed),
    "campaign": lambda seed: scenarios.campaign_fabric(seed=seed),
    "table-rates": lambda seed: scenarios.table_rate_fabric(seed=seed, pause_a_until=6 * 3600),
    "small": lambda seed: scenarios.fabric(seed=seed, faults=scenarios.DEFAULT_FAULTS),
}
CATALOG_PRESETS = {
    "full": lambda seed: scenarios.catalog_spec(seed=seed),
    "small": lambda seed: scenarios.small_catalog_spec(seed=seed),
}
REPORT_SUFFIX = {"structured": ".json", "html": ".html"}

_DURATION = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*(ms|s|m|h|d)?\s*$")
_UNIT_MS = {"ms": 1, "s": MS, "m": 60 * MS, "h": 3600 * MS, "d": 86400 * MS, None: MS}


def parse_duration(text: str | float | int) -> int:
    """``"58d"``, ``"12h"``, ``"90s"``, ``"500ms"`` or a bare number of seconds, in ms."""
    if isinstance(text, (int, float)):
        return round(text * MS)
    m = _DURATION.match(str(text))
    if not m:
        raise InvalidSpec(f"bad duration {text!r}")
    return round(float(m.group(1)) * _UNIT_MS[m.group(2)])


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_mapping(path: str | os.PathLike) -> dict:
    try:
        obj = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise InvalidSpec(f"{path}: {exc}") from None
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise InvalidSpec(f"{path}: expected a mapping at top level")
    return obj


def catalog_spec_from(obj, seed: int, *, force_seed: bool = False) -> CatalogSpec:
    """A catalog spec from a preset name or mapping; ``seed`` fills in a missing seed."""
    if isinstance(obj, str):
        if obj not in CATALOG_PRESETS:
            raise InvalidSpec(f"unknown catalog preset {obj!r}")
        return CATALOG_PRESETS[obj](seed)
    if not isinstance(obj, dict):
        raise InvalidSpec("catalog must be a preset name or a mapping")
    obj = dict(obj)
    if force_seed or "seed" not in obj:
        obj["seed"] = seed
    return CatalogSpec.from_config(obj)


def fabric_from(obj, seed: int) -> FabricConfig:
    if obj is None:
        obj = "full"
    if isinstance(obj, str):
        if obj not in FABRIC_PRESETS:
            raise InvalidSpec(f"unknown fabric preset {obj!r}")
        cfg = FABRIC_PRESETS[obj](seed)
        cfg.seed = seed
        return cfg
    obj = dict(obj)
    preset = obj.pop("preset", None)
    if preset is not None:
        obj = _deep_merge(fabric_from(preset, seed).to_config(), obj)
    obj["seed"] = seed
    return FabricConfig.from_config(obj)


@dataclass
class RunConfig:
    workdir: Path
    seed: int = 0
    catalog_spec: CatalogSpec | None = None
    catalog_file: Path | None = None
    path_list: Path | None = None
    path_flavor: str = "cmip6"
    fabric: FabricConfig = field(default_factory=scenarios.fabric)
    policy: SchedulerPolicy = field(default_factory=SchedulerPolicy)
    journal: Path | None = None
    report_out: Path | None = None
    report_format: str = "structured"
    fsync: bool = True

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        if self.journal is None:
            self.journal = self.workdir / "journal.log"
        if self.report_format not in REPORT_SUFFIX:
            raise InvalidSpec(f"unknown report format {self.report_format!r}")
        if self.catalog_spec is None and self.catalog_file is None and self.path_list is None:
            self.catalog_spec = scenarios.small_catalog_spec(seed=self.seed)

    @property
    def events_path(self) -> Path:
        return self.workdir / "events.jsonl"

    @property
    def actions_path(self) -> Path:
        return self.workdir / "actions.jsonl"

    @property
    def state_path(self) -> Path:
        return self.workdir / "state.json"

    @property
    def catalog_path(self) -> Path:
        return self.workdir / "catalog.json"

    @property
    def report_path(self) -> Path:
        if self.report_out is not None:
            return self.report_out
        return self.workdir / ("report" + REPORT_SUFFIX[self.report_format])

    @classmethod
    def from_mapping(cls, obj: dict, base: str | os.PathLike = ".", *, seed: int | None = None) -> RunConfig:
        base = Path(base)
        known = {"seed", "workdir", "catalog", "catalog_file", "path_list", "path_flavor", "fabric",
                 "fabric_file", "policy", "policy_file", "journal", "report", "fsync"}
        unknown = set(obj) - known
        if unknown:
            raise InvalidSpec(f"unknown run config keys: {', '.join(sorted(unknown))}")
        forced = seed is not None
        seed = int(obj.get("seed", 0)) if seed is None else seed

        def rel(p):
            return None if p is None else base / p

        workdir = rel(obj.get("workdir", "run"))
        if "fabric_file" in obj:
            fabric = fabric_from(load_mapping(rel(obj["fabric_file"])), seed)
        else:
            fabric = fabric_from(obj.get("fabric"), seed)
        if "policy_file" in obj:
            policy = SchedulerPolicy.from_config(load_mapping(rel(obj["policy_file"])))
        else:
            policy = SchedulerPolicy.from_config(obj.get("policy"))
        report = obj.get("report") or {}
        spec = obj.get("catalog")
        try:
            return cls(
                workdir=workdir,
                seed=seed,
                catalog_spec=catalog_spec_from(spec, seed, force_seed=forced) if spec is not None else None,
                catalog_file=rel(obj.get("catalog_file")),
                path_list=rel(obj.get("path_list")),
                path_flavor=obj.get("path_flavor", "cmip6"),
                fabric=fabric,
                policy=policy,
                journal=workdir / obj["journal"] if "journal" in obj else None,
                report_out=workdir / report["out"] if "out" in report else None,
                report_format=report.get("format", "structured"),
                fsync=bool(obj.get("fsync", True)),
            )
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None

    @classmethod
    def load(cls, path: str | os.PathLike, *, seed: int | None = None) -> RunConfig:
        return cls.from_mapping(load_mapping(path), Path(path).parent, seed=seed)


@dataclass
class Outcome:
    summary: RunSummary
    table: TrackingTable
    fabric: SimFabric
    catalog: Catalog
    verification: VerificationReport | None
    report: dict
    resumed_from: int | None = None

    @property
    def exit_code(self) -> int:
        if self.summary.permanent_failed or self.summary.stalled:
            return 2
        if self.verification is not None and not self.verification.ok:
            return 2
        return 0


def build_catalog(cfg: RunConfig) -> Catalog:
    if cfg.catalog_file is not None:
        return Catalog.load(cfg.catalog_file)
    spec = cfg.catalog_spec or scenarios.small_catalog_spec(seed=cfg.seed)
    if cfg.path_list is not None:
        paths = load_path_list(cfg.path_list, cfg.path_flavor)
        spec = CatalogSpec(**{**spec.to_config(), "n_paths": len(paths)})
        return catalog_from_paths(paths, spec)
    return generate_catalog(spec)


def run_catalog(cfg: RunConfig) -> Catalog:
    """The run's own catalog copy, created on first use."""
    if cfg.catalog_path.exists():
        return Catalog.load(cfg.catalog_path)
    cat = build_catalog(cfg)
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    cat.save(cfg.catalog_path)
    return cat


def save_state(fabric: SimFabric, dest: Path) -> None:
    doc = {
        "time_ms": fabric.now,
        "holdings": {
            s.value: {k: [v[0], f"{v[1]:016x}"] for k, v in sorted(fabric.holdings(s).items())}
            for s in (Site.LCF_A, Site.LCF_B)
        },
    }
    dest.write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")


def load_state(src: Path) -> dict[Site, dict[str, tuple[int, int]]]:
    doc = json.loads(Path(src).read_text(encoding="utf-8"))
    return {
        Site(s): {k: (v[0], int(v[1], 16)) for k, v in files.items()}
        for s, files in doc["holdings"].items()
    }


def execute(cfg: RunConfig, *, until: int | None = None, check_invariants: bool = False) -> Outcome:
    """Start a run, or continue one if its journal already holds steps."""
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    catalog = run_catalog(cfg)
    table = open_table(cfg.journal, fsync=cfg.fsync)
    resumed_from = None
    if len(table) == 0 and not table.retired:
        table.insert_many(build_plan(catalog), ts=0)
    if table.last_step_ts is not None:
        resumed_from = int(table.last_step_ts)
        fabric = SimFabric.replay(cfg.fabric, catalog, table.submissions, resumed_from,
                                  check_invariants=check_invariants)
        start = resume_point(table, cfg.policy)
        log.info("resuming after step at t=%d ms with %d submissions", resumed_from, len(table.submissions))
    else:
        fabric = SimFabric(cfg.fabric, catalog, check_invariants=check_invariants)
        start = 0
    actions = ActionLog(cfg.actions_path)
    actions.truncate_after(table.last_step_ts)
    try:
        if resumed_from is not None and table.count(NON_TERMINAL) == 0:
            # the last journaled step already terminated the run
            summary = summarize(table, elapsed=resumed_from, terminated=True)
        else:
            summary = run(table, fabric, cfg.policy, catalog=catalog, start=start, until=until,
                          action_log=actions)
    finally:
        actions.close()
    fabric.export_log(cfg.events_path)
    save_state(fabric, cfg.state_path)
    verification = None
    if summary.terminated and not summary.permanent_failed:
        verification = verify_replicas(catalog, fabric.holdings(Site.LCF_A), fabric.holdings(Site.LCF_B))
    report = build_report(catalog, table, fabric.log, now=fabric.now)
    cfg.report_path.parent.mkdir(parents=True, exist_ok=True)
    cfg.report_path.write_text(emit_report(report, format=cfg.report_format), encoding="utf-8")
    return Outcome(summary, table, fabric, catalog, verification, report, resumed_from)


def report_from_files(cfg: RunConfig, fmt: str | None = None) -> str:
    catalog = Catalog.load(cfg.catalog_path)
    events = read_event_log(cfg.events_path) if cfg.events_path.exists() else []
    with open_table(cfg.journal, fsync=False) as table:
        now = events[-1].time if events else 0
        if cfg.state_path.exists():
            now = json.loads(cfg.state_path.read_text(encoding="utf-8"))["time_ms"]
        report = build_report(catalog, table, events, now=now)
    return emit_report(report, format=fmt or cfg.report_format)
