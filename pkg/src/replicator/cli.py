"""Command-line entry point: ``replicator <command> ...``.

Exit status: 0 on success, 1 for configuration or input errors, 2 when a run
ends with permanently failed rows (or verification finds a mismatch).
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import yaml

from .catalog import Catalog, CatalogSpec, catalog_from_paths, generate_catalog, load_path_list
from .errors import CorruptJournal, InvalidSpec, MalformedPath, ReplicationError
from .metrics import verify_replicas
from .runner import (
    RunConfig,
    catalog_spec_from,
    execute,
    load_mapping,
    load_state,
    parse_duration,
    report_from_files,
    run_catalog,
)
from .scheduler import ingest_new_paths
from .core import Site
from .store import open_table

log = logging.getLogger("replicator")


def _config(args) -> RunConfig:
    if args.config is None and getattr(args, "journal", None) is None:
        raise InvalidSpec("either --config or --journal is required")
    if args.config is not None:
        cfg = RunConfig.load(args.config, seed=args.seed)
    else:
        workdir = Path(args.journal).parent
        cfg = RunConfig(workdir=workdir, seed=args.seed or 0, catalog_file=workdir / "catalog.json")
    if getattr(args, "journal", None):
        # the journal's directory holds every other run artifact
        cfg.journal = Path(args.journal)
        cfg.workdir = cfg.journal.parent
    if getattr(args, "report_out", None):
        cfg.report_out = Path(args.report_out)
    if getattr(args, "format", None):
        cfg.report_format = args.format
    return cfg


def cmd_gen_catalog(args) -> int:
    top = load_mapping(args.config)
    obj = top.get("catalog", top)
    if args.seed is not None:
        spec = catalog_spec_from(obj, args.seed, force_seed=True)
    else:
        spec = catalog_spec_from(obj, int(top.get("seed", 0)))
    if args.path_list:
        paths = load_path_list(Path(args.path_list), args.flavor)
        cat = catalog_from_paths(paths, CatalogSpec(**{**spec.to_config(), "n_paths": len(paths)}))
    else:
        cat = generate_catalog(spec)
    t = cat.totals
    if args.out:
        cat.save(args.out)
        digest = hashlib.sha256(Path(args.out).read_bytes()).hexdigest()[:16]
        print(f"wrote {args.out} sha256={digest}")
    print(f"paths={len(cat.paths)} directories={t.directories} files={t.files} bytes={t.bytes}")
    return 0


def _print_outcome(out, cfg: RunConfig) -> None:
    s = out.summary
    print(f"time={s.elapsed} ms ({s.elapsed / 86_400_000:.2f} days) terminated={s.terminated} "
          f"ticks={s.ticks}")
    if s.last_completion is not None:
        print(f"last_completion={s.last_completion} ms ({s.last_completion / 86_400_000:.2f} days)")
    print("rows " + " ".join(f"{k}={v}" for k, v in sorted(s.statuses.items())))
    for route, r in sorted(s.routes.items()):
        print(f"route {route} transfers={r['transfers']} succeeded={r['succeeded']} bytes={r['bytes']}")
    f = s.faults
    print(f"faults total={f['total']} mean={f['mean']:.3f} max={f['max']} with_faults={f['with_faults']}")
    if out.verification is not None:
        print(f"verify paths={out.verification.paths_checked} mismatches={len(out.verification.mismatches)}")
    if s.permanent_failed:
        print(f"permanent failures: {s.permanent_failed} (see {cfg.actions_path})")
    print(f"report: {cfg.report_path}")


def cmd_run(args) -> int:
    cfg = _config(args)
    until = parse_duration(args.until) if args.until is not None else None
    if args.command == "run" and cfg.journal.exists() and cfg.journal.stat().st_size and not args.force:
        raise InvalidSpec(f"{cfg.journal} already exists; use 'resume' to continue it or --force")
    if args.command == "run" and args.force:
        for p in (cfg.journal, cfg.catalog_path, cfg.actions_path, cfg.events_path, cfg.state_path):
            p.unlink(missing_ok=True)
    out = execute(cfg, until=until)
    try:
        _print_outcome(out, cfg)
    finally:
        out.table.close()
    return out.exit_code


def cmd_report(args) -> int:
    cfg = _config(args)
    text = report_from_files(cfg, args.format)
    if args.report_out:
        Path(args.report_out).write_text(text, encoding="utf-8")
        print(f"report: {args.report_out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_verify(args) -> int:
    cfg = _config(args)
    catalog = Catalog.load(cfg.catalog_path)
    state = load_state(Path(args.state) if args.state else cfg.state_path)
    rep = verify_replicas(catalog, state.get(Site.LCF_A, {}), state.get(Site.LCF_B, {}))
    for m in rep.mismatches[:20]:
        print(f"MISMATCH {m.path} entry={m.entry} source={m.source} LCF_A={m.lcf_a} LCF_B={m.lcf_b}")
    print(f"paths={rep.paths_checked} mismatches={len(rep.mismatches)}")
    return 0 if rep.ok else 2


def cmd_ingest(args) -> int:
    cfg = _config(args)
    catalog = run_catalog(cfg)
    paths = load_path_list(Path(args.paths), args.flavor)
    with open_table(cfg.journal, fsync=cfg.fsync) as table:
        ts = table.last_step_ts if table.last_step_ts is not None else 0
        added = ingest_new_paths(table, paths, catalog=catalog, ts=ts)
    catalog.save(cfg.catalog_path)
    print(f"added={added}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replicator", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, journal=True):
        p.add_argument("--config", help="run configuration file (YAML or JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        if journal:
            p.add_argument("--journal", help="journal file (default: <workdir>/journal.log)")

    p = sub.add_parser("gen-catalog", help="generate a synthetic catalog and print its totals")
    p.add_argument("--config", required=True, help="catalog spec, or a run config with a 'catalog' key")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="write the catalog here (JSON)")
    p.add_argument("--path-list", help="use these paths instead of generating them")
    p.add_argument("--flavor", default="cmip6", choices=["cmip5", "cmip6", "generic"])
    p.set_defaults(func=cmd_gen_catalog)

    for name, help_text in (("run", "start a simulated replication run"),
                            ("resume", "continue an interrupted run from its journal")):
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.add_argument("--report-out", help="report file (default: <workdir>/report.json|html)")
        p.add_argument("--format", choices=["structured", "html"], default=None)
        p.add_argument("--until", help="stop at this sim-time, e.g. 20d, 36h, 5000s (default: completion)")
        if name == "run":
            p.add_argument("--force", action="store_true", help="discard an existing journal first")
        p.set_defaults(func=cmd_run, force=False)

    p = sub.add_parser("report", help="render the dashboard report from a run's files")
    common(p)
    p.add_argument("--report-out", help="write here instead of stdout")
    p.add_argument("--format", choices=["structured", "html"], default="structured")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="compare both destinations against the source manifests")
    common(p)
    p.add_argument("--state", help="fabric state file (default: <workdir>/state.json)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ingest", help="add newly published dataset paths to the table")
    common(p)
    p.add_argument("--paths", required=True, help="file with one dataset path per line")
    p.add_argument("--flavor", default="cmip6", choices=["cmip5", "cmip6", "generic"])
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidSpec, MalformedPath, CorruptJournal, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ReplicationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
