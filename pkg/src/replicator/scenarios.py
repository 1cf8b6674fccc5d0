"""Ready-made configurations shaped like the CMIP replication campaign."""

from __future__ import annotations

from .catalog import CatalogSpec, Dist
from .core import Route, Site
from .simnet import GiB, MS, FabricConfig, FaultModel, RouteCap, SiteSpec

TOTAL_BYTES = 8_182_644_448_359_330
N_PATHS = 2291
HUB_EGRESS = 1.5 * GiB
LCF_CAP = 7.5 * GiB
DAY = 86_400
WEEK = 7 * DAY

HUB_A = Route(Site.SOURCE_HUB, Site.LCF_A)
HUB_B = Route(Site.SOURCE_HUB, Site.LCF_B)
A_B = Route(Site.LCF_A, Site.LCF_B)
B_A = Route(Site.LCF_B, Site.LCF_A)
ROUTES = (HUB_A, HUB_B, A_B, B_A)

# Mean per-transfer rates in 2**30 B/s, CMIP6 rows of the campaign's rate table.
TABLE_RATES = {HUB_A: 0.648, HUB_B: 0.662, A_B: 1.706, B_A: 2.352}

DEFAULT_FAULTS = FaultModel(
    transient_rate=1.05,
    transient_dispersion=0.15,
    transient_delay=1200.0,
    file_corruption_prob=0.01,
    persistent_fail_prob=0.0,
    persistent_autofix_after=DAY,
)


def lower_bound_seconds(total_bytes: int = TOTAL_BYTES, egress: float = HUB_EGRESS) -> float:
    """Time to push every byte once through the hub's egress."""
    return total_bytes / egress


def weekly_windows(count: int, *, first: float = 3 * DAY, every: float = WEEK,
                   duration: float = 2 * DAY) -> list[tuple[int, int]]:
    """``count`` recurring maintenance windows, in ms."""
    return [
        (round((first + i * every) * MS), round((first + i * every + duration) * MS))
        for i in range(count)
    ]


def catalog_spec(n_paths: int = N_PATHS, *, seed: int = 0, total_bytes: int | None = TOTAL_BYTES,
                 **kw) -> CatalogSpec:
    return CatalogSpec(n_paths=n_paths, seed=seed, total_bytes=total_bytes, **kw)


def small_catalog_spec(n_paths: int = 40, *, seed: int = 0, **kw) -> CatalogSpec:
    """A desk-sized catalog of a few GiB per path, for quick runs."""
    kw.setdefault("file_size", Dist("lognormal", median=256 * 2**20, sigma=1.0))
    return CatalogSpec(n_paths=n_paths, seed=seed, **kw)


def fabric(*, seed: int = 0, faults: FaultModel | None = None,
           maintenance_a: list[tuple[int, int]] | None = None,
           maintenance_b: list[tuple[int, int]] | None = None,
           hub_scan_cost: float = 30.0, lcf_scan_cost: float = 5.0,
           scan_entry_cap: int | None = None) -> FabricConfig:
    """The default three-site fabric.

    The hub file system caps egress at 1.5 GiB/s; either hub route can carry
    all of it, so two concurrent transfers get about 0.75 GiB/s each.  The
    inter-LCF routes are set to twice the observed per-transfer rate, so a
    pair of concurrent transfers reproduces those rates, and each facility
    moves at most 7.5 GiB/s in either direction.
    """
    sites = {
        Site.SOURCE_HUB: SiteSpec(Site.SOURCE_HUB, HUB_EGRESS, HUB_EGRESS, hub_scan_cost, scan_entry_cap),
        Site.LCF_A: SiteSpec(Site.LCF_A, LCF_CAP, LCF_CAP, lcf_scan_cost, None, maintenance_a or []),
        Site.LCF_B: SiteSpec(Site.LCF_B, LCF_CAP, LCF_CAP, lcf_scan_cost, None, maintenance_b or []),
    }
    routes = {
        HUB_A: RouteCap(HUB_A, HUB_EGRESS),
        HUB_B: RouteCap(HUB_B, HUB_EGRESS),
        A_B: RouteCap(A_B, 2 * TABLE_RATES[A_B] * GiB),
        B_A: RouteCap(B_A, 2 * TABLE_RATES[B_A] * GiB),
    }
    return FabricConfig(sites=sites, routes=routes, faults=faults or FaultModel(), seed=seed)


def campaign_fabric(*, seed: int = 0, weeks: int = 12) -> FabricConfig:
    """Default faults plus weekly two-day LCF_A outages and a few LCF_B ones."""
    return fabric(
        seed=seed,
        faults=DEFAULT_FAULTS,
        maintenance_a=weekly_windows(weeks),
        maintenance_b=weekly_windows(max(1, weeks // 4), first=10 * DAY, every=4 * WEEK, duration=DAY),
    )


def table_rate_fabric(*, seed: int = 0, pause_a_until: float = 0.0) -> FabricConfig:
    """Per-transfer ceilings equal to the observed route rates.

    The hub egress is lifted so both hub routes can run at their own rate, and
    an optional LCF_A outage at the start forces hub traffic onto LCF_B and
    the LCF_B to LCF_A cascade, so every route carries traffic.
    """
    cfg = fabric(seed=seed, maintenance_a=[(0, round(pause_a_until * MS))] if pause_a_until else None)
    cfg.sites[Site.SOURCE_HUB] = SiteSpec(Site.SOURCE_HUB, 4 * GiB, 4 * GiB, 30.0)
    cfg.routes = {
        r: RouteCap(r, 2 * rate * GiB, rate * GiB) for r, rate in TABLE_RATES.items()
    }
    return cfg
