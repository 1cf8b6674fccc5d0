"""DRS-structured dataset paths and the synthetic catalogs that feed a replication run.

A :class:`DatasetPath` is one directory subtree named by an ordered list of
facets (``mip_era/activity_drs/.../version`` for CMIP6).  A :class:`Catalog`
maps each dataset path to the files below it; files carry only a size and a
64-bit checksum, which is all the transfer fabric needs to move and verify them.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import re
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import InvalidSpec, MalformedPath, UnknownPath

CMIP6_FACETS = (
    "mip_era",
    "activity_drs",
    "institution_id",
    "source_id",
    "experiment_id",
    "member_id",
    "table_id",
    "variable_id",
    "grid_label",
    "version",
)
# CMIP5 trees are eleven levels deep; the list can be replaced from config.
CMIP5_FACETS = (
    "activity",
    "product",
    "institute",
    "model",
    "experiment",
    "time_frequency",
    "realm",
    "cmor_table",
    "ensemble",
    "version",
    "variable",
)
MAX_DEPTH = 11
GENERIC_FACETS = tuple(f"level{i}" for i in range(1, MAX_DEPTH + 1))
FLAVORS = ("cmip5", "cmip6", "generic")

_SEGMENT = re.compile(r"[A-Za-z0-9][A-Za-z0-9._+-]*")


def _check_segment(value: str, what: str) -> None:
    if not value:
        raise MalformedPath(f"empty {what}")
    if not _SEGMENT.fullmatch(value):
        raise MalformedPath(f"illegal characters in {what} {value!r}")


@dataclass(frozen=True)
class DatasetPath:
    """A DRS directory path: storage prefix plus ordered ``(facet, value)`` pairs."""

    prefix: str
    components: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(tuple(c) for c in self.components))
        if not 1 <= len(self.components) <= MAX_DEPTH:
            raise MalformedPath(f"depth {len(self.components)} outside 1..{MAX_DEPTH}")
        if self.prefix:
            for seg in self.prefix.split("/"):
                _check_segment(seg, "prefix segment")
        for name, value in self.components:
            if not name:
                raise MalformedPath("empty facet name")
            _check_segment(value, f"value for facet {name}")

    @property
    def depth(self) -> int:
        return len(self.components)

    @property
    def values(self) -> tuple[str, ...]:
        return tuple(v for _, v in self.components)

    @property
    def facets(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.components)

    def facet(self, name: str) -> str:
        for n, v in self.components:
            if n == name:
                return v
        raise KeyError(name)

    def as_dict(self) -> dict[str, str]:
        return dict(self.components)

    @cached_property
    def text(self) -> str:
        return format_drs_path(self)

    def __str__(self) -> str:
        return self.text

    def sort_key(self) -> tuple:
        return (self.prefix, self.values)

    def child(self, value: str, facet: str | None = None) -> DatasetPath:
        if self.depth >= MAX_DEPTH:
            raise MalformedPath(f"{self} is already {MAX_DEPTH} levels deep")
        return DatasetPath(self.prefix, self.components + ((facet or GENERIC_FACETS[self.depth], value),))

    def is_ancestor_of(self, other: DatasetPath) -> bool:
        return (
            self.prefix == other.prefix
            and other.depth > self.depth
            and other.values[: self.depth] == self.values
        )

    def relative_to(self, ancestor: DatasetPath) -> str:
        if not ancestor.is_ancestor_of(self):
            raise ValueError(f"{ancestor} is not an ancestor of {self}")
        return "/".join(self.values[ancestor.depth :])


def _facet_names(flavor: str, facets: Iterable[str] | None) -> tuple[str, ...]:
    if facets is not None:
        return tuple(facets)
    return {"cmip6": CMIP6_FACETS, "cmip5": CMIP5_FACETS, "generic": GENERIC_FACETS}[flavor]


def parse_drs_path(
    raw: str,
    flavor: str = "cmip6",
    *,
    prefix: str | None = None,
    facets: Iterable[str] | None = None,
) -> DatasetPath:
    """Parse a slash-separated directory path into a :class:`DatasetPath`.

    For ``cmip6`` exactly ten facet segments must follow the prefix; when no
    prefix is given, any leading segments beyond those ten become the prefix.
    ``cmip5`` and ``generic`` accept 1 to 11 segments and take facet names
    from ``facets`` (defaults: the CMIP5 DRS list and ``level1..level11``).
    A trailing slash is ignored.
    """
    if flavor not in FLAVORS:
        raise ValueError(f"unknown flavor {flavor!r}")
    if not raw or not raw.strip("/"):
        raise MalformedPath("empty path")
    segments = raw.strip("/").split("/")
    for seg in segments:
        _check_segment(seg, "path segment")

    names = _facet_names(flavor, facets)
    if prefix is not None:
        pre = prefix.strip("/").split("/") if prefix.strip("/") else []
        if segments[: len(pre)] != pre:
            raise MalformedPath(f"{raw!r} does not start with prefix /{prefix.strip('/')}")
        rest = segments[len(pre) :]
    elif flavor == "cmip6":
        if len(segments) < len(names):
            raise MalformedPath(f"cmip6 path needs {len(names)} facet segments, got {len(segments)}")
        pre, rest = segments[: -len(names)], segments[-len(names) :]
    else:
        pre, rest = [], segments

    if flavor == "cmip6" and len(rest) != len(names):
        raise MalformedPath(f"cmip6 path needs {len(names)} facet segments, got {len(rest)}")
    if not 1 <= len(rest) <= min(MAX_DEPTH, len(names)):
        raise MalformedPath(f"{len(rest)} facet segments; expected 1..{min(MAX_DEPTH, len(names))}")
    return DatasetPath("/".join(pre), tuple(zip(names, rest)))


def format_drs_path(p: DatasetPath) -> str:
    segments = ([p.prefix] if p.prefix else []) + list(p.values)
    return "/" + "/".join(segments)


def load_path_list(
    source: str | os.PathLike | io.TextIOBase,
    flavor: str = "cmip6",
    *,
    prefix: str | None = None,
    facets: Iterable[str] | None = None,
) -> list[DatasetPath]:
    """Read one path per line, skipping blanks and ``#`` comments; first occurrence wins."""
    if isinstance(source, os.PathLike):
        text = Path(source).read_text(encoding="utf-8")
    elif isinstance(source, io.TextIOBase):
        text = source.read()
    else:
        text = source
    seen: set[DatasetPath] = set()
    out: list[DatasetPath] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            p = parse_drs_path(line, flavor, prefix=prefix, facets=facets)
        except MalformedPath as exc:
            raise MalformedPath(str(exc), line=lineno) from None
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def save_path_list(paths: Iterable[DatasetPath], dest: str | os.PathLike) -> None:
    body = "".join(f"{p}\n" for p in paths)
    Path(dest).write_text(body, encoding="utf-8")


# -- checksums -------------------------------------------------------------

def _blake2b64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "big")


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


CHECKSUMS = {"blake2b64": _blake2b64, "fnv1a64": _fnv1a64}


def file_checksum(seed: int, path: DatasetPath | str, name: str, algorithm: str = "blake2b64") -> int:
    """Deterministic 64-bit checksum standing in for a file's content digest."""
    return CHECKSUMS[algorithm](f"{seed}\x00{path}\x00{name}".encode())


# -- catalog ---------------------------------------------------------------

class FileEntry(NamedTuple):
    name: str  # relative to the dataset path; may contain subdirectories
    size: int
    checksum: int


class Totals(NamedTuple):
    directories: int
    files: int
    bytes: int


@dataclass(frozen=True)
class Manifest:
    path: DatasetPath
    entries: tuple[FileEntry, ...]
    directories: int
    files: int
    bytes: int

    @classmethod
    def from_entries(cls, path: DatasetPath, entries: Iterable[FileEntry]) -> Manifest:
        entries = tuple(sorted(entries))
        return cls(path, entries, count_directories(e.name for e in entries), len(entries),
                   sum(e.size for e in entries))

    @property
    def entries_count(self) -> int:
        """Files plus directories: what a recursive scan has to enumerate."""
        return self.files + self.directories


def count_directories(names: Iterable[str]) -> int:
    dirs = {""}
    for name in names:
        parts = name.split("/")[:-1]
        for i in range(1, len(parts) + 1):
            dirs.add("/".join(parts[:i]))
    return len(dirs)


@dataclass(frozen=True)
class Dist:
    """Small declarative distribution over positive integers."""

    kind: str = "fixed"
    value: float = 1
    low: int = 1
    high: int = 1
    median: float = 1.0
    sigma: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "lognormal", "poisson"):
            raise InvalidSpec(f"unknown distribution kind {self.kind!r}")
        bad = (
            (self.kind == "fixed" and self.value < 1)
            or (self.kind == "uniform" and not 1 <= self.low <= self.high)
            or (self.kind == "lognormal" and (self.median <= 0 or self.sigma < 0))
            or (self.kind == "poisson" and self.lam < 0)
        )
        if bad:
            raise InvalidSpec(f"distribution {self} has no positive support")

    def sample(self, rng: np.random.Generator, n: int | None = None):
        size = 1 if n is None else n
        if self.kind == "fixed":
            out = np.full(size, int(self.value), dtype=np.int64)
        elif self.kind == "uniform":
            out = rng.integers(self.low, self.high + 1, size=size)
        elif self.kind == "lognormal":
            out = np.ceil(rng.lognormal(np.log(self.median), self.sigma, size=size)).astype(np.int64)
        else:
            out = 1 + rng.poisson(self.lam, size=size)
        out = np.maximum(out, 1)
        return int(out[0]) if n is None else out

    @classmethod
    def from_config(cls, obj) -> Dist:
        if isinstance(obj, Dist):
            return obj
        if isinstance(obj, (int, float)):
            return cls("fixed", value=obj)
        if isinstance(obj, dict):
            try:
                return cls(**obj)
            except TypeError as exc:
                raise InvalidSpec(f"bad distribution {obj!r}: {exc}") from None
        raise InvalidSpec(f"bad distribution {obj!r}")

    def to_config(self) -> dict:
        keep = {"fixed": ("value",), "uniform": ("low", "high"),
                "lognormal": ("median", "sigma"), "poisson": ("lam",)}[self.kind]
        return {"kind": self.kind, **{k: getattr(self, k) for k in keep}}


GiB = 2**30
MiB = 2**20


@dataclass(frozen=True)
class CatalogSpec:
    """Recipe for a synthetic catalog.

    Dataset paths are CMIP6 DRS prefixes ``depth`` facets long (the default of
    five matches directories such as ``CMIP6/CMIP/MPI-M/MPI-ESM1-2-LR/historical``);
    the remaining facets become subdirectories holding the files.  When
    ``total_bytes`` is set, file sizes are rescaled so the catalog sums to it
    exactly.
    """

    n_paths: int
    seed: int = 0
    files_per_path: Dist = Dist("uniform", low=4, high=12)
    file_size: Dist = Dist("lognormal", median=512 * MiB, sigma=1.5)
    leaves_per_path: Dist = Dist("uniform", low=1, high=3)
    depth: int = 5
    prefix: str = "css03_data"
    total_bytes: int | None = None
    checksum: str = "blake2b64"

    def __post_init__(self):
        for name in ("files_per_path", "file_size", "leaves_per_path"):
            object.__setattr__(self, name, Dist.from_config(getattr(self, name)))
        if self.n_paths < 1:
            raise InvalidSpec("n_paths must be >= 1")
        if not 1 <= self.depth <= len(CMIP6_FACETS):
            raise InvalidSpec(f"depth must be within 1..{len(CMIP6_FACETS)}")
        if self.total_bytes is not None and self.total_bytes < 1:
            raise InvalidSpec("total_bytes must be positive")
        if self.checksum not in CHECKSUMS:
            raise InvalidSpec(f"unknown checksum {self.checksum!r}")

    @classmethod
    def from_config(cls, obj: dict) -> CatalogSpec:
        try:
            return cls(**obj)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None

    def to_config(self) -> dict:
        out = asdict(self)
        for name in ("files_per_path", "file_size", "leaves_per_path"):
            out[name] = getattr(self, name).to_config()
        return out


_POOLS = {
    "mip_era": ["CMIP6"],
    "activity_drs": ["CMIP", "ScenarioMIP", "HighResMIP", "DAMIP", "PMIP", "CFMIP",
                     "AerChemMIP", "LUMIP", "OMIP", "C4MIP", "GeoMIP", "RFMIP"],
    "institution_id": ["MPI-M", "NCAR", "NOAA-GFDL", "IPSL", "CNRM-CERFACS", "MOHC",
                       "E3SM-Project", "CCCma", "MIROC", "MRI", "NCC", "EC-Earth-Consortium",
                       "BCC", "CAS", "AWI", "NASA-GISS", "CSIRO", "NUIST", "THU", "FIO-QLNM"],
    "experiment_id": ["historical", "piControl", "ssp126", "ssp245", "ssp370", "ssp585",
                      "amip", "abrupt-4xCO2", "1pctCO2", "hist-aer", "hist-GHG", "ssp119",
                      "ssp434", "ssp460", "esm-hist"],
    "table_id": ["Amon", "day", "Omon", "EdayZ", "3hr", "6hrLev", "SImon", "Lmon",
                 "fx", "Oday", "AERmon", "CFday"],
    "variable_id": ["tas", "pr", "hus", "ua", "va", "ta", "zg", "tos", "so", "thetao",
                    "psl", "huss", "rlut", "clt", "siconc"],
    "grid_label": ["gn", "gr", "gr1", "gm"],
}
_MODEL_STEMS = ["ESM1-2-LR", "ESM1-2-HR", "CM6A-LR", "ESM2-1", "GCM3-1", "CM4", "ESM4", "LR", "HR"]


def _draw_facet(rng: np.random.Generator, facet: str, chosen: dict[str, str]) -> str:
    if facet == "source_id":
        stem = chosen.get("institution_id", "MODEL").split("-")[0]
        return f"{stem}-{_MODEL_STEMS[rng.integers(len(_MODEL_STEMS))]}"
    if facet == "member_id":
        return f"r{rng.integers(1, 31)}i1p1f{rng.integers(1, 4)}"
    if facet == "version":
        return f"v20{rng.integers(18, 23)}{rng.integers(1, 13):02d}{rng.integers(1, 29):02d}"
    pool = _POOLS[facet]
    return pool[rng.integers(len(pool))]


def _path_rng(seed: int, path: DatasetPath) -> np.random.Generator:
    return np.random.default_rng([seed, _blake2b64(path.text.encode())])


def _generate_tree(spec: CatalogSpec, path: DatasetPath) -> list[FileEntry]:
    """Files below one dataset path; depends only on (seed, path)."""
    rng = _path_rng(spec.seed, path)
    chosen = path.as_dict()
    below = [f for f in CMIP6_FACETS if f not in chosen]
    n_files = spec.files_per_path.sample(rng)
    n_leaves = min(spec.leaves_per_path.sample(rng), n_files) if below else 1
    leaves: list[tuple[str, ...]] = []
    for _ in range(n_leaves * 8):
        if len(leaves) == n_leaves:
            break
        values: dict[str, str] = dict(chosen)
        leaf = []
        for facet in below:
            values[facet] = _draw_facet(rng, facet, values)
            leaf.append(values[facet])
        if tuple(leaf) not in leaves:
            leaves.append(tuple(leaf))
    sizes = spec.file_size.sample(rng, n_files)
    entries = []
    for i in range(n_files):
        leaf = leaves[i % len(leaves)]
        stem = "_".join(leaf[-4:-1]) if len(leaf) > 1 else "data"
        name = "/".join(leaf + (f"{stem}_{i:04d}.nc",))
        entries.append(FileEntry(name, int(sizes[i]), file_checksum(spec.seed, path, name, spec.checksum)))
    return sorted(entries)


def _generate_paths(spec: CatalogSpec) -> list[DatasetPath]:
    rng = np.random.default_rng([spec.seed, 0x5EED])
    facets = CMIP6_FACETS[: spec.depth]
    seen: set[DatasetPath] = set()
    out: list[DatasetPath] = []
    attempts = 0
    while len(out) < spec.n_paths:
        attempts += 1
        values: dict[str, str] = {}
        for facet in facets:
            values[facet] = _draw_facet(rng, facet, values)
        if attempts > 50 * spec.n_paths:
            # pools exhausted for a shallow depth; disambiguate the last facet
            values[facets[-1]] = f"{values[facets[-1]]}-{len(out)}"
        p = DatasetPath(spec.prefix, tuple(values.items()))
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def _rescale(tree: dict[DatasetPath, list[FileEntry]], order: list[DatasetPath], total: int) -> None:
    files = [(p, i) for p in order for i in range(len(tree[p]))]
    if total < len(files):
        raise InvalidSpec(f"total_bytes={total} is smaller than the number of files ({len(files)})")
    current = sum(e.size for p in order for e in tree[p])
    scaled = [max(1, tree[p][i].size * total // current) for p, i in files]
    remainder = total - sum(scaled)
    n = len(scaled)
    if remainder >= 0:
        scaled = [s + remainder // n + (1 if j < remainder % n else 0) for j, s in enumerate(scaled)]
    else:
        # max(1, ...) pushed the sum over; shave the excess off the largest files
        for j in sorted(range(n), key=lambda j: -scaled[j]):
            take = min(scaled[j] - 1, -remainder)
            scaled[j] -= take
            remainder += take
            if remainder == 0:
                break
    for (p, i), size in zip(files, scaled):
        tree[p][i] = tree[p][i]._replace(size=size)


@dataclass
class Catalog:
    """Dataset paths in catalog order together with the files below each one."""

    paths: list[DatasetPath]
    tree: dict[DatasetPath, tuple[FileEntry, ...]]
    seed: int = 0
    spec: CatalogSpec | None = None
    _index: dict[str, DatasetPath] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.tree = {p: tuple(self.tree[p]) for p in self.paths}
        self._index = {p.text: p for p in self.paths}
        if len(self._index) != len(self.paths):
            raise InvalidSpec("catalog paths are not unique")
        for p in self.paths:
            for e in self.tree[p]:
                if e.size <= 0:
                    raise InvalidSpec(f"non-positive size for {p}/{e.name}")

    @cached_property
    def totals(self) -> Totals:
        dirs = files = size = 0
        for p in self.paths:
            m = self.manifest(p)
            dirs += m.directories
            files += m.files
            size += m.bytes
        return Totals(dirs, files, size)

    def __contains__(self, p: DatasetPath) -> bool:
        return p in self.tree

    def __len__(self) -> int:
        return len(self.paths)

    def lookup(self, text: str) -> DatasetPath:
        try:
            return self._index[text.rstrip("/") or text]
        except KeyError:
            raise UnknownPath(text) from None

    def root_of(self, p: DatasetPath) -> DatasetPath | None:
        """The catalog path equal to or containing ``p``."""
        if p in self.tree:
            return p
        for depth in range(p.depth - 1, 0, -1):
            anc = DatasetPath(p.prefix, p.components[:depth])
            if anc in self.tree:
                return anc
        return None

    def manifest(self, p: DatasetPath) -> Manifest:
        root = self.root_of(p)
        if root is None:
            raise UnknownPath(str(p))
        if root == p:
            return Manifest.from_entries(p, self.tree[p])
        rel = p.relative_to(root) + "/"
        sub = [e._replace(name=e.name[len(rel):]) for e in self.tree[root] if e.name.startswith(rel)]
        if not sub:
            raise UnknownPath(str(p))
        return Manifest.from_entries(p, sub)

    def children(self, p: DatasetPath) -> list[DatasetPath]:
        """Immediate subdirectories of ``p`` (catalog path or a descendant)."""
        m = self.manifest(p)
        names = sorted({e.name.split("/", 1)[0] for e in m.entries if "/" in e.name})
        facet_pool = CMIP6_FACETS if p.facets == CMIP6_FACETS[: p.depth] else GENERIC_FACETS
        facet = facet_pool[p.depth] if p.depth < len(facet_pool) else None
        return [p.child(n, facet) for n in names]

    def has_loose_files(self, p: DatasetPath) -> bool:
        return any("/" not in e.name for e in self.manifest(p).entries)

    def extend(self, paths: Iterable[DatasetPath]) -> list[DatasetPath]:
        """Add synthetic trees for paths not yet catalogued; returns the new ones."""
        spec = self.spec or CatalogSpec(n_paths=1, seed=self.seed)
        spec = CatalogSpec(**{**spec.to_config(), "total_bytes": None, "n_paths": 1})
        added = []
        for p in paths:
            if p in self.tree or self.root_of(p) is not None:
                continue
            self.paths.append(p)
            self.tree[p] = tuple(_generate_tree(spec, p))
            self._index[p.text] = p
            added.append(p)
        if added:
            self.__dict__.pop("totals", None)
        return added

    # -- serialization -----------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format": "replicator-catalog/1",
            "seed": self.seed,
            "spec": self.spec.to_config() if self.spec else None,
            "paths": [
                {
                    "path": p.text,
                    "prefix": p.prefix,
                    "facets": list(p.facets),
                    "files": [[e.name, e.size, f"{e.checksum:016x}"] for e in self.tree[p]],
                }
                for p in self.paths
            ],
        }
        return json.dumps(doc, indent=None, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Catalog:
        doc = json.loads(text)
        if doc.get("format") != "replicator-catalog/1":
            raise InvalidSpec("not a catalog file")
        paths, tree = [], {}
        for item in doc["paths"]:
            p = parse_drs_path(item["path"], "generic", prefix=item["prefix"], facets=item["facets"])
            paths.append(p)
            tree[p] = [FileEntry(n, s, int(c, 16)) for n, s, c in item["files"]]
        spec = CatalogSpec.from_config(doc["spec"]) if doc.get("spec") else None
        return cls(paths, tree, seed=doc["seed"], spec=spec)

    def save(self, dest: str | os.PathLike) -> None:
        Path(dest).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, src: str | os.PathLike) -> Catalog:
        return cls.from_json(Path(src).read_text(encoding="utf-8"))


def generate_catalog(spec: CatalogSpec) -> Catalog:
    """Deterministically generate ``spec.n_paths`` unique dataset paths and their files."""
    paths = _generate_paths(spec)
    return catalog_from_paths(paths, spec)


def catalog_from_paths(paths: Iterable[DatasetPath], spec: CatalogSpec) -> Catalog:
    """Attach synthetic file trees to an explicit list of paths (e.g. a path-list file)."""
    paths = list(paths)
    if not paths:
        raise InvalidSpec("no paths")
    tree = {p: _generate_tree(spec, p) for p in paths}
    if spec.total_bytes is not None:
        _rescale(tree, paths, spec.total_bytes)
    return Catalog(paths, tree, seed=spec.seed, spec=spec)


def manifest(c: Catalog, p: DatasetPath) -> Manifest:
    return c.manifest(p)
