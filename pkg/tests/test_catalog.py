import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from replicator.catalog import (
    CMIP5_FACETS,
    CMIP6_FACETS,
    Catalog,
    CatalogSpec,
    DatasetPath,
    Dist,
    FileEntry,
    catalog_from_paths,
    file_checksum,
    format_drs_path,
    generate_catalog,
    load_path_list,
    manifest,
    parse_drs_path,
    save_path_list,
)
from replicator.errors import InvalidSpec, MalformedPath, UnknownPath

from oracles import recount_totals

TABLE_EXAMPLE = "/css03_data/CMIP6/CMIP/MPI-M/MPI-ESM1-2-LR/historical/r27i1p1f1/EdayZ/hus/gn/v20210901/"


def test_parse_table_example():
    p = parse_drs_path(TABLE_EXAMPLE, "cmip6")
    assert p.prefix == "css03_data"
    assert p.as_dict() == {
        "mip_era": "CMIP6", "activity_drs": "CMIP", "institution_id": "MPI-M",
        "source_id": "MPI-ESM1-2-LR", "experiment_id": "historical", "member_id": "r27i1p1f1",
        "table_id": "EdayZ", "variable_id": "hus", "grid_label": "gn", "version": "v20210901",
    }
    assert p.facets == CMIP6_FACETS
    assert p.depth == 10


def test_format_table_example():
    p = parse_drs_path(TABLE_EXAMPLE, "cmip6")
    assert format_drs_path(p) == TABLE_EXAMPLE.rstrip("/")
    assert str(p) == TABLE_EXAMPLE.rstrip("/")


def test_single_facet_generic():
    p = DatasetPath("", (("root", "X"),))
    assert format_drs_path(p) == "/X"
    assert parse_drs_path("/X", "generic", prefix="", facets=["root"]) == p


@pytest.mark.parametrize("raw", ["", "/", "///"])
def test_empty_is_malformed(raw):
    with pytest.raises(MalformedPath):
        parse_drs_path(raw)


@pytest.mark.parametrize("raw", [
    "/CMIP6/CMIP/MPI-M/MPI-ESM1-2-LR/historical/r27i1p1f1/EdayZ/hus/gn",  # nine facets
    "/CMIP6/CMIP//MPI-M/MPI-ESM1-2-LR/historical/r27i1p1f1/EdayZ/hus/gn/v1",  # empty segment
    "/css03_data/CMIP6/CMIP/MPI M/MPI-ESM1-2-LR/historical/r27i1p1f1/EdayZ/hus/gn/v1",  # space
])
def test_malformed_cmip6(raw):
    with pytest.raises(MalformedPath):
        parse_drs_path(raw, "cmip6")


def test_nine_facets_after_explicit_prefix():
    with pytest.raises(MalformedPath):
        parse_drs_path(TABLE_EXAMPLE.replace("/v20210901", ""), "cmip6", prefix="css03_data")


def test_generic_depth_bounds():
    twelve = "/" + "/".join(f"s{i}" for i in range(12))
    with pytest.raises(MalformedPath):
        parse_drs_path(twelve, "generic")
    eleven = "/" + "/".join(f"s{i}" for i in range(11))
    assert parse_drs_path(eleven, "generic").depth == 11


def test_cmip5_eleven_levels():
    raw = "/cmip5/output1/NCAR/CCSM4/historical/mon/atmos/Amon/r1i1p1/v20121031/tas"
    p = parse_drs_path(raw, "cmip5")
    assert p.facets == CMIP5_FACETS
    assert p.facet("variable") == "tas"


def test_prefix_mismatch():
    with pytest.raises(MalformedPath):
        parse_drs_path("/other/CMIP6", "generic", prefix="css03_data")


def test_round_trip_generated_cmip6_paths():
    # 1000 seeded paths with the full ten-facet layout
    cat = generate_catalog(CatalogSpec(n_paths=1000, seed=11, depth=10, files_per_path=Dist("fixed", value=1)))
    assert len(cat.paths) == 1000
    for p in cat.paths:
        assert parse_drs_path(format_drs_path(p), "cmip6") == p


segment = st.from_regex(r"[A-Za-z0-9][A-Za-z0-9._+-]{0,11}", fullmatch=True)


@settings(max_examples=300, deadline=None)
@given(prefix=st.lists(segment, max_size=2), values=st.lists(segment, min_size=1, max_size=11))
def test_round_trip_generic(prefix, values):
    facets = [f"f{i}" for i in range(len(values))]
    p = DatasetPath("/".join(prefix), tuple(zip(facets, values)))
    text = format_drs_path(p)
    assert parse_drs_path(text, "generic", prefix=p.prefix, facets=facets) == p
    assert parse_drs_path(text + "/", "generic", prefix=p.prefix, facets=facets) == p


def test_path_rejects_separator_in_value():
    with pytest.raises(MalformedPath):
        DatasetPath("", (("a", "x/y"),))


def test_generate_deterministic_and_totals_recount():
    spec = CatalogSpec(n_paths=50, seed=5)
    a, b = generate_catalog(spec), generate_catalog(spec)
    assert a.to_json() == b.to_json()
    assert tuple(a.totals) == recount_totals(a)
    assert generate_catalog(CatalogSpec(n_paths=50, seed=6)).to_json() != a.to_json()


def test_file_sizes_positive_and_checksums_deterministic():
    cat = generate_catalog(CatalogSpec(n_paths=30, seed=2))
    for p in cat.paths:
        for e in cat.tree[p]:
            assert e.size > 0
            assert 0 <= e.checksum < 2**64
            assert e.checksum == file_checksum(2, p, e.name)


def test_total_bytes_exact():
    total = 8_182_644_448_359_330
    cat = generate_catalog(CatalogSpec(n_paths=200, seed=1, total_bytes=total))
    assert cat.totals.bytes == total
    assert recount_totals(cat)[2] == total


def test_total_bytes_smaller_than_file_count():
    with pytest.raises(InvalidSpec):
        generate_catalog(CatalogSpec(n_paths=10, seed=1, total_bytes=3))


def test_manifest_sorted_and_counts():
    cat = generate_catalog(CatalogSpec(n_paths=20, seed=3))
    for p in cat.paths:
        m = manifest(cat, p)
        names = [e.name for e in m.entries]
        assert names == sorted(names)
        assert m.files == len(m.entries)
        assert m.bytes == sum(e.size for e in m.entries)
        dirs = {""} | {"/".join(n.split("/")[:k]) for n in names for k in range(1, n.count("/") + 1)}
        assert m.directories == len(dirs)


def test_manifest_of_descendant_and_children_cover_parent():
    cat = generate_catalog(CatalogSpec(n_paths=20, seed=4, leaves_per_path=Dist("fixed", value=3)))
    for p in cat.paths:
        kids = cat.children(p)
        assert kids
        union = sorted(
            FileEntry(f"{c.relative_to(p)}/{e.name}", e.size, e.checksum)
            for c in kids for e in cat.manifest(c).entries
        )
        assert tuple(union) == cat.manifest(p).entries
        assert kids[0].facets[-1] == CMIP6_FACETS[p.depth]


def test_manifest_unknown_path():
    cat = generate_catalog(CatalogSpec(n_paths=3, seed=4))
    with pytest.raises(UnknownPath):
        cat.manifest(parse_drs_path("/nowhere/x", "generic"))


def test_json_round_trip(tmp_path):
    cat = generate_catalog(CatalogSpec(n_paths=25, seed=9))
    cat.save(tmp_path / "c.json")
    back = Catalog.load(tmp_path / "c.json")
    assert back.paths == cat.paths
    assert back.tree == cat.tree
    assert back.totals == cat.totals
    assert json.loads(cat.to_json())["format"] == "replicator-catalog/1"


def test_load_path_list_skips_comments_and_dedupes(tmp_path):
    text = f"# header\n\n{TABLE_EXAMPLE}\n{TABLE_EXAMPLE}\n"
    paths = load_path_list(io.StringIO(text))
    assert len(paths) == 1
    f = tmp_path / "paths.txt"
    save_path_list(paths, f)
    assert load_path_list(f) == paths


def test_load_path_list_reports_line():
    with pytest.raises(MalformedPath, match="line 2"):
        load_path_list(f"{TABLE_EXAMPLE}\n/short/path\n")


def test_catalog_from_paths_and_extend():
    paths = load_path_list(TABLE_EXAMPLE)
    cat = catalog_from_paths(paths, CatalogSpec(n_paths=1, seed=0))
    assert cat.paths == paths
    new = parse_drs_path(TABLE_EXAMPLE.replace("r27", "r28"), "cmip6")
    assert cat.extend([new, paths[0]]) == [new]
    assert cat.totals.files == len(cat.tree[paths[0]]) + len(cat.tree[new])


def test_dist_sampling():
    rng = np.random.default_rng(0)
    assert Dist("fixed", value=7).sample(rng) == 7
    xs = Dist("uniform", low=2, high=4).sample(rng, 200)
    assert set(xs) <= {2, 3, 4}
    assert (Dist("lognormal", median=100, sigma=0.5).sample(rng, 100) >= 1).all()
    with pytest.raises(InvalidSpec):
        Dist("weird")
