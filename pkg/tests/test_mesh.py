import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpsi import mesh as meshmod
from fpsi.mesh import MeshError, generate_channel, generate_structured, import_msh, interface_pairs


def test_structured_2x2_counts(mesh22):
    assert mesh22.num_vertices == 9
    assert mesh22.num_cells == 8
    assert len(mesh22.edges_with_tag("sigma")) == 2


def test_structured_1x2_counts():
    m = generate_structured(1, 2)
    assert m.num_vertices == 6
    assert m.num_cells == 4
    assert len(m.edges_with_tag("sigma")) == 1


def test_odd_ny_rejected():
    with pytest.raises(MeshError, match="even"):
        generate_structured(2, 3)


def test_degenerate_geometry_rejected():
    with pytest.raises(MeshError, match="width and height"):
        generate_structured(2, 2, width=0.0)


def test_subdomain_areas(mesh22):
    assert abs(mesh22.subdomain_area("S") - 0.5) < 1e-12
    assert abs(mesh22.subdomain_area("P") - 0.5) < 1e-12


def test_positive_cell_areas(mesh22):
    assert (mesh22.cell_areas() > 0).all()


def test_interface_pairs_structured_4x4():
    m = generate_structured(4, 4)
    pairs = interface_pairs(m)
    assert len(pairs) == 4
    for p in pairs:
        assert abs(p.h_e - 0.25) < 1e-14
        assert np.allclose(p.normal_s, [0.0, 1.0])
        assert np.allclose(p.normal_s + p.normal_p, 0.0)
        assert abs(np.dot(p.normal_s, p.tangent)) < 1e-14
        assert abs(np.linalg.norm(p.tangent) - 1.0) < 1e-14


def test_z_identity_and_anisotropic():
    m = generate_structured(2, 2)
    for p in interface_pairs(m):
        assert abs(p.z_perm - 1.0) < 1e-14
    for p in interface_pairs(m, kappa=np.diag([2.0, 3.0])):
        assert abs(p.z_perm - 2.0) < 1e-14  # horizontal interface, tangent (1,0)


@settings(max_examples=20, deadline=None)
@given(nx=st.integers(1, 6), half_ny=st.integers(1, 4))
def test_sigma_pairing_property(nx, half_ny):
    m = generate_structured(nx, 2 * half_ny)
    pairs = interface_pairs(m)
    assert len(pairs) == nx
    seen = {p.edge_id for p in pairs}
    assert seen == set(m.edges_with_tag("sigma").tolist())
    for p in pairs:
        assert m.cell_tags[p.cell_s] == "S"
        assert m.cell_tags[p.cell_p] == "P"
        assert np.allclose(p.normal_s + p.normal_p, 0.0)
    assert abs(m.subdomain_area("S") + m.subdomain_area("P") - 1.0) < 1e-12


def test_refinement_halves_h():
    coarse = generate_structured(2, 2)
    fine = generate_structured(4, 4)
    assert abs(fine.h_max() - 0.5 * coarse.h_max()) < 1e-14
    hc = [p.h_e for p in interface_pairs(coarse)]
    hf = [p.h_e for p in interface_pairs(fine)]
    assert all(abs(h - 0.5 * hc[0]) < 1e-14 for h in hf)


def test_channel_three_layers():
    m = generate_channel(10, 14)
    assert abs(m.subdomain_area("S") - 2.0 * 0.4) < 1e-12
    assert abs(m.subdomain_area("P") - 2.0 * 1.0) < 1e-12
    pairs = interface_pairs(m)
    assert len(pairs) == 20  # two interface lines of 10 facets each
    lower = [p for p in pairs if abs(0.5 * sum(
        m.vertices[v][1] for v in p.vertex_ids) - 0.3) < 1e-9]
    lower_ids = {p.edge_id for p in lower}
    upper = [p for p in pairs if p.edge_id not in lower_ids]
    assert len(lower) == len(upper) == 10
    for p in lower:
        assert np.allclose(p.normal_s, [0.0, -1.0])
    for p in upper:
        assert np.allclose(p.normal_s, [0.0, 1.0])
    assert len(m.edges_with_tag("gamma_s")) == 4  # inlet facets of the core
    assert len(m.edges_with_tag("gamma_s_n")) == 4  # outlet, do-nothing


def test_channel_interface_must_hit_grid_line():
    with pytest.raises(MeshError, match="grid"):
        generate_channel(10, 13)


GOLDEN = "tests/data/two_layer_8tri.msh"
TAGS = {"fluid": "S", "porous": "P", "interface": "sigma",
        "wall_s": "gamma_s", "wall_p": "gamma_p_d"}


def test_import_msh_golden_matches_generator(mesh22):
    m = import_msh(GOLDEN, TAGS)
    assert m.num_vertices == mesh22.num_vertices
    assert m.num_cells == mesh22.num_cells
    assert np.allclose(np.sort(m.vertices, axis=0),
                       np.sort(mesh22.vertices, axis=0))
    assert sorted(map(tuple, np.sort(m.cells, axis=1).tolist())) == \
        sorted(map(tuple, np.sort(mesh22.cells, axis=1).tolist()))
    assert len(m.edges_with_tag("sigma")) == 2
    assert m.cells_in("S").size == 4 and m.cells_in("P").size == 4


def test_import_msh_nonconforming_interface(tmp_path):
    # sigma line placed on an edge between two S triangles
    bad = (tmp_path / "bad.msh")
    with open(GOLDEN, encoding="utf-8") as fh:
        text = fh.read()
    # golden interface lines join nodes 4-5 and 5-6 (y = 0.5); move one onto
    # the diagonal edge 2-5, which joins two S cells
    bad.write_text(text.replace("9 1 2 3 3 4 5", "9 1 2 3 3 2 5"))
    with pytest.raises(MeshError, match="interface"):
        import_msh(bad, TAGS)


def test_import_msh_empty_file(tmp_path):
    empty = tmp_path / "empty.msh"
    empty.write_text("")
    with pytest.raises(MeshError, match="empty"):
        import_msh(empty, TAGS)


def test_import_msh_wrong_version(tmp_path):
    path = tmp_path / "v4.msh"
    path.write_text("$MeshFormat\n4.1 0 8\n$EndMeshFormat\n")
    with pytest.raises(MeshError, match="version"):
        import_msh(path, TAGS)


def test_import_msh_missing_tag(tmp_path):
    path = tmp_path / "m.msh"
    with open(GOLDEN, encoding="utf-8") as fh:
        path.write_text(fh.read())
    with pytest.raises(MeshError, match="missing from tag_map"):
        import_msh(path, {"fluid": "S"})


def test_import_msh_dangling_facet(tmp_path):
    path = tmp_path / "dangling.msh"
    with open(GOLDEN, encoding="utf-8") as fh:
        text = fh.read()
    # line element between nodes 1 and 9 is no triangle edge
    text = text.replace("9 1 2 3 3 4 5", "9 1 2 3 3 1 9")
    path.write_text(text)
    with pytest.raises(MeshError, match="dangling"):
        import_msh(path, TAGS)


def test_import_msh_ignored_section_warns(tmp_path):
    path = tmp_path / "extra.msh"
    with open(GOLDEN, encoding="utf-8") as fh:
        text = fh.read()
    path.write_text(text + "$Periodic\n0\n$EndPeriodic\n")
    with pytest.warns(UserWarning, match="Periodic"):
        import_msh(path, TAGS)


def test_gamma_p_rule_splits_boundary():
    def rule(x, y):
        return "gamma_p_n" if abs(y - 1.0) < 1e-12 else "gamma_p_d"

    m = generate_structured(2, 2, gamma_p_rule=rule)
    assert len(m.edges_with_tag("gamma_p_n")) == 2  # the top edge row
    assert len(m.edges_with_tag("gamma_p_d")) == 2  # one edge per upper side
    with pytest.raises(MeshError, match="unknown tag"):
        generate_structured(2, 2, gamma_p_rule=lambda x, y: "outflow")
