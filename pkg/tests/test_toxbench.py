"""Converter stub: index + atom tables -> dataset file."""

import json

import pytest

from dualbind import data, toxbench


def atom_obj(element="C", x=0.0, y=0.0, z=0.0, is_ligand=True, residue=-1):
    return {"element": element, "x": x, "y": y, "z": z,
            "is_ligand": is_ligand, "residue": residue}


@pytest.fixture
def fixture_dist(tmp_path):
    """A two-complex fabricated distribution in the default layout."""
    index = tmp_path / "index.csv"
    index.write_text(
        "complex_id,smiles,label\n"
        "cplx-1,CCO,-7.25\n"
        "cplx-2,c1ccccc1,-2.0\n"
    )
    atoms_dir = tmp_path / "atoms"
    atoms_dir.mkdir()
    for cid in ("cplx-1", "cplx-2"):
        entries = [atom_obj(), atom_obj("N", 1.5, is_ligand=False, residue=0),
                   atom_obj("O", 3.0, 1.0, is_ligand=False, residue=1)]
        (atoms_dir / f"{cid}.json").write_text(json.dumps(entries))
    return index, atoms_dir


def test_convert_round_trips(fixture_dist, tmp_path):
    index, atoms_dir = fixture_dist
    out = tmp_path / "out.jsonl"
    records = toxbench.convert_index(index, out, atoms_dir=atoms_dir)
    loaded = data.load_dataset(out)
    assert [r.complex_id for r in loaded] == ["cplx-1", "cplx-2"]
    assert loaded[0].smiles == "CCO"
    assert loaded[0].label == -7.25
    assert loaded[1].label == -2.0  # raw, not capped
    assert all(r.protein_id == toxbench.TOXBENCH_PROTEIN_ID for r in loaded)
    assert len(loaded[0].atoms) == 3
    assert records[0].atoms[1].residue == 0


def test_column_override(fixture_dist, tmp_path):
    index, atoms_dir = fixture_dist
    renamed = tmp_path / "renamed.csv"
    renamed.write_text(index.read_text().replace("label", "abfep_dg"))
    out = tmp_path / "out.jsonl"
    with pytest.raises(data.DatasetError, match="missing columns.*label"):
        toxbench.convert_index(renamed, out, atoms_dir=atoms_dir)
    records = toxbench.convert_index(renamed, out, atoms_dir=atoms_dir,
                                     columns={"label": "abfep_dg"})
    assert records[0].label == -7.25


def test_missing_atoms_file_names_the_complex(fixture_dist, tmp_path):
    index, atoms_dir = fixture_dist
    (atoms_dir / "cplx-2.json").unlink()
    with pytest.raises(data.DatasetError, match="cplx-2"):
        toxbench.convert_index(index, tmp_path / "out.jsonl",
                               atoms_dir=atoms_dir)


def test_malformed_atom_entry(fixture_dist, tmp_path):
    index, atoms_dir = fixture_dist
    (atoms_dir / "cplx-1.json").write_text(json.dumps([{"element": "C"}]))
    with pytest.raises(data.DatasetError, match="cplx-1.*atom 0"):
        toxbench.convert_index(index, tmp_path / "out.jsonl",
                               atoms_dir=atoms_dir)


def test_bad_label_reports_row(fixture_dist, tmp_path):
    index, atoms_dir = fixture_dist
    bad = tmp_path / "bad.csv"
    bad.write_text("complex_id,smiles,label\ncplx-1,CCO,strong\n")
    with pytest.raises(data.DatasetError, match="row 1.*strong"):
        toxbench.convert_index(bad, tmp_path / "out.jsonl", atoms_dir=atoms_dir)


def test_provider_callable(fixture_dist, tmp_path):
    index, _ = fixture_dist

    def provider(row):
        assert row["smiles"] in ("CCO", "c1ccccc1")
        return [data.Atom("C", 0, 0, 0, True),
                data.Atom("N", 2, 0, 0, False, residue=0)]

    records = toxbench.convert_index(index, tmp_path / "out.jsonl",
                                     atoms_provider=provider)
    assert len(records) == 2
    assert len(records[0].atoms) == 2


def test_requires_exactly_one_atom_source(fixture_dist, tmp_path):
    index, atoms_dir = fixture_dist
    with pytest.raises(ValueError, match="exactly one"):
        toxbench.convert_index(index, tmp_path / "o.jsonl")
    with pytest.raises(ValueError, match="exactly one"):
        toxbench.convert_index(index, tmp_path / "o.jsonl",
                               atoms_dir=atoms_dir, atoms_provider=lambda r: [])


def test_cli_entry(fixture_dist, tmp_path, capsys):
    index, atoms_dir = fixture_dist
    out = tmp_path / "o.jsonl"
    assert toxbench.main([str(index), str(atoms_dir), str(out)]) == 0
    assert "wrote 2 records" in capsys.readouterr().out
    assert len(data.load_dataset(out)) == 2
