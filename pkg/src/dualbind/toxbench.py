"""Converter stub for the published ToxBench distribution.

ToxBench ships ERalpha-ligand complexes with AB-FEP binding free energies.
This module turns its index table into the line-delimited dataset format
(docs/dataset_format.md has the mapping table).  Structure-file parsing is
out of scope, so atom lists arrive one of two ways:

  * atoms_dir: a directory of pre-tabulated JSON files, one per complex,
    named <complex_id>.json, each holding the record's "atoms" array; or
  * atoms_provider: a callable taking the raw index row (a dict) and
    returning a list of data.Atom.

Index column names default to the layout below and can be overridden via
the columns argument if the downloaded copy names them differently:

    complex_id, smiles, label

Labels are written raw; capping stays a train/eval-time operation.  SMILES
strings are copied verbatim, so canonicalize upstream (see the format doc).
"""

from __future__ import annotations

import csv
import json
import os

from . import data

DEFAULT_COLUMNS = {
    "complex_id": "complex_id",
    "smiles": "smiles",
    "label": "label",
}
TOXBENCH_PROTEIN_ID = "ERalpha"


def _atoms_from_obj(entries, complex_id):
    atoms = []
    for k, a in enumerate(entries):
        try:
            atoms.append(data.Atom(str(a["element"]), float(a["x"]),
                                   float(a["y"]), float(a["z"]),
                                   bool(a["is_ligand"]), int(a["residue"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise data.DatasetError(
                f"complex {complex_id}: atom {k} malformed ({exc})") from exc
    return atoms


def _dir_provider(atoms_dir):
    def provider(row, _dir=atoms_dir):
        cid = row["__complex_id"]
        path = os.path.join(_dir, f"{cid}.json")
        if not os.path.exists(path):
            raise data.DatasetError(f"complex {cid}: no atoms file at {path}")
        with open(path) as fh:
            return _atoms_from_obj(json.load(fh), cid)
    return provider


def convert_index(index_csv, out_path, *, atoms_dir=None, atoms_provider=None,
                  columns=None, protein_id=TOXBENCH_PROTEIN_ID):
    """Read an index table, attach atoms, validate, and write the dataset.

    Returns the list of converted records.  Fails loudly on a missing
    column (naming what the file actually has) or a bad row.
    """
    if (atoms_dir is None) == (atoms_provider is None):
        raise ValueError("convert_index: give exactly one of atoms_dir/atoms_provider")
    if atoms_provider is None:
        atoms_provider = _dir_provider(atoms_dir)
    cols = dict(DEFAULT_COLUMNS)
    cols.update(columns or {})

    records = []
    with open(index_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        have = reader.fieldnames or []
        missing = [c for c in cols.values() if c not in have]
        if missing:
            raise data.DatasetError(
                f"{index_csv}: missing columns {missing}; file has {have}")
        for i, row in enumerate(reader):
            cid = str(row[cols["complex_id"]])
            try:
                label = float(row[cols["label"]])
            except ValueError:
                raise data.DatasetError(
                    f"{index_csv} row {i + 1}: label "
                    f"{row[cols['label']]!r} is not a number") from None
            row["__complex_id"] = cid
            rec = data.ComplexRecord(
                complex_id=cid,
                smiles=str(row[cols["smiles"]]),
                label=label,
                atoms=atoms_provider(row),
                protein_id=protein_id,
            )
            records.append(rec.validate())
    data.save_dataset(records, out_path)
    return records


def main(argv=None):
    import argparse

    p = argparse.ArgumentParser(
        description="Convert a ToxBench-style index plus atom tables to JSONL.")
    p.add_argument("index_csv")
    p.add_argument("atoms_dir")
    p.add_argument("out")
    p.add_argument("--col", action="append", default=[], metavar="FIELD=NAME",
                   help="override an index column name, e.g. label=abfep")
    args = p.parse_args(argv)
    overrides = dict(kv.split("=", 1) for kv in args.col)
    unknown = set(overrides) - set(DEFAULT_COLUMNS)
    if unknown:
        p.error(f"unknown --col fields: {sorted(unknown)}")
    records = convert_index(args.index_csv, args.out, atoms_dir=args.atoms_dir,
                            columns=overrides)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
