"""Dataset records, line-delimited I/O, affinity-protocol operations, and a
synthetic complex generator with an analytic pose-dependent oracle.

File format: one JSON object per line, UTF-8.  Schema (docs/dataset_format.md
has the full field table):

    {"complex_id": str, "smiles": str, "label": float, "protein_id": str,
     "ligand_only": bool (optional, default false),
     "atoms": [{"element": str, "x": float, "y": float, "z": float,
                "is_ligand": bool, "residue": int}, ...]}

SMILES strings are opaque identity keys here: no canonicalization is
performed, so two spellings of the same molecule count as different ligands.
Upstream data must be canonicalized before conversion or the no-overlap split
guarantee is void.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_PROTEIN_ID = "P0"
CAP_THRESHOLD = -3.0
PARTITIONS = ("train", "val", "test")

# oracle interaction strengths per element; unknown symbols use OTHER_WEIGHT
ORACLE_WEIGHTS = {
    "H": 0.3, "C": 1.0, "N": 1.3, "O": 1.5, "S": 1.8,
    "P": 1.6, "F": 1.1, "Cl": 1.4, "Br": 1.7, "I": 2.0,
}
OTHER_WEIGHT = 1.0
ORACLE_CUTOFF = 10.0
ORACLE_RANGE = (-26.0, 9.0)
ORACLE_SIZE_TERM = 0.1


class DatasetError(ValueError):
    """A dataset file or record violates the documented contract."""


@dataclass
class Atom:
    element: str
    x: float
    y: float
    z: float
    is_ligand: bool
    residue: int = -1


@dataclass
class ComplexRecord:
    complex_id: str
    smiles: str
    label: float
    atoms: list
    protein_id: str = DEFAULT_PROTEIN_ID
    ligand_only: bool = False
    line: int | None = None  # source line for diagnostics, not serialized

    def ligand_coords(self):
        return np.array([[a.x, a.y, a.z] for a in self.atoms if a.is_ligand], dtype=np.float64).reshape(-1, 3)

    def protein_coords(self):
        return np.array([[a.x, a.y, a.z] for a in self.atoms if not a.is_ligand], dtype=np.float64).reshape(-1, 3)

    def protein_residues(self):
        return np.array([a.residue for a in self.atoms if not a.is_ligand], dtype=np.intp)

    def validate(self):
        n_lig = sum(a.is_ligand for a in self.atoms)
        n_prot = len(self.atoms) - n_lig
        if n_lig < 1:
            raise DatasetError(f"record {self.complex_id}: no ligand atoms")
        if n_prot < 1 and not self.ligand_only:
            raise DatasetError(f"record {self.complex_id}: no protein atoms (set ligand_only to permit)")
        if not math.isfinite(self.label):
            raise DatasetError(f"record {self.complex_id}: non-finite label {self.label}")
        for a in self.atoms:
            if not all(math.isfinite(v) for v in (a.x, a.y, a.z)):
                raise DatasetError(f"record {self.complex_id}: non-finite coordinate on {a.element} atom")
            if not a.is_ligand and a.residue < 0:
                raise DatasetError(f"record {self.complex_id}: protein atom with residue {a.residue} < 0")
        return self


_ATOM_FIELDS = ("element", "x", "y", "z", "is_ligand", "residue")
_RECORD_FIELDS = ("complex_id", "smiles", "label", "atoms")


def _record_from_obj(obj, lineno):
    for key in _RECORD_FIELDS:
        if key not in obj:
            raise DatasetError(f"line {lineno}: missing field '{key}'")
    atoms = []
    for k, a in enumerate(obj["atoms"]):
        for key in _ATOM_FIELDS:
            if key not in a:
                raise DatasetError(f"line {lineno}: atom {k} missing field '{key}'")
        atoms.append(
            Atom(str(a["element"]), float(a["x"]), float(a["y"]), float(a["z"]),
                 bool(a["is_ligand"]), int(a["residue"]))
        )
    rec = ComplexRecord(
        complex_id=str(obj["complex_id"]),
        smiles=str(obj["smiles"]),
        label=float(obj["label"]),
        atoms=atoms,
        protein_id=str(obj.get("protein_id", DEFAULT_PROTEIN_ID)),
        ligand_only=bool(obj.get("ligand_only", False)),
        line=lineno,
    )
    return rec.validate()


def _record_to_obj(rec):
    obj = {
        "complex_id": rec.complex_id,
        "smiles": rec.smiles,
        "label": rec.label,
        "protein_id": rec.protein_id,
        "atoms": [
            {"element": a.element, "x": a.x, "y": a.y, "z": a.z,
             "is_ligand": a.is_ligand, "residue": a.residue}
            for a in rec.atoms
        ],
    }
    if rec.ligand_only:
        obj["ligand_only"] = True
    return obj


def load_dataset(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            records.append(_record_from_obj(obj, lineno))
    return records


def save_dataset(records, path):
    # json round-trips python floats exactly (repr-based), so save->load
    # preserves coordinates and labels bit for bit
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(_record_to_obj(rec)))
            fh.write("\n")


def cap_labels(records, threshold=CAP_THRESHOLD):
    """Clamp labels weaker than threshold: y <- min(y, threshold)."""
    if not math.isfinite(threshold):
        raise ValueError(f"cap_labels: threshold must be finite, got {threshold}")
    return [replace(r, label=min(r.label, threshold)) for r in records]


@dataclass
class SplitSpec:
    fractions: tuple
    seed: int
    assignment: dict = field(default_factory=dict)  # smiles -> partition name

    def partition_of(self, smiles):
        return self.assignment[smiles]


def split_by_smiles(records, fractions=(0.7, 0.15, 0.15), seed=0):
    """Assign unique SMILES to train/val/test by largest-remainder counts.

    Every record of a SMILES follows its assignment, so partitions never
    share a ligand.  Deterministic for a given seed.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(PARTITIONS):
        raise ValueError(f"split_by_smiles: need {len(PARTITIONS)} fractions, got {len(fractions)}")
    if any(f <= 0 for f in fractions):
        raise ValueError(f"split_by_smiles: fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split_by_smiles: fractions sum to {sum(fractions)}, expected 1")
    unique = sorted({r.smiles for r in records})
    if len(unique) < len(PARTITIONS):
        raise DatasetError(
            f"split_by_smiles: {len(unique)} unique SMILES cannot fill {len(PARTITIONS)} partitions"
        )
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(unique)))

    n = len(unique)
    raw = [f * n for f in fractions]
    counts = [int(math.floor(x)) for x in raw]
    remainders = [x - c for x, c in zip(raw, counts)]
    short = n - sum(counts)
    for idx in sorted(range(len(fractions)), key=lambda i: (-remainders[i], i))[:short]:
        counts[idx] += 1

    assignment = {}
    pos = 0
    for part, count in zip(PARTITIONS, counts):
        for idx in order[pos : pos + count]:
            assignment[unique[idx]] = part
        pos += count
    return SplitSpec(fractions=fractions, seed=seed, assignment=assignment)


def apply_split(records, spec):
    """Partition records per a SplitSpec; returns (train, val, test) lists."""
    buckets = {name: [] for name in PARTITIONS}
    for rec in records:
        buckets[spec.partition_of(rec.smiles)].append(rec)
    return tuple(buckets[name] for name in PARTITIONS)


def compute_density(records):
    """Observed (protein, ligand) pairs over all possible pairs."""
    if not records:
        raise DatasetError("compute_density: empty dataset")
    pairs = {(r.protein_id, r.smiles) for r in records}
    n_prot = len({r.protein_id for r in records})
    n_lig = len({r.smiles for r in records})
    return len(pairs) / (n_prot * n_lig)


# ---------------------------------------------------------------------------
# Synthetic complexes.  A hemispherical pocket sits at z < 0 and the ligand
# above it, so shifting a ligand along +z strictly lengthens every pair
# distance; the oracle is then strictly monotone under that motion.
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_complexes: int = 200
    n_ligands: int | None = None  # default: one ligand per 4 complexes
    pocket_residues: int = 10
    ligand_atoms: tuple = (6, 14)
    seed: int = 0

    def resolved_ligands(self):
        if self.n_ligands is not None:
            return self.n_ligands
        return max(1, self.n_complexes // 4)


_LIG_ELEMENTS = ("C", "N", "O", "H", "S", "F", "Cl")
_LIG_ELEMENT_P = (0.45, 0.12, 0.12, 0.2, 0.04, 0.04, 0.03)
_PROT_ELEMENTS = ("C", "N", "O", "S")
_PROT_ELEMENT_P = (0.55, 0.2, 0.2, 0.05)


def _element_weight(symbol):
    return ORACLE_WEIGHTS.get(symbol, OTHER_WEIGHT)


def oracle_interaction(record):
    """Raw pairwise attraction term: sum over contacts of w_i w_j exp(-d/2).

    Rigid-motion invariant (depends on distances only) and strictly weakened
    by moving the ligand away from the pocket.
    """
    lig = [a for a in record.atoms if a.is_ligand]
    prot = [a for a in record.atoms if not a.is_ligand]
    total = 0.0
    for a in lig:
        for b in prot:
            d = math.dist((a.x, a.y, a.z), (b.x, b.y, b.z))
            if d < ORACLE_CUTOFF:
                total += _element_weight(a.element) * _element_weight(b.element) * math.exp(-d / 2.0)
    return total


def oracle_raw(record):
    """Interaction term plus the ligand-size term (pre-rescaling score)."""
    n_lig = sum(a.is_ligand for a in record.atoms)
    return oracle_interaction(record) + ORACLE_SIZE_TERM * n_lig


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def synth_generate(config):
    """Deterministic synthetic dataset with analytic oracle labels.

    Each synthetic ligand (opaque SMILES key) has a fixed element multiset
    and template geometry; poses re-orient the template and draw a fresh
    pocket, so labels are pose-dependent.  Raw oracle scores are affinely
    mapped (negative slope) onto the label range: stronger interaction means
    a more negative label.
    """
    if config.n_complexes < 1 or config.pocket_residues < 1:
        raise ValueError("synth_generate: counts must be >= 1")
    lo, hi = config.ligand_atoms
    if lo < 3:
        raise ValueError("synth_generate: ligands need >= 3 atoms for frame construction")
    rng = np.random.default_rng(config.seed)
    n_ligands = config.resolved_ligands()

    templates = []
    for k in range(n_ligands):
        n_atoms = int(rng.integers(lo, hi + 1))
        elements = [str(e) for e in rng.choice(_LIG_ELEMENTS, size=n_atoms, p=_LIG_ELEMENT_P)]
        # anisotropic cloud keeps principal axes well separated
        coords = rng.standard_normal((n_atoms, 3)) * np.array([1.6, 1.1, 0.7])
        coords -= coords.mean(axis=0)
        templates.append((f"LIG-{k:04d}", elements, coords))

    records = []
    for i in range(config.n_complexes):
        smiles, elements, template = templates[i % n_ligands]
        pose = template @ _random_rotation(rng).T + rng.normal(0.0, 0.3, size=template.shape)
        pose -= pose.mean(axis=0)
        pose[:, 2] += 1.0 - pose[:, 2].min()  # ligand strictly above z = +1

        atoms = [
            Atom(e, float(x), float(y), float(z), True, -1)
            for e, (x, y, z) in zip(elements, pose)
        ]
        for res in range(config.pocket_residues):
            # residue anchor on the lower hemisphere shell
            u = rng.uniform(0.0, 2.0 * np.pi)
            cos_t = rng.uniform(-1.0, -0.25)
            sin_t = np.sqrt(1.0 - cos_t**2)
            radius = rng.uniform(4.5, 8.0)
            anchor = radius * np.array([sin_t * np.cos(u), sin_t * np.sin(u), cos_t])
            for _ in range(4):
                offset = rng.normal(0.0, 0.6, size=3)
                xyz = anchor + offset
                if xyz[2] > -0.5:
                    xyz[2] = -0.5 - abs(xyz[2] + 0.5)  # keep pocket strictly below z = -0.5
                element = str(rng.choice(_PROT_ELEMENTS, p=_PROT_ELEMENT_P))
                atoms.append(Atom(element, float(xyz[0]), float(xyz[1]), float(xyz[2]), False, res))
        records.append(
            ComplexRecord(
                complex_id=f"synth-{i:05d}",
                smiles=smiles,
                label=0.0,
                atoms=atoms,
            )
        )

    raws = [oracle_raw(r) for r in records]
    lo_raw, hi_raw = min(raws), max(raws)
    weak, strong = ORACLE_RANGE[1], ORACLE_RANGE[0]  # weakest raw -> +9, strongest -> -26
    if hi_raw - lo_raw < 1e-12:
        labels = [0.5 * (weak + strong)] * len(records)
    else:
        slope = (strong - weak) / (hi_raw - lo_raw)
        labels = [weak + slope * (x - lo_raw) for x in raws]
    return [replace(r, label=float(y)).validate() for r, y in zip(records, labels)]


def write_split_files(records, spec, out_dir, prefix="data"):
    """Apply a split and write one file per partition; returns the paths."""
    parts = apply_split(records, spec)
    paths = []
    os.makedirs(out_dir, exist_ok=True)
    for name, recs in zip(PARTITIONS, parts):
        path = os.path.join(out_dir, f"{prefix}.{name}.jsonl")
        save_dataset(recs, path)
        paths.append(path)
    return paths
