"""Geometric preprocessing: PCA frames, pocket selection, contact lists.

The four frames returned by compute_frames make averaging exactly invariant
under rigid motions: rotating the input rotates the frame set as a whole (up
to reordering), so canonical coordinates seen by the encoder form the same
set of four arrays either way.
"""

from __future__ import annotations

import numpy as np

EIGENGAP_MIN = 1e-9

# sign choices for the first two principal axes; the third follows by cross
# product, which keeps every frame right-handed
SIGN_PATTERNS = ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0))


class DegenerateGeometryError(ValueError):
    """Principal axes are not unique (near-equal covariance eigenvalues)."""


def compute_frames(coords):
    """Four right-handed PCA frames of an (n, 3) point cloud.

    Returns a list of (R, t) pairs in a fixed sign-pattern order; R columns
    are the frame axes and t is the centroid.  Raises
    DegenerateGeometryError when an eigenvalue gap falls below EIGENGAP_MIN,
    since the axes are then numerically arbitrary.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 3:
        raise ValueError(f"compute_frames: need (n>=3, 3) coordinates, got {coords.shape}")
    t = coords.mean(axis=0)
    centered = coords - t
    cov = centered.T @ centered / coords.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    # eigh sorts ascending; use descending variance order
    eigvals = eigvals[::-1]
    v1, v2 = eigvecs[:, 2], eigvecs[:, 1]
    gaps = (eigvals[0] - eigvals[1], eigvals[1] - eigvals[2])
    if min(gaps) < EIGENGAP_MIN:
        raise DegenerateGeometryError(
            f"eigenvalue gaps {gaps[0]:.3e}, {gaps[1]:.3e} below {EIGENGAP_MIN:g}; "
            "principal axes are not well defined for this geometry"
        )
    frames = []
    for s1, s2 in SIGN_PATTERNS:
        a1 = s1 * v1
        a2 = s2 * v2
        R = np.stack([a1, a2, np.cross(a1, a2)], axis=1)
        frames.append((R, t))
    return frames


def apply_frame(coords, R, t):
    """Express world coordinates in a frame: (X - t) @ R."""
    return (np.asarray(coords, dtype=np.float64) - t) @ R


def select_pocket(protein_coords, residue_ids, ligand_coords, k):
    """Residue ids of the k residues closest to the ligand.

    Distance of a residue is the minimum over its atoms to any ligand atom.
    Ties break toward the smaller residue id.  Returns a sorted id array;
    fewer than k residues means all of them.
    """
    protein_coords = np.asarray(protein_coords, dtype=np.float64)
    residue_ids = np.asarray(residue_ids)
    ligand_coords = np.asarray(ligand_coords, dtype=np.float64)
    if protein_coords.shape[0] != residue_ids.shape[0]:
        raise ValueError(
            f"select_pocket: {protein_coords.shape[0]} atoms but {residue_ids.shape[0]} residue ids"
        )
    if protein_coords.shape[0] == 0 or ligand_coords.shape[0] == 0:
        return np.array([], dtype=residue_ids.dtype)

    d = np.linalg.norm(
        protein_coords[:, None, :] - ligand_coords[None, :, :], axis=-1
    ).min(axis=1)
    unique_ids = np.unique(residue_ids)  # sorted, so ties resolve to smaller id
    res_min = np.array([d[residue_ids == rid].min() for rid in unique_ids])
    order = np.argsort(res_min, kind="stable")
    chosen = unique_ids[order[: min(k, unique_ids.size)]]
    return np.sort(chosen)


def pairwise_contacts(ligand_coords, protein_coords, cutoff):
    """Ligand-protein atom pairs strictly closer than cutoff.

    Returns (lig_idx, prot_idx, dist) arrays in row-major pair order.  No
    pair within range gives three empty arrays, which downstream code treats
    as zero interaction energy.
    """
    ligand_coords = np.asarray(ligand_coords, dtype=np.float64)
    protein_coords = np.asarray(protein_coords, dtype=np.float64)
    if cutoff <= 0:
        raise ValueError(f"pairwise_contacts: cutoff must be positive, got {cutoff}")
    if ligand_coords.shape[0] == 0 or protein_coords.shape[0] == 0:
        empty = np.array([], dtype=np.intp)
        return empty, empty.copy(), np.array([], dtype=np.float64)
    d = np.linalg.norm(ligand_coords[:, None, :] - protein_coords[None, :, :], axis=-1)
    li, pi = np.nonzero(d < cutoff)
    return li, pi, d[li, pi]


def pairwise_contacts_self(coords, cutoff):
    """Unordered within-set pairs (i < j) strictly closer than cutoff."""
    coords = np.asarray(coords, dtype=np.float64)
    if cutoff <= 0:
        raise ValueError(f"pairwise_contacts_self: cutoff must be positive, got {cutoff}")
    if coords.shape[0] < 2:
        empty = np.array([], dtype=np.intp)
        return empty, empty.copy(), np.array([], dtype=np.float64)
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    ii, jj = np.nonzero(np.triu(d < cutoff, k=1))
    return ii, jj, d[ii, jj]
