"""Frame-averaged attention encoder with a pairwise contact energy head.

The energy of a complex is a sum over ligand-protein atom pairs closer than
the cutoff: each pair contributes a small MLP applied to the elementwise
product of the two atom embeddings concatenated with a Gaussian radial basis
expansion of the pair distance.  Embeddings come from a pre-norm residual
attention stack run in each of the four PCA frames and averaged, which makes
the whole energy exactly invariant under rigid motions.

Frames and the contact list are treated as constants of the configuration
point: gradients with respect to coordinates flow through the canonical
coordinates and the pair distances, not through the eigendecomposition or
the cutoff selection.  Invariance and gradient equivariance still hold
exactly by symmetry of the frame set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import frames as fr
from .data import DatasetError

ELEMENT_VOCAB = ("H", "C", "N", "O", "S", "P", "F", "Cl", "Br", "I")
FEATURE_DIM = len(ELEMENT_VOCAB) + 2  # + "other" slot + is-ligand bit


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    layers: int = 3
    heads: int = 4
    ffn_mult: int = 4
    pair_hidden: tuple | None = None  # defaults to (width, width // 2)
    cutoff: float = 10.0
    rbf_bins: int = 16
    dropout: float = 0.0
    pocket_k: int = 50

    def __post_init__(self):
        if self.pair_hidden is not None:
            # JSON round trips deliver lists; keep equality checks honest
            object.__setattr__(self, "pair_hidden", tuple(self.pair_hidden))
        if self.width < 1 or self.layers < 1 or self.heads < 1 or self.rbf_bins < 2:
            raise ValueError(f"ModelConfig: widths and counts must be >= 1, got {self}")
        if self.width % self.heads != 0:
            raise ValueError(f"ModelConfig: width {self.width} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"ModelConfig: dropout {self.dropout} outside [0, 1)")
        if self.cutoff <= 0:
            raise ValueError(f"ModelConfig: cutoff must be positive, got {self.cutoff}")
        if self.pair_hidden is not None and any(h < 1 for h in self.pair_hidden):
            raise ValueError(f"ModelConfig: pair widths must be >= 1, got {self.pair_hidden}")

    def pair_widths(self):
        return self.pair_hidden if self.pair_hidden is not None else (self.width, self.width // 2)


def desk_config(**overrides):
    """Small configuration for CPU-scale runs (~1.6e5 parameters)."""
    return ModelConfig(**overrides)


def paper_config(**overrides):
    """Full-scale configuration (~1.02e6 parameters)."""
    base = dict(width=128, layers=5, heads=8, dropout=0.1)
    base.update(overrides)
    return ModelConfig(**base)


def featurize(record):
    """Per-atom features: one-hot element over the fixed vocabulary plus an
    "other" slot, then an is-ligand bit.  Row order follows atom order."""
    out = np.zeros((len(record.atoms), FEATURE_DIM))
    index = {e: i for i, e in enumerate(ELEMENT_VOCAB)}
    for row, atom in enumerate(record.atoms):
        out[row, index.get(atom.element, len(ELEMENT_VOCAB))] = 1.0
        if atom.is_ligand:
            out[row, FEATURE_DIM - 1] = 1.0
    return out


def param_spec(config):
    """Ordered (name, shape) list; the key set is a pure function of config."""
    w, d = config.width, FEATURE_DIM + 3
    spec = [("embed/w", (d, w)), ("embed/b", (w,))]
    for i in range(config.layers):
        p = f"layer{i}"
        spec += [(f"{p}/ln1/g", (w,)), (f"{p}/ln1/b", (w,))]
        for name in ("q", "k", "v", "o"):
            spec += [(f"{p}/attn/w{name}", (w, w)), (f"{p}/attn/b{name}", (w,))]
        spec += [(f"{p}/ln2/g", (w,)), (f"{p}/ln2/b", (w,))]
        hidden = w * config.ffn_mult
        spec += [
            (f"{p}/ffn/w1", (w, hidden)), (f"{p}/ffn/b1", (hidden,)),
            (f"{p}/ffn/w2", (hidden, w)), (f"{p}/ffn/b2", (w,)),
        ]
    spec += [("final_ln/g", (w,)), ("final_ln/b", (w,))]
    dims = (w + config.rbf_bins,) + config.pair_widths() + (1,)
    for j in range(len(dims) - 1):
        spec += [(f"pair/w{j}", (dims[j], dims[j + 1])), (f"pair/b{j}", (dims[j + 1],))]
    return spec


def init_params(config, seed=0):
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_spec(config):
        if name.endswith("/g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        params[name] = ad.tensor(arr, requires_grad=True)
    return params


def parameter_count(params):
    return int(sum(t.data.size for t in params.values()))


@dataclass
class Prepared:
    """A complex reduced to model inputs: pocket atoms first, ligand last."""

    prot_xyz: np.ndarray  # (p, 3)
    lig_xyz: np.ndarray  # (m, 3)
    feats: np.ndarray  # (p + m, FEATURE_DIM)
    complex_id: str = ""
    label: float = 0.0


def prepare(record, config):
    """Pocket selection plus featurization for the full interaction model."""
    lig_xyz = record.ligand_coords()
    prot_xyz = record.protein_coords()
    if prot_xyz.shape[0] == 0:
        raise DatasetError(f"record {record.complex_id}: cannot form pocket without protein atoms")
    residues = record.protein_residues()
    keep = fr.select_pocket(prot_xyz, residues, lig_xyz, config.pocket_k)
    keep_set = set(keep.tolist())
    feats_all = featurize(record)
    prot_rows = [i for i, a in enumerate(record.atoms) if not a.is_ligand and a.residue in keep_set]
    lig_rows = [i for i, a in enumerate(record.atoms) if a.is_ligand]
    order = prot_rows + lig_rows
    xyz = np.array([[record.atoms[i].x, record.atoms[i].y, record.atoms[i].z] for i in order])
    return Prepared(
        prot_xyz=xyz[: len(prot_rows)],
        lig_xyz=xyz[len(prot_rows) :],
        feats=feats_all[order],
        complex_id=record.complex_id,
        label=record.label,
    )


def prepare_ligand_only(record, config):
    """Ablation input: the protein is dropped entirely before encoding."""
    lig_rows = [i for i, a in enumerate(record.atoms) if a.is_ligand]
    feats_all = featurize(record)
    xyz = np.array([[record.atoms[i].x, record.atoms[i].y, record.atoms[i].z] for i in lig_rows])
    return Prepared(
        prot_xyz=np.zeros((0, 3)),
        lig_xyz=xyz,
        feats=feats_all[lig_rows],
        complex_id=record.complex_id,
        label=record.label,
    )


def rbf_expand(dist, config):
    """Gaussian radial basis of distances: centers evenly on [0, cutoff],
    shared width equal to the center spacing.  dist is a (k,) tensor."""
    centers = np.linspace(0.0, config.cutoff, config.rbf_bins)
    spacing = config.cutoff / (config.rbf_bins - 1)
    d_col = ad.reshape(dist, (dist.shape[0], 1))
    diff = ad.sub(d_col, ad.constant(centers.reshape(1, -1)))
    return ad.exp(ad.scale(ad.mul(diff, diff), -1.0 / (2.0 * spacing**2)))


def _affine(x, w, b):
    return ad.affine(x, w, b)


def _encoder(params, config, coords, feats, frame_set, mode, rng):
    """Atom embeddings (n, width) averaged over the four frames."""
    n = coords.shape[0]
    # all frames canonicalized by one batched matmul: (f,n,3) @ (f,3,3)
    nf = len(frame_set)
    rots = ad.constant(np.stack([R for R, _ in frame_set]))
    shifts = ad.constant(np.stack([t for _, t in frame_set])[:, None, :])
    xyz4 = ad.matmul(ad.sub(ad.reshape(coords, (1, n, 3)), shifts), rots)
    feat4 = ad.constant(np.broadcast_to(feats[None], (nf, n, FEATURE_DIM)))
    h = _affine(ad.concat([feat4, xyz4], axis=-1), params["embed/w"], params["embed/b"])

    use_dropout = mode == "train" and config.dropout > 0.0
    heads, dh = config.heads, config.width // config.heads
    for i in range(config.layers):
        p = f"layer{i}"
        x = ad.norm_affine(h, params[f"{p}/ln1/g"], params[f"{p}/ln1/b"])
        q = _split_heads(_affine(x, params[f"{p}/attn/wq"], params[f"{p}/attn/bq"]), heads, dh)
        k = _split_heads(_affine(x, params[f"{p}/attn/wk"], params[f"{p}/attn/bk"]), heads, dh)
        v = _split_heads(_affine(x, params[f"{p}/attn/wv"], params[f"{p}/attn/bv"]), heads, dh)
        scores = ad.scale(ad.matmul(q, ad.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        mixed = _merge_heads(ad.matmul(ad.softmax(scores, axis=-1), v), config.width)
        out = _affine(mixed, params[f"{p}/attn/wo"], params[f"{p}/attn/bo"])
        if use_dropout:
            out = ad.dropout(out, config.dropout, rng)
        h = ad.add(h, out)

        x = ad.norm_affine(h, params[f"{p}/ln2/g"], params[f"{p}/ln2/b"])
        hidden = ad.silu(_affine(x, params[f"{p}/ffn/w1"], params[f"{p}/ffn/b1"]))
        out = _affine(hidden, params[f"{p}/ffn/w2"], params[f"{p}/ffn/b2"])
        if use_dropout:
            out = ad.dropout(out, config.dropout, rng)
        h = ad.add(h, out)

    h = ad.norm_affine(h, params["final_ln/g"], params["final_ln/b"])
    return ad.mean_reduce(h, (0,))  # average the four frame channels


def _split_heads(x, heads, dh):
    f, n, _ = x.shape
    return ad.permute(ad.reshape(x, (f, n, heads, dh)), (0, 2, 1, 3))


def _merge_heads(x, width):
    f, _, n, _ = x.shape
    return ad.reshape(ad.permute(x, (0, 2, 1, 3)), (f, n, width))


def _pair_head(params, config, h, emb_i, emb_j, dist):
    """Sum of pair-MLP outputs over the contact list; zero when empty."""
    hi = ad.gather_rows(h, emb_i)
    hj = ad.gather_rows(h, emb_j)
    x = ad.concat([ad.mul(hi, hj), rbf_expand(dist, config)], axis=-1)
    n_mlp = len(config.pair_widths()) + 1
    for j in range(n_mlp):
        x = _affine(x, params[f"pair/w{j}"], params[f"pair/b{j}"])
        if j < n_mlp - 1:
            x = ad.silu(x)
    return ad.sum_reduce(x)


def _distances(a, b):
    """Differentiable Euclidean distances between matched rows of two (k, 3)
    tensors; assumes no coincident pairs (contacts have positive length)."""
    diff = ad.sub(a, b)
    return ad.sqrt(ad.sum_reduce(ad.mul(diff, diff), (1,)))


def energy(params, config, prep, mode="eval", rng=None, lig_xyz=None,
           frame_set=None, contacts=None):
    """Scalar interaction energy of a prepared complex, as a graph tensor.

    lig_xyz may be a Tensor (for gradient computation) or an array override
    of the prepared ligand coordinates.  frame_set and contacts default to
    values computed from the actual coordinates; passing them explicitly
    freezes the configuration (used by finite-difference tests, which must
    differentiate the same function backward() sees).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"energy: mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and config.dropout > 0.0 and rng is None:
        raise ValueError("energy: train mode with dropout needs an rng")
    lig = lig_xyz if isinstance(lig_xyz, ad.Tensor) else ad.constant(
        prep.lig_xyz if lig_xyz is None else lig_xyz
    )
    prot = ad.constant(prep.prot_xyz)
    n_prot = prep.prot_xyz.shape[0]
    all_xyz = np.concatenate([prep.prot_xyz, lig.data], axis=0)
    if frame_set is None:
        frame_set = fr.compute_frames(all_xyz)
    if contacts is None:
        li, pi, _ = fr.pairwise_contacts(lig.data, prep.prot_xyz, config.cutoff)
    else:
        li, pi = contacts
    coords = ad.concat([prot, lig], axis=0)
    h = _encoder(params, config, coords, prep.feats, frame_set, mode, rng)
    if len(li) == 0:
        # no pair inside the cutoff: zero energy with a genuine (empty) graph
        li = np.array([], dtype=np.intp)
        pi = np.array([], dtype=np.intp)
    dist = _distances(ad.gather_rows(lig, li), ad.gather_rows(prot, pi))
    return _pair_head(params, config, h, np.asarray(li) + n_prot, np.asarray(pi), dist)


def ligand_only_energy(params, config, prep, mode="eval", rng=None, lig_xyz=None,
                       frame_set=None, contacts=None):
    """Energy of the ligand alone: same encoder and head, contact list over
    unordered ligand-ligand pairs within the cutoff."""
    if mode not in ("train", "eval"):
        raise ValueError(f"ligand_only_energy: mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and config.dropout > 0.0 and rng is None:
        raise ValueError("ligand_only_energy: train mode with dropout needs an rng")
    lig = lig_xyz if isinstance(lig_xyz, ad.Tensor) else ad.constant(
        prep.lig_xyz if lig_xyz is None else lig_xyz
    )
    feats = prep.feats[prep.prot_xyz.shape[0] :]
    if frame_set is None:
        frame_set = fr.compute_frames(lig.data)
    if contacts is None:
        ii, jj, _ = fr.pairwise_contacts_self(lig.data, config.cutoff)
    else:
        ii, jj = contacts
    h = _encoder(params, config, lig, feats, frame_set, mode, rng)
    dist = _distances(ad.gather_rows(lig, ii), ad.gather_rows(lig, jj))
    return _pair_head(params, config, h, np.asarray(ii), np.asarray(jj), dist)


def energy_value(params, config, prep, energy_fn=None):
    """Deterministic eval-mode energy as a plain float (no graph kept)."""
    fn = energy_fn or energy
    with ad.Graph(), ad.no_record():
        return fn(params, config, prep).item()


def energy_grad_ligand(params, config, prep, lig_xyz=None, energy_fn=None,
                       frame_set=None, contacts=None):
    """Energy and its exact gradient over ligand coordinates, both as graph
    tensors (the gradient stays differentiable with respect to params)."""
    fn = energy_fn or energy
    base = prep.lig_xyz if lig_xyz is None else np.asarray(lig_xyz)
    lig = ad.tensor(base, requires_grad=True)
    e = fn(params, config, prep, lig_xyz=lig, frame_set=frame_set, contacts=contacts)
    (grad,) = ad.backward(e, [lig], warn_non_ancestor=False)
    return e, grad
