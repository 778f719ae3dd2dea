"""Training loop for the energy model: Adam, exponential lr schedule,
denoising regularization, validation tracking and binary checkpoints.

Determinism contract: every random draw is derived from (seed, epoch), so a
run that stops after epoch k and resumes from its checkpoint produces the
same parameters, history rows and validation numbers as an uninterrupted
run.  All arithmetic is float64 on a single thread.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data
from . import frames as fr
from . import losses, model

CHECKPOINT_MAGIC = b"DBND"
CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "lr", "train_mse", "train_dsm", "train_total", "val_rmse")


class TrainingError(RuntimeError):
    """Training could not proceed (for example a fully non-finite epoch)."""


class CheckpointError(RuntimeError):
    pass


class CheckpointMagicError(CheckpointError):
    """The file does not start with the checkpoint magic."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before the declared payload was complete."""


class CheckpointConfigError(CheckpointError):
    """The stored model configuration differs from the requested one."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    lr_decay: float = 0.995
    batch_size: int = 8
    epochs: int = 200
    lam: float = 2.0
    sigma_min: float = 0.5
    sigma_max: float = 1.0
    cap: float | None = data.CAP_THRESHOLD  # None disables validation capping
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"TrainConfig: lr must be positive, got {self.lr}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"TrainConfig: lr_decay {self.lr_decay} outside (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("TrainConfig: batch_size must be >= 1 and epochs >= 0")
        if self.lam < 0:
            raise ValueError(f"TrainConfig: lam must be non-negative, got {self.lam}")
        if self.lam > 0 and not 0.0 < self.sigma_min <= self.sigma_max:
            raise ValueError(
                f"TrainConfig: need 0 < sigma_min <= sigma_max, got "
                f"[{self.sigma_min}, {self.sigma_max}]"
            )
        if self.cap is not None and not np.isfinite(self.cap):
            raise ValueError(f"TrainConfig: cap must be finite or None, got {self.cap}")


def desk_train_config(**overrides):
    """CPU-scale defaults: small batches, mild noise, gentle decay."""
    return TrainConfig(**overrides)


def paper_train_config(**overrides):
    """Full-scale published schedule."""
    base = dict(lr=5e-4, lr_decay=0.95, batch_size=128, epochs=120,
                lam=2.0, sigma_min=0.1, sigma_max=1.0)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at_epoch(base, decay, epoch):
    """Exponential schedule; epoch 0 uses the base rate unmodified."""
    if epoch < 0:
        raise ValueError(f"lr_at_epoch: epoch must be >= 0, got {epoch}")
    return base * decay**epoch


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    t: int
    m: dict
    v: dict


def adam_init(params):
    return AdamState(
        t=0,
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Checkpoints.  Layout (all integers little-endian):
#   magic "DBND" | u32 version | u64 metadata length | UTF-8 JSON metadata |
#   u64 tensor count | per tensor: u64 name length, name, u64 rank,
#   u64 extents..., raw float64 data.
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: model.ModelConfig
    train_config: TrainConfig
    epoch: int  # completed epochs
    params: dict  # name -> float64 array
    adam: AdamState
    best_val: float | None = None
    best_epoch: int | None = None
    variant: str = "full"  # "full" or "ligand_only"

    def param_tensors(self):
        return {k: ad.tensor(a.copy(), requires_grad=True) for k, a in self.params.items()}

    def energy_fn(self):
        return model.ligand_only_energy if self.variant == "ligand_only" else model.energy


def _metadata_dict(ckpt):
    return {
        "format": "dualbind-checkpoint",
        "model_config": dataclasses.asdict(ckpt.model_config),
        "train_config": dataclasses.asdict(ckpt.train_config),
        "epoch": ckpt.epoch,
        "adam_t": ckpt.adam.t,
        "best_val": ckpt.best_val,
        "best_epoch": ckpt.best_epoch,
        "variant": ckpt.variant,
        "rng": {"scheme": "per-epoch", "seed": ckpt.train_config.seed},
    }


def save_checkpoint(path, ckpt):
    """Write the checkpoint; saving a loaded checkpoint is byte-identical."""
    meta = json.dumps(_metadata_dict(ckpt), sort_keys=True).encode("utf-8")
    tensors = []
    for name, arr in ckpt.params.items():
        tensors.append(("param/" + name, arr))
    for name, arr in ckpt.adam.m.items():
        tensors.append(("adam_m/" + name, arr))
    for name, arr in ckpt.adam.v.items():
        tensors.append(("adam_v/" + name, arr))
    tensors.sort(key=lambda kv: kv[0])
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors:
            nb = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<Q", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes())


def _read_exact(fh, n, what):
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointTruncatedError(
            f"checkpoint truncated while reading {what} ({len(b)}/{n} bytes)"
        )
    return b


def load_checkpoint(path, expect_model_config=None):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: format version {version}, supported {CHECKPOINT_VERSION}"
            )
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "tensor count"))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<Q", _read_exact(fh, 8, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8, "rank"))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents"))
            nbytes = 8 * int(np.prod(shape, dtype=np.int64)) if rank else 8
            raw = _read_exact(fh, nbytes, f"data of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after payload")

    mc = model.ModelConfig(**{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in meta["model_config"].items()
    })
    if expect_model_config is not None and mc != expect_model_config:
        raise CheckpointConfigError(
            f"{path}: stored model config {mc} != expected {expect_model_config}"
        )
    tc = TrainConfig(**meta["train_config"])
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    adam = AdamState(
        t=meta["adam_t"],
        m={k[len("adam_m/"):]: v for k, v in tensors.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: v for k, v in tensors.items() if k.startswith("adam_v/")},
    )
    expect_names = {name for name, _ in model.param_spec(mc)}
    for group in (params, adam.m, adam.v):
        if set(group) != expect_names:
            raise CheckpointError(f"{path}: tensor names do not match the model config")
    return Checkpoint(
        model_config=mc, train_config=tc, epoch=meta["epoch"],
        params=params, adam=adam,
        best_val=meta["best_val"], best_epoch=meta["best_epoch"],
        variant=meta.get("variant", "full"),
    )


# ---------------------------------------------------------------------------
# History CSV
# ---------------------------------------------------------------------------


def write_history(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_history(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != HISTORY_COLUMNS:
            raise TrainingError(f"{path}: unexpected history header {header}")
        return [(int(e),) + tuple(float(v) for v in rest) for e, *rest in r]


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass
class _Sample:
    prep: model.Prepared
    frame_set: list  # frames of the clean pose, reused every epoch
    contacts: tuple


def _bind(records, mconfig, energy_fn, prepare_fn):
    out = []
    for rec in records:
        prep = prepare_fn(rec, mconfig)
        if energy_fn is model.ligand_only_energy:
            fs = fr.compute_frames(prep.lig_xyz)
            ct = fr.pairwise_contacts_self(prep.lig_xyz, mconfig.cutoff)[:2]
        else:
            fs = fr.compute_frames(np.concatenate([prep.prot_xyz, prep.lig_xyz]))
            ct = fr.pairwise_contacts(prep.lig_xyz, prep.prot_xyz, mconfig.cutoff)[:2]
        out.append(_Sample(prep=prep, frame_set=fs, contacts=ct))
    return out


def predict_samples(params, mconfig, samples, energy_fn=model.energy):
    """Eval-mode energies of already prepared samples, geometry cached."""
    out = np.empty(len(samples))
    with ad.Graph(), ad.no_record():
        for i, s in enumerate(samples):
            out[i] = energy_fn(params, mconfig, s.prep,
                               frame_set=s.frame_set, contacts=s.contacts).item()
    return out


def _val_rmse(params, mconfig, samples, cap, energy_fn):
    preds = predict_samples(params, mconfig, samples, energy_fn)
    if cap is not None:
        preds = np.minimum(preds, cap)
    labels = np.array([s.prep.label for s in samples])
    return float(np.sqrt(np.mean((preds - labels) ** 2)))


@dataclass
class FitResult:
    params: dict  # tensors after the final epoch
    history: list  # HISTORY_COLUMNS rows
    best_epoch: int
    best_params: dict  # arrays at the best validation epoch
    best_val: float | None
    skipped_batches: int
    checkpoint: Checkpoint  # state after the final epoch
    best_checkpoint: Checkpoint


def fit(mconfig, tconfig, train_records, val_records=(), *, params=None,
        checkpoint=None, best_checkpoint=None, energy_fn=model.energy,
        prepare_fn=None, out_dir=None, log=None):
    """Train the energy model on prepared complexes.

    Per epoch: reshuffle, iterate batches (last partial batch kept), average
    the combined loss over the batch, one Adam step per batch, decay the
    learning rate afterwards, then score the validation set with capped
    predictions.  The best epoch is the lowest validation RMSE, earliest on
    ties; with no validation records the final epoch is the best.

    A batch whose loss or gradients go non-finite is skipped with a warning;
    an epoch in which every batch is skipped aborts the run.

    Resuming: pass the last checkpoint (and the best one, so the running
    best parameters survive the restart).  Epoch-indexed seeding makes a
    resumed run identical to an uninterrupted one.
    """
    if prepare_fn is None:
        prepare_fn = (model.prepare_ligand_only if energy_fn is model.ligand_only_energy
                      else model.prepare)
    variant = "ligand_only" if energy_fn is model.ligand_only_energy else "full"
    if checkpoint is not None:
        if checkpoint.model_config != mconfig:
            raise CheckpointConfigError(
                f"resume: checkpoint model config {checkpoint.model_config} "
                f"!= requested {mconfig}"
            )
        if checkpoint.variant != variant:
            raise CheckpointConfigError(
                f"resume: checkpoint variant {checkpoint.variant!r} does not match "
                f"the requested energy function ({variant!r})"
            )
        params = checkpoint.param_tensors()
        adam = AdamState(t=checkpoint.adam.t,
                         m={k: a.copy() for k, a in checkpoint.adam.m.items()},
                         v={k: a.copy() for k, a in checkpoint.adam.v.items()})
        start_epoch = checkpoint.epoch
        best_val = checkpoint.best_val
        best_epoch = checkpoint.best_epoch
    else:
        if params is None:
            params = model.init_params(mconfig, seed=tconfig.seed)
        adam = adam_init(params)
        start_epoch = 0
        best_val = None
        best_epoch = None
    if not train_records:
        raise TrainingError("fit: no training records")

    train = _bind(train_records, mconfig, energy_fn, prepare_fn)
    val = _bind(val_records, mconfig, energy_fn, prepare_fn)
    names = list(params)
    if best_checkpoint is not None:
        best_params = {k: a.copy() for k, a in best_checkpoint.params.items()}
    else:
        best_params = {k: params[k].data.copy() for k in names}
    history = []
    skipped = 0
    n = len(train)

    for epoch in range(start_epoch, tconfig.epochs):
        rng = np.random.default_rng([tconfig.seed, epoch])
        lr = lr_at_epoch(tconfig.lr, tconfig.lr_decay, epoch)
        order = rng.permutation(n)
        sum_mse = 0.0
        sum_dsm = 0.0
        used = 0
        updates = 0
        for lo in range(0, n, tconfig.batch_size):
            batch = order[lo:lo + tconfig.batch_size]
            with ad.Graph() as g:
                total = None
                b_mse = 0.0
                b_dsm = 0.0
                ok = True
                for idx in batch:
                    s = train[int(idx)]
                    if tconfig.lam > 0:
                        sigma = rng.uniform(tconfig.sigma_min, tconfig.sigma_max)
                        pert = losses.perturb_ligand(s.prep.lig_xyz, sigma, rng)
                    else:
                        pert = losses.PerturbationSample(
                            clean=s.prep.lig_xyz, noisy=s.prep.lig_xyz, sigma=1.0)

                    def energy_of(lig, s=s):
                        if isinstance(lig, ad.Tensor) and lig.requires_grad:
                            # noisy pose: frames and contacts from the noisy
                            # coordinates themselves
                            return energy_fn(params, mconfig, s.prep, mode="train",
                                             rng=rng, lig_xyz=lig)
                        return energy_fn(params, mconfig, s.prep, mode="train",
                                         rng=rng, lig_xyz=lig,
                                         frame_set=s.frame_set, contacts=s.contacts)

                    loss, m, d = losses.total_loss(energy_of, s.prep.label, pert,
                                                   tconfig.lam)
                    if not np.isfinite(loss.item()):
                        ok = False
                        break
                    b_mse += m.item()
                    b_dsm += d.item() if d is not None else 0.0
                    total = loss if total is None else ad.add(total, loss)
                if ok:
                    total = ad.scale(total, 1.0 / len(batch))
                    grads = ad.backward(total, [params[k] for k in names],
                                        warn_non_ancestor=False, record=False)
                    gmap = {}
                    for k, gt in zip(names, grads):
                        if not np.all(np.isfinite(gt.data)):
                            ok = False
                            break
                        gmap[k] = gt.data
                if ok:
                    adam_step(params, gmap, adam, lr)
                    updates += 1
                    used += len(batch)
                    sum_mse += b_mse
                    sum_dsm += b_dsm
                else:
                    skipped += 1
                    warnings.warn(
                        f"fit: skipped non-finite batch at epoch {epoch}",
                        RuntimeWarning, stacklevel=2)
                g.release()
        if updates == 0:
            raise TrainingError(f"fit: every batch of epoch {epoch} was non-finite")

        train_mse = sum_mse / used
        train_dsm = sum_dsm / used
        val_rmse = (_val_rmse(params, mconfig, val, tconfig.cap, energy_fn)
                    if val else float("nan"))
        history.append((epoch, lr, train_mse, train_dsm,
                        train_mse + tconfig.lam * train_dsm, val_rmse))
        if log is not None:
            log(history[-1])
        if val and (best_val is None or val_rmse < best_val):
            best_val = val_rmse
            best_epoch = epoch
            best_params = {k: params[k].data.copy() for k in names}

    if not val or best_epoch is None:
        # no validation signal: the run's final state is the best state
        best_epoch = tconfig.epochs - 1 if tconfig.epochs > 0 else 0
        best_params = {k: params[k].data.copy() for k in names}

    final = Checkpoint(
        model_config=mconfig, train_config=tconfig, epoch=tconfig.epochs,
        params={k: params[k].data.copy() for k in names}, adam=adam,
        best_val=best_val, best_epoch=best_epoch, variant=variant,
    )
    best = Checkpoint(
        model_config=mconfig, train_config=tconfig, epoch=best_epoch + 1,
        params=best_params,
        adam=AdamState(t=0, m={k: np.zeros_like(a) for k, a in adam.m.items()},
                       v={k: np.zeros_like(a) for k, a in adam.v.items()}),
        best_val=best_val, best_epoch=best_epoch, variant=variant,
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "last.ckpt"), final)
        save_checkpoint(os.path.join(out_dir, "best.ckpt"), best)
        write_history(os.path.join(out_dir, "history.csv"), history)
    return FitResult(
        params=params, history=history, best_epoch=best_epoch,
        best_params=best_params, best_val=best_val,
        skipped_batches=skipped, checkpoint=final, best_checkpoint=best,
    )
