"""Training losses.

Two ingredients: a supervised squared error anchoring the predicted energy of
the observed structure to its label, and a denoising term that pushes the
energy gradient at Gaussian-perturbed ligand coordinates toward the corruption
score, so observed poses sit in local minima of the learned landscape.  The
denoising term contains the energy gradient itself; differentiating it with
respect to parameters relies on backward() being differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class PerturbationSample:
    """One noise draw on a ligand: original and perturbed coordinates."""

    clean: np.ndarray  # (m, 3)
    noisy: np.ndarray  # (m, 3)
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError(f"PerturbationSample: sigma must be positive, got {self.sigma}")
        if self.clean.shape != self.noisy.shape:
            raise ValueError(
                f"PerturbationSample: shape mismatch {self.clean.shape} vs {self.noisy.shape}"
            )


def perturb_ligand(lig_xyz, sigma, rng):
    """Add isotropic Gaussian noise of scale sigma to every ligand atom."""
    clean = np.asarray(lig_xyz, dtype=np.float64)
    noisy = clean + sigma * rng.standard_normal(clean.shape)
    return PerturbationSample(clean=clean, noisy=noisy, sigma=float(sigma))


def gaussian_conditional_score(noisy, clean, sigma):
    """Gradient of log q(noisy | clean) with respect to the noisy coordinates,
    where q is the Gaussian corruption kernel: -(noisy - clean) / sigma**2."""
    return -(np.asarray(noisy) - np.asarray(clean)) / float(sigma) ** 2


def mse_loss(pred, label):
    """(prediction - label)^2 for one sample, as a graph scalar."""
    r = ad.sub(pred, ad.constant(np.asarray(label, dtype=np.float64)))
    return ad.mul(r, r)


def dsm_loss(energy_of, sample):
    """Squared distance between the energy gradient at the perturbed ligand
    and the corruption score, summed over ligand coordinates.

    energy_of maps a (m, 3) coordinate tensor to a scalar energy tensor; the
    gradient is taken through it with recording on, so the returned loss is
    differentiable with respect to anything energy_of depends on.
    """
    lig = ad.tensor(sample.noisy, requires_grad=True)
    e = energy_of(lig)
    (grad,) = ad.backward(e, [lig], warn_non_ancestor=False)
    target = ad.constant((sample.noisy - sample.clean) / sample.sigma**2)
    resid = ad.sub(grad, target)
    return ad.sum_reduce(ad.mul(resid, resid))


def total_loss(energy_of, label, sample, lam):
    """Per-sample combined loss: mse + lam * dsm.

    Returns (total, mse, dsm); dsm is None when lam == 0 and the perturbed
    branch is skipped entirely.
    """
    if lam < 0.0:
        raise ValueError(f"total_loss: lam must be >= 0, got {lam}")
    pred = energy_of(ad.constant(sample.clean))
    m = mse_loss(pred, label)
    if lam == 0.0:
        return m, m, None
    d = dsm_loss(energy_of, sample)
    return ad.add(m, ad.scale(d, float(lam))), m, d
