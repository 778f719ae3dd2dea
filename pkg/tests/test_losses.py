import warnings

import numpy as np
import pytest

from dualbind import autodiff as ad
from dualbind import data, losses, model


def synth_prep(seed=19):
    cfg = data.SynthConfig(n_complexes=2, n_ligands=1, pocket_residues=4,
                           ligand_atoms=(6, 8), seed=seed)
    rec = data.synth_generate(cfg)[0]
    mc = model.desk_config()
    return model.prepare(rec, mc), mc


class TestPerturbLigand:
    def test_clean_kept_and_noise_scale(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((500, 3))
        s = losses.perturb_ligand(x, 0.7, rng)
        np.testing.assert_array_equal(s.clean, x)
        assert s.sigma == 0.7
        noise = (s.noisy - s.clean).ravel()
        assert noise.std() == pytest.approx(0.7, rel=0.05)
        assert abs(noise.mean()) < 0.05

    def test_seeded_determinism(self):
        x = np.arange(12.0).reshape(4, 3)
        a = losses.perturb_ligand(x, 0.3, np.random.default_rng(5))
        b = losses.perturb_ligand(x, 0.3, np.random.default_rng(5))
        np.testing.assert_array_equal(a.noisy, b.noisy)
        c = losses.perturb_ligand(x, 0.3, np.random.default_rng(6))
        assert np.any(a.noisy != c.noisy)

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_nonpositive_sigma_rejected(self, sigma):
        x = np.zeros((3, 3))
        with pytest.raises(ValueError):
            losses.perturb_ligand(x, sigma, np.random.default_rng(0))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            losses.PerturbationSample(clean=np.zeros((3, 3)),
                                      noisy=np.zeros((4, 3)), sigma=0.5)


class TestGaussianConditionalScore:
    def test_closed_form(self):
        rng = np.random.default_rng(1)
        clean = rng.standard_normal((5, 3))
        noisy = clean + rng.standard_normal((5, 3))
        s = losses.gaussian_conditional_score(noisy, clean, 0.8)
        np.testing.assert_array_equal(s, -(noisy - clean) / 0.8**2)

    def test_matches_log_density_slope(self):
        """Finite differences of log N(noisy | clean, sigma^2 I)."""
        rng = np.random.default_rng(2)
        clean = rng.standard_normal((4, 3))
        noisy = clean + 0.6 * rng.standard_normal((4, 3))
        sigma = 0.6

        def logq(x):
            return -float(np.sum((x - clean) ** 2)) / (2 * sigma**2)

        score = losses.gaussian_conditional_score(noisy, clean, sigma)
        h = 1e-6
        for flat in (0, 5, 11):
            i, j = divmod(flat, 3)
            xp = noisy.copy(); xp[i, j] += h
            xm = noisy.copy(); xm[i, j] -= h
            fd = (logq(xp) - logq(xm)) / (2 * h)
            assert fd == pytest.approx(score[i, j], abs=1e-6)


class TestMseLoss:
    def test_value_and_gradient(self):
        with ad.Graph():
            pred = ad.tensor(np.array(2.5), requires_grad=True)
            loss = losses.mse_loss(pred, -1.0)
            assert loss.item() == pytest.approx(3.5**2)
            (g,) = ad.backward(loss, [pred], record=False)
            assert g.item() == pytest.approx(2 * 3.5)


class TestDsmLoss:
    def test_quadratic_energy_closed_form(self):
        """E(x) = a/2 ||x||^2 gives residual a*noisy - (noisy-clean)/sigma^2."""
        a = 0.37
        rng = np.random.default_rng(3)
        sample = losses.perturb_ligand(rng.standard_normal((6, 3)), 0.5, rng)

        def energy_of(lig):
            return ad.scale(ad.sum_reduce(ad.mul(lig, lig)), a / 2)

        with ad.Graph():
            got = losses.dsm_loss(energy_of, sample).item()
        resid = a * sample.noisy - (sample.noisy - sample.clean) / sample.sigma**2
        assert got == pytest.approx(float(np.sum(resid**2)), rel=1e-12)

    def test_equals_score_matching_form_on_real_model(self):
        """Assembling ||(-grad) - score||^2 from the score helper must agree
        with the loss to machine precision (negation is exact)."""
        prep, mc = synth_prep()
        params = model.init_params(mc, seed=1)
        rng = np.random.default_rng(4)
        sample = losses.perturb_ligand(prep.lig_xyz, 0.6, rng)

        def energy_of(lig):
            return model.energy(params, mc, prep, lig_xyz=lig)

        with ad.Graph() as g:
            via_loss = losses.dsm_loss(energy_of, sample).item()
            g.release()
        with ad.Graph() as g:
            _, grad = model.energy_grad_ligand(params, mc, prep, lig_xyz=sample.noisy)
            score = losses.gaussian_conditional_score(sample.noisy, sample.clean,
                                                      sample.sigma)
            direct = float(np.sum(((-grad.data) - score) ** 2))
            g.release()
        assert abs(via_loss - direct) <= 1e-12

    def test_detached_energy_gives_plain_score_norm_without_warning(self):
        """An energy that ignores the coordinates leaves the score term."""
        rng = np.random.default_rng(5)
        sample = losses.perturb_ligand(rng.standard_normal((4, 3)), 0.9, rng)
        c = None

        def energy_of(lig):
            nonlocal c
            c = ad.tensor(np.array(1.5), requires_grad=True)
            return ad.mul(c, c)

        with ad.Graph(), warnings.catch_warnings():
            warnings.simplefilter("error")
            got = losses.dsm_loss(energy_of, sample).item()
        target = (sample.noisy - sample.clean) / sample.sigma**2
        assert got == pytest.approx(float(np.sum(target**2)), rel=1e-12)


class ToyModel:
    """Two-layer scalar energy over flattened coordinates, for derivative
    checks against finite differences."""

    def __init__(self, dim, hidden, seed=0):
        rng = np.random.default_rng(seed)
        self.w1 = ad.tensor(rng.standard_normal((dim, hidden)) * 0.4, requires_grad=True)
        self.b1 = ad.tensor(rng.standard_normal(hidden) * 0.1, requires_grad=True)
        self.w2 = ad.tensor(rng.standard_normal((hidden, 1)) * 0.4, requires_grad=True)
        self.b2 = ad.tensor(np.zeros(1), requires_grad=True)

    def theta(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def energy_of(self, lig):
        flat = ad.reshape(lig, (1, self.w1.data.shape[0]))
        h = ad.silu(ad.affine(flat, self.w1, self.b1))
        return ad.sum_reduce(ad.affine(h, self.w2, self.b2))


class TestDsmParameterGradients:
    def test_matches_finite_differences(self):
        """The loss contains an inner gradient, so this exercises
        differentiation through backward()."""
        toy = ToyModel(dim=12, hidden=6, seed=7)
        rng = np.random.default_rng(8)
        sample = losses.perturb_ligand(rng.standard_normal((4, 3)), 0.5, rng)

        with ad.Graph() as g:
            loss = losses.dsm_loss(toy.energy_of, sample)
            # b2 drops out of the inner gradient, so zeros for it are correct
            grads = ad.backward(loss, toy.theta(), record=False,
                                warn_non_ancestor=False)
            analytic = [t.data.copy() for t in grads]
            g.release()

        def value():
            # recording stays on: the loss differentiates its energy inside
            with ad.Graph() as g:
                v = losses.dsm_loss(toy.energy_of, sample).item()
                g.release()
            return v

        h = 1e-5
        for p, ga in zip(toy.theta(), analytic):
            flat = p.data.ravel()
            for idx in range(flat.size):
                keep = flat[idx]
                flat[idx] = keep + h
                up = value()
                flat[idx] = keep - h
                down = value()
                flat[idx] = keep
                fd = (up - down) / (2 * h)
                ref = ga.ravel()[idx]
                denom = max(abs(fd), abs(ref), 1e-6)
                assert abs(fd - ref) / denom < 1e-4

    def test_recorded_and_raw_outer_backward_agree(self):
        toy = ToyModel(dim=12, hidden=6, seed=9)
        rng = np.random.default_rng(10)
        sample = losses.perturb_ligand(rng.standard_normal((4, 3)), 0.7, rng)
        outs = []
        for rec in (True, False):
            with ad.Graph() as g:
                loss = losses.dsm_loss(toy.energy_of, sample)
                grads = ad.backward(loss, toy.theta(), record=rec,
                                    warn_non_ancestor=False)
                outs.append([t.data.copy() for t in grads])
                g.release()
        for a, b in zip(*outs):
            np.testing.assert_allclose(a, b, atol=1e-12)


class TestTotalLoss:
    def _setup(self, lam_seed=11):
        toy = ToyModel(dim=9, hidden=5, seed=lam_seed)
        rng = np.random.default_rng(lam_seed)
        sample = losses.perturb_ligand(rng.standard_normal((3, 3)), 0.4, rng)
        return toy, sample

    def test_combination_arithmetic(self):
        toy, sample = self._setup()
        with ad.Graph() as g:
            total, m, d = losses.total_loss(toy.energy_of, -2.0, sample, lam=2.0)
            assert total.item() == pytest.approx(m.item() + 2.0 * d.item(), rel=1e-15)
            g.release()

    def test_lambda_zero_skips_dsm(self):
        toy, sample = self._setup()
        with ad.Graph() as g:
            total, m, d = losses.total_loss(toy.energy_of, -2.0, sample, lam=0.0)
            assert d is None
            assert total is m
            n_records = len(g.records)
            g.release()
        with ad.Graph() as g:
            losses.total_loss(toy.energy_of, -2.0, sample, lam=1.0)
            assert len(g.records) > n_records  # perturbation branch really ran
            g.release()

    def test_negative_lambda_rejected(self):
        toy, sample = self._setup()
        with pytest.raises(ValueError):
            losses.total_loss(toy.energy_of, 0.0, sample, lam=-0.5)

    def test_gradients_flow_through_both_terms(self):
        toy, sample = self._setup(lam_seed=12)
        with ad.Graph() as g:
            total, _, _ = losses.total_loss(toy.energy_of, 1.0, sample, lam=2.0)
            grads = ad.backward(total, toy.theta(), record=False)
            assert all(np.any(t.data != 0) for t in grads)
            g.release()

    def test_real_model_smoke(self):
        prep, mc = synth_prep(seed=23)
        params = model.init_params(mc, seed=2)
        rng = np.random.default_rng(13)
        sample = losses.perturb_ligand(prep.lig_xyz, 0.8, rng)

        def energy_of(lig):
            return model.energy(params, mc, prep, lig_xyz=lig)

        with ad.Graph() as g:
            total, m, d = losses.total_loss(energy_of, prep.label, sample, lam=2.0)
            assert np.isfinite(total.item())
            assert m.item() >= 0 and d.item() >= 0
            grads = ad.backward(total, [params["embed/w"]], record=False)
            assert np.all(np.isfinite(grads[0].data))
            assert np.any(grads[0].data != 0)
            g.release()
