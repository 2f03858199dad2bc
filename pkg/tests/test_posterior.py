import warnings

import numpy as np
import pytest

from cvfactor.model import FactorLoadingParams, sigma_at
from cvfactor.posterior import (
    DrawStore,
    beta_contrasts,
    corr_from_sigma,
    diagnostics,
    ess,
    extract_trace,
    rho_draws,
    rmse_correlations,
    sigma_draws,
    split_rhat,
    summarize,
    summarize_draws,
)


def make_store(chains, manifest=None):
    base = {"chain_ids": list(range(len(chains))), "shapes": {}}
    base.update(manifest or {})
    base["shapes"] = {k: list(v.shape[1:]) for k, v in chains[0].items()}
    return DrawStore(chains=chains, manifest=base)


class TestSummarize:
    def test_constant_draws(self):
        s = summarize_draws(np.full((50, 3), 2.5), "c")
        np.testing.assert_array_equal(s.values, 2.5)

    def test_linear_interpolation_median(self):
        draws = np.arange(1, 101, dtype=float)[:, None]
        s = summarize_draws(draws, "x")
        assert s.median()[0] == pytest.approx(50.5)

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(0)
        draws = rng.normal(size=(501, 4))
        s = summarize_draws(draws, "y", probs=(0.1, 0.5, 0.9))
        srt = np.sort(draws, axis=0)
        # linear interpolation oracle: index h = (n-1) p
        for ci, p in enumerate((0.1, 0.5, 0.9)):
            h = (501 - 1) * p
            lo = srt[int(np.floor(h))]
            hi = srt[int(np.ceil(h))]
            expect = lo + (h - np.floor(h)) * (hi - lo)
            np.testing.assert_allclose(s.values[:, ci], expect, rtol=1e-12)

    def test_order_consistent(self):
        rng = np.random.default_rng(1)
        s = summarize_draws(rng.normal(size=(200, 5)), "z")
        assert np.all(s.values[:, 0] <= s.values[:, 1])
        assert np.all(s.values[:, 1] <= s.values[:, 2])

    def test_requires_median(self):
        with pytest.raises(ValueError):
            summarize_draws(np.zeros((10, 1)), "q", probs=(0.1, 0.9))


class TestSigmaRho:
    def make_factor_store(self, q, f, s2):
        chains = [{"q": np.asarray(q), "f": np.asarray(f),
                   "sigma2": np.asarray(s2),
                   "beta": np.zeros((len(s2), 3, 1)),
                   "alpha": np.zeros((len(s2), 3)),
                   "r": np.zeros((len(s2), 2))}]
        return make_store(chains)

    def test_zero_loadings_give_identity_correlation(self):
        store = self.make_factor_store(np.zeros((4, 3, 2)), np.ones((4, 2, 2)),
                                       np.full(4, 0.5))
        rho = rho_draws(store, [1.0, 0.7])
        np.testing.assert_allclose(rho, np.broadcast_to(np.eye(3), (4, 3, 3)),
                                   atol=1e-15)

    def test_rank_one_limit_correlation_one(self):
        q = np.ones((2, 3, 1))
        f = np.ones((2, 1, 1))
        store = self.make_factor_store(q, f, np.full(2, 1e-12))
        rho = rho_draws(store, [1.0])
        assert np.min(np.abs(rho)) > 1 - 1e-9

    def test_matches_model_oracle_per_draw(self):
        rng = np.random.default_rng(2)
        n, J, K, P = 5, 4, 2, 3
        q = rng.normal(size=(n, J, K))
        f = rng.normal(size=(n, K, P))
        s2 = rng.uniform(0.2, 1.0, size=n)
        store = self.make_factor_store(q, f, s2)
        x = np.array([1.0, 0.4, -1.2])
        sig = sigma_draws(store, x)
        for t in range(n):
            oracle = sigma_at(FactorLoadingParams(Q=q[t], F=f[t], sigma2=s2[t]), x)
            np.testing.assert_allclose(sig[t], oracle, atol=1e-12)

    def test_rho_in_unit_range(self):
        rng = np.random.default_rng(3)
        store = self.make_factor_store(rng.normal(size=(10, 5, 2)),
                                       rng.normal(size=(10, 2, 2)),
                                       rng.uniform(0.1, 1.0, 10))
        rho = rho_draws(store, [1.0, 2.0])
        assert np.all(rho >= -1.0) and np.all(rho <= 1.0)


class TestRmse:
    def test_perfect_recovery(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(3, 4, 4))
        a = (a + a.transpose(0, 2, 1)) / 2
        assert rmse_correlations(a, a.copy()) == 0.0

    def test_constant_offset(self):
        rho_hat = np.zeros((2, 5, 5))
        rho_true = np.full((2, 5, 5), 0.5)
        assert rmse_correlations(rho_hat, rho_true) == pytest.approx(0.5)

    def test_matches_flattened_oracle(self):
        rng = np.random.default_rng(5)
        h = rng.uniform(-1, 1, size=(3, 6, 6))
        t = rng.uniform(-1, 1, size=(3, 6, 6))
        got = rmse_correlations(h, t)
        diffs = []
        for p in range(3):
            for j in range(6):
                for k in range(j + 1, 6):
                    diffs.append(h[p, j, k] - t[p, j, k])
        assert got == pytest.approx(np.sqrt(np.mean(np.square(diffs))), rel=1e-12)

    def test_pair_order_invariance(self):
        rng = np.random.default_rng(6)
        h = rng.uniform(-1, 1, size=(1, 5, 5))
        t = rng.uniform(-1, 1, size=(1, 5, 5))
        h = (h + h.transpose(0, 2, 1)) / 2
        t = (t + t.transpose(0, 2, 1)) / 2
        perm = np.random.default_rng(7).permutation(5)
        assert rmse_correlations(h, t) == pytest.approx(
            rmse_correlations(h[:, perm][:, :, perm], t[:, perm][:, :, perm]))


class TestBetaContrasts:
    def make_beta_store(self, beta_draws):
        n = beta_draws.shape[0]
        chains = [{"beta": beta_draws, "sigma2": np.ones(n)}]
        return make_store(chains)

    def test_equal_columns_give_zero(self):
        rng = np.random.default_rng(8)
        b = rng.normal(size=(40, 3, 1))
        beta = np.concatenate([b, b], axis=2)
        store = self.make_beta_store(beta)
        (summ, excl), = beta_contrasts(store, [(0, 1)])
        np.testing.assert_array_equal(summ.values, 0.0)
        assert not excl.any()

    def test_shifted_columns_give_shift(self):
        rng = np.random.default_rng(9)
        b = rng.normal(size=(40, 3, 1))
        beta = np.concatenate([b + 1.7, b], axis=2)
        store = self.make_beta_store(beta)
        (summ, excl), = beta_contrasts(store, [(0, 1)])
        np.testing.assert_allclose(summ.values, 1.7, atol=1e-12)
        assert excl.all()

    def test_matches_draw_oracle(self):
        rng = np.random.default_rng(10)
        beta = rng.normal(size=(300, 2, 3))
        store = self.make_beta_store(beta)
        (summ, _), = beta_contrasts(store, [(2, 0)])
        diff = beta[:, :, 2] - beta[:, :, 0]
        np.testing.assert_allclose(summ.median(), np.median(diff, axis=0),
                                   rtol=1e-12)


class TestDiagnostics:
    def test_iid_normal_rhat_near_one(self):
        rng = np.random.default_rng(11)
        chains = [rng.normal(size=2000) for _ in range(4)]
        assert split_rhat(chains) == pytest.approx(1.0, abs=0.02)

    def test_constant_ess_zero_with_warning(self):
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            val = ess([np.full(100, 3.0)])
        assert val == 0.0
        assert any("constant" in str(w.message) for w in rec)

    def test_ar1_ess_matches_theory(self):
        rng = np.random.default_rng(12)
        rho = 0.7
        n = 200000
        e = rng.normal(size=n)
        x = np.empty(n)
        x[0] = e[0]
        for t in range(1, n):
            x[t] = rho * x[t - 1] + np.sqrt(1 - rho ** 2) * e[t]
        got = ess([x])
        expect = n * (1 - rho) / (1 + rho)
        assert abs(got - expect) / expect < 0.2

    def test_iid_ess_near_n(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=20000)
        assert ess([x]) > 0.8 * 20000

    def test_diagnostics_dict(self):
        rng = np.random.default_rng(14)
        chains = [{"sigma2": rng.normal(size=400),
                   "beta": rng.normal(size=(400, 2, 1))} for _ in range(2)]
        store = make_store(chains)
        out = diagnostics(store)
        assert set(out) == {"sigma2", "beta_0_0", "beta_1_0"}
        assert out["sigma2"]["rhat"] == pytest.approx(1.0, abs=0.05)

    def test_extract_trace(self):
        rng = np.random.default_rng(15)
        chains = [{"beta": rng.normal(size=(50, 2, 2))} for _ in range(3)]
        store = make_store(chains)
        traces = extract_trace(store, "beta", (1, 0))
        assert len(traces) == 3 and traces[0].shape == (50,)
        np.testing.assert_array_equal(traces[1], chains[1]["beta"][:, 1, 0])


class TestStorePersistence:
    def make_full_store(self, seed=0):
        rng = np.random.default_rng(seed)
        n = 7
        chains = [{
            "q": rng.normal(size=(n, 3, 2)),
            "f": rng.normal(size=(n, 2, 2)),
            "sigma2": rng.uniform(0.5, 1.5, size=n),
            "beta": rng.normal(size=(n, 3, 1)),
            "alpha": rng.normal(size=(n, 3)),
            "r": rng.normal(size=(n, 4)),
        } for _ in range(2)]
        manifest = {"seed": 5, "hypers": {"K": 2},
                    "cov_design": {"names": ["intercept", "x1"],
                                   "x": [[1.0, 0.0], [1.0, 1.0]]}}
        return make_store(chains, manifest)

    def test_round_trip(self, tmp_path):
        store = self.make_full_store()
        store.save(tmp_path / "st")
        back = DrawStore.load(tmp_path / "st")
        assert back.names == store.names
        for name in store.names:
            np.testing.assert_array_equal(back.stacked(name), store.stacked(name))
        assert back.manifest["seed"] == 5

    def test_save_is_byte_deterministic(self, tmp_path):
        s1 = self.make_full_store()
        s2 = self.make_full_store()
        d1 = s1.save(tmp_path / "a")
        d2 = s2.save(tmp_path / "b")
        for f1 in sorted(d1.rglob("*")):
            if f1.is_dir():
                continue
            f2 = d2 / f1.relative_to(d1)
            assert f1.read_bytes() == f2.read_bytes(), f1.name

    def test_unequal_draw_counts_rejected(self):
        with pytest.raises(ValueError):
            make_store([{"a": np.zeros(3), "b": np.zeros(4)}])

    def test_merge(self):
        s1 = self.make_full_store(0)
        s2 = self.make_full_store(1)
        merged = DrawStore.merge([s1, s2])
        assert len(merged.chains) == 4
        assert merged.n_draws == 28