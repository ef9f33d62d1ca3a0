from dataclasses import replace

import numpy as np
import pytest

from sake.model import SakeLayer, SakeModel, model_forward
from sake.verify import (
    SUITES,
    CoordinateLeakLayer,
    PropertyResult,
    SingularJacobianError,
    centered_basis,
    check_equivariance,
    direction_norm_deviation,
    finite_diff_grad,
    format_report,
    numeric_subspace_logdet,
    run_verify,
    suite_mutation,
)


class TestPropertyResult:
    def test_pass_iff_within_tolerance(self):
        assert PropertyResult.of("s", 0, 1e-9, 1e-8).passed
        assert PropertyResult.of("s", 0, 1e-8, 1e-8).passed
        assert not PropertyResult.of("s", 0, 2e-8, 1e-8).passed

    def test_mutation_controls_invert(self):
        assert PropertyResult.of("m", 0, 1.0, 1e-8, expect_violation=True).passed
        assert not PropertyResult.of("m", 0, 0.0, 1e-8, expect_violation=True).passed

    def test_line_format(self):
        line = PropertyResult.of("theorem1", 17, 3e-16, 1e-10).line()
        fields = line.split("\t")
        assert fields[0] == "theorem1" and fields[1] == "17" and fields[-1] == "pass"
        assert float(fields[2]) == pytest.approx(3e-16) and float(fields[3]) == 1e-10
        bad = PropertyResult.of("x", 4, 1.0, 0.1)
        assert format_report([bad]).endswith("FAIL") and "\t4\t" in bad.line()


class TestEquivarianceDriver:
    def test_identity_map(self):
        res = check_equivariance(lambda s: s, 3, seeds=10)
        assert res.deviation == 0.0 and res.passed

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_layer_passes(self, n):
        layer = SakeLayer(np.random.default_rng(n), 8, n_basis=12)
        res = check_equivariance(lambda s: layer(replace(s, h=s.node_attr)), n, seeds=30, attr_dim=8)
        assert res.passed, res.line()

    def test_coordinate_leak_fails(self):
        model = SakeModel(2, hidden=16, depth=1, seed=1, layer_cls=CoordinateLeakLayer)
        res = check_equivariance(lambda s: model_forward(model, s), 3, seeds=5)
        assert not res.passed
        assert res.deviation > 1e-3

    def test_seed_reproducible(self):
        model = SakeModel(2, hidden=8, depth=1, seed=1, layer_cls=CoordinateLeakLayer)
        a = check_equivariance(lambda s: model_forward(model, s), 3, seeds=5)
        b = check_equivariance(lambda s: model_forward(model, s), 3, seeds=5)
        assert (a.seed, a.deviation) == (b.seed, b.deviation)


class TestFiniteDifferences:
    def test_square(self):
        assert abs(finite_diff_grad(lambda p: float(p[0] ** 2), [3.0])[0] - 6.0) < 1e-6

    def test_constant(self):
        assert np.max(np.abs(finite_diff_grad(lambda p: 4.2, np.ones(5)))) < 1e-9

    def test_does_not_mutate_point(self):
        p = np.array([1.0, 2.0])
        finite_diff_grad(lambda q: float(q @ q), p)
        np.testing.assert_array_equal(p, [1.0, 2.0])


class TestSubspaceLogdet:
    def test_basis_is_orthonormal_and_centered(self):
        b = centered_basis(4, 3)
        assert b.shape == (12, 9)
        np.testing.assert_allclose(b.T @ b, np.eye(9), atol=1e-12)
        np.testing.assert_allclose(b.reshape(4, 3, 9).sum(0), 0, atol=1e-12)

    def test_identity(self):
        b = centered_basis(3, 2)
        assert abs(numeric_subspace_logdet(lambda x: x, np.zeros(6), b)) < 1e-9

    def test_uniform_scaling(self):
        b = centered_basis(3, 2)
        assert numeric_subspace_logdet(lambda x: 1.7 * x, np.ones(6), b) == pytest.approx(4 * np.log(1.7), abs=1e-5)

    def test_singular(self):
        b = centered_basis(3, 2)
        with pytest.raises(SingularJacobianError):
            numeric_subspace_logdet(lambda x: 0.0 * x, np.ones(6), b)


class TestSuites:
    def test_names(self):
        assert set(SUITES) == {"equivariance", "gradient", "theorem1", "normalization", "flow_roundtrip", "logdet", "scaling", "mutation"}

    def test_quick_suites_pass(self):
        results = run_verify(["theorem1", "normalization", "gradient", "logdet"])
        assert [r.suite for r in results] == ["theorem1", "normalization", "gradient", "logdet"]
        assert all(r.passed for r in results), format_report(results)

    def test_unknown_suite(self):
        with pytest.raises(ValueError, match="unknown"):
            run_verify(["vibes"])

    def test_mutations_are_caught(self):
        res = {r.suite: r for r in suite_mutation(seeds=5)}
        # the leak breaks equivariance; skipping normalization keeps it but breaks unit directions
        assert res["mutation:coordinate_leak"].passed
        assert res["mutation:skip_normalization/equivariance"].passed
        assert res["mutation:skip_normalization/normalization"].passed
        assert res["mutation:skip_normalization/normalization"].deviation > 1e-9

    def test_normalization_check_discriminates(self):
        good = SakeLayer(np.random.default_rng(0), 8)
        bad = SakeLayer(np.random.default_rng(0), 8, normalize_directions=False)
        assert direction_norm_deviation(good, 0) < 1e-9 < direction_norm_deviation(bad, 0)
