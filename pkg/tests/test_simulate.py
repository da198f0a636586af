import json
import os

import numpy as np
import pytest

from portpatch import (
    SimConfig,
    delta_weight,
    fit_adapter,
    gen_base_and_update,
    gen_task,
    numerical_rank,
    persist_quadruple,
    read_adapter,
    read_container,
    run_cycle,
)
from portpatch.errors import ConfigError, FitError
from portpatch.simulate import (
    MODULE_NAME,
    ROLE_SAMPLE_OLD,
    ROLE_TASK,
    TENSOR_NAME,
    format_sim_config,
    parse_sim_config,
    sub_seed,
)

from conftest import philox, small_sim_config


class TestSimConfig:
    def test_defaults_are_valid(self):
        cfg = SimConfig()
        assert cfg.dim == 256 and cfg.rank_cp == 64 and cfg.rank_ds == 8
        assert cfg.alpha_cp == 128.0

    @pytest.mark.parametrize(
        "overrides",
        [
            dict(rank_ds=64),              # rank_ds must stay below rank_cp
            dict(rank_cp=300),             # rank_cp must fit in dim
            dict(task_rank=9),             # task_rank bounded by rank_ds
            dict(samples=100),             # need samples >= dim
            dict(base_scale=0.0),
            dict(fit_lr=0.0),
            dict(seed=-1),
        ],
    )
    def test_invariant_violations(self, overrides):
        with pytest.raises(ConfigError):
            SimConfig(**overrides)

    def test_format_parse_round_trip(self):
        cfg = small_sim_config(seed=5)
        assert parse_sim_config(format_sim_config(cfg)) == cfg

    def test_partial_config_uses_defaults(self):
        cfg = parse_sim_config("seed = 3\n\n# comment\nnoise_std = 0.01\n")
        assert cfg.seed == 3 and cfg.noise_std == 0.01 and cfg.dim == 256

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_sim_config("velocity = 9\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_sim_config("dim = many\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_sim_config("dim 256\n")


class TestGenBaseAndUpdate:
    def test_null_update_keeps_base(self):
        cfg = small_sim_config(cp_scale=1e-30)
        theta, theta_prime, _ = gen_base_and_update(cfg)
        drift = np.max(np.abs(theta_prime.tensors[TENSOR_NAME] - theta.tensors[TENSOR_NAME]))
        assert drift <= 1e-12

    def test_update_rank_bounded_by_factor_width(self):
        cfg = small_sim_config()
        _, _, cp_patch = gen_base_and_update(cfg)
        assert numerical_rank(delta_weight(cp_patch, MODULE_NAME)) <= cfg.rank_cp

    def test_deterministic(self):
        cfg = small_sim_config(seed=9)
        first = gen_base_and_update(cfg)
        second = gen_base_and_update(cfg)
        assert first[0].tensors_equal(second[0])
        assert first[1].tensors_equal(second[1])

    def test_versions_differ(self):
        theta, theta_prime, _ = gen_base_and_update(small_sim_config(seed=2))
        assert theta.metadata["model_version"] != theta_prime.metadata["model_version"]


class TestGenTask:
    def test_clean_null_task_reproduces_reference(self):
        cfg = small_sim_config(noise_std=0.0, task_scale=0.0)
        w = philox(1).normal(0.0, 1.0, size=(cfg.dim, cfg.dim))
        task = gen_task(cfg, w, task_seed=10, sample_seed=11)
        assert np.array_equal(task.y, task.x @ w)

    def test_planted_rank(self):
        cfg = small_sim_config()
        w = np.zeros((cfg.dim, cfg.dim))
        task = gen_task(cfg, w, task_seed=12, sample_seed=13)
        assert numerical_rank(task.planted) <= cfg.task_rank

    def test_same_seeds_bitwise_equal(self):
        cfg = small_sim_config()
        w = philox(2).normal(0.0, 1.0, size=(cfg.dim, cfg.dim))
        first = gen_task(cfg, w, task_seed=14, sample_seed=15)
        second = gen_task(cfg, w, task_seed=14, sample_seed=15)
        assert first.x.tobytes() == second.x.tobytes()
        assert first.y.tobytes() == second.y.tobytes()

    def test_task_seed_pins_direction_across_references(self):
        cfg = small_sim_config()
        w1 = philox(3).normal(0.0, 1.0, size=(cfg.dim, cfg.dim))
        w2 = philox(4).normal(0.0, 1.0, size=(cfg.dim, cfg.dim))
        t1 = gen_task(cfg, w1, task_seed=16, sample_seed=17)
        t2 = gen_task(cfg, w2, task_seed=16, sample_seed=18)
        assert np.array_equal(t1.planted, t2.planted)


class TestFitAdapter:
    def _task_and_weights(self, cfg, seed=0):
        theta, _, _ = gen_base_and_update(cfg)
        w = theta.tensors[TENSOR_NAME]
        task = gen_task(cfg, w, sub_seed(cfg.seed, ROLE_TASK), sub_seed(cfg.seed, ROLE_SAMPLE_OLD))
        return w, task

    def test_zero_steps_is_zero_patch(self):
        cfg = small_sim_config()
        w, task = self._task_and_weights(cfg)
        result = fit_adapter(w, task, cfg.rank_ds, cfg.alpha_ds, 0, cfg.fit_lr, 99)
        assert np.array_equal(result.factors.b, np.zeros_like(result.factors.b))
        assert len(result.losses) == 1

    def test_noise_free_convergence(self):
        cfg = small_sim_config(noise_std=0.0, fit_steps=400)
        w, task = self._task_and_weights(cfg)
        result = fit_adapter(w, task, cfg.rank_ds, cfg.alpha_ds, cfg.fit_steps, cfg.fit_lr, 98)
        assert result.final_loss <= 1e-4 * result.losses[0]

    def test_gradients_match_central_differences(self):
        # finite-difference oracle on a 4x4 instance
        d, r, m = 4, 2, 8
        w = philox(20).normal(0.0, 0.5, size=(d, d))
        x = philox(21).normal(0.0, 1.0, size=(m, d))
        y = philox(22).normal(0.0, 1.0, size=(m, d))
        a = philox(23).normal(0.0, 0.3, size=(r, d))
        b = philox(24).normal(0.0, 0.3, size=(d, r))
        s = 1.5

        def loss(a_mat, b_mat):
            p = x @ (w + s * (b_mat @ a_mat)) - y
            return float(np.sum(p * p)) / m

        p = x @ (w + s * (b @ a)) - y
        grad_b = (2.0 * s / m) * (x.T @ (p @ a.T))
        grad_a = (2.0 * s / m) * ((b.T @ x.T) @ p)
        h = 1e-6
        for mat, grad in ((a, grad_a), (b, grad_b)):
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    orig = mat[i, j]
                    mat[i, j] = orig + h
                    up = loss(a, b)
                    mat[i, j] = orig - h
                    down = loss(a, b)
                    mat[i, j] = orig
                    fd = (up - down) / (2 * h)
                    assert abs(fd - grad[i, j]) <= 1e-5 * max(abs(fd), 1e-12)

    def test_divergence_reports_step(self):
        cfg = small_sim_config()
        w, task = self._task_and_weights(cfg)
        with pytest.raises(FitError, match=r"step \d+"):
            fit_adapter(w, task, cfg.rank_ds, cfg.alpha_ds, 200, 50.0, 97)

    def test_loss_monotone_for_default_rate(self):
        cfg = small_sim_config()
        w, task = self._task_and_weights(cfg)
        result = fit_adapter(w, task, cfg.rank_ds, cfg.alpha_ds, cfg.fit_steps, cfg.fit_lr, 96)
        losses = np.array(result.losses)
        assert np.all(np.diff(losses) <= 1e-12)


class TestRunCycle:
    def test_quadruple_well_formed(self):
        quad = run_cycle(small_sim_config(seed=1))
        assert quad.theta.names() == [TENSOR_NAME]
        assert quad.patch_old.rank == quad.patch_new.rank == 4
        drift = np.max(
            np.abs(
                quad.theta_prime.tensors[TENSOR_NAME]
                - quad.theta.tensors[TENSOR_NAME]
                - delta_weight(_cp_of(small_sim_config(seed=1)), MODULE_NAME)
            )
        )
        assert drift <= 1e-9

    def test_deterministic(self):
        cfg = small_sim_config(seed=6)
        first = run_cycle(cfg)
        second = run_cycle(cfg)
        assert first.theta.tensors_equal(second.theta)
        for tag in ("patch_old", "patch_new"):
            pa = getattr(first, tag).modules[MODULE_NAME]
            pb = getattr(second, tag).modules[MODULE_NAME]
            assert pa.a.tobytes() == pb.a.tobytes()
            assert pa.b.tobytes() == pb.b.tobytes()

    def test_degenerate_evolution_agreeing_patches(self):
        # With a vanishing continued-pretraining update the two fits solve the
        # same problem up to fresh data draws, so the deltas nearly agree.
        cfg = small_sim_config(cp_scale=1e-30, noise_std=0.0, fit_steps=400)
        quad = run_cycle(cfg)
        d_old = delta_weight(quad.patch_old, MODULE_NAME)
        d_new = delta_weight(quad.patch_new, MODULE_NAME)
        gap = np.linalg.norm(d_new - d_old)
        assert gap <= 1e-2 * cfg.task_scale

    def test_patch_ranks_numerically_bounded(self):
        quad = run_cycle(small_sim_config(seed=7))
        for patch in (quad.patch_old, quad.patch_new):
            assert numerical_rank(delta_weight(patch, MODULE_NAME)) <= patch.rank

    def test_provenance_carries_config_and_losses(self):
        cfg = small_sim_config(seed=8)
        quad = run_cycle(cfg)
        assert quad.provenance["config"]["seed"] == 8
        assert quad.provenance["final_loss_old"] > 0.0
        assert set(quad.provenance["seeds"]) >= {"theta", "task", "init_old", "init_new"}


def _cp_of(cfg):
    _, _, cp_patch = gen_base_and_update(cfg)
    return cp_patch


class TestPersistQuadruple:
    def test_files_round_trip(self, tmp_path):
        cfg = small_sim_config(seed=4)
        quad = run_cycle(cfg)
        paths = persist_quadruple(quad, str(tmp_path / "out"))
        assert read_container(paths["theta"]) == quad.theta
        assert read_container(paths["theta_prime"]) == quad.theta_prime
        back = read_adapter(paths["patch_old"])
        assert back.rank == quad.patch_old.rank
        assert back.modules[MODULE_NAME].a.tobytes() == quad.patch_old.modules[MODULE_NAME].a.tobytes()
        with open(paths["provenance"], "r", encoding="utf-8") as handle:
            prov = json.load(handle)
        assert prov["config"]["dim"] == cfg.dim
        assert os.path.getsize(paths["theta"]) > 8
