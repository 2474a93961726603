import dataclasses

import numpy as np
import pytest
import torch

from blto.attack import BltoConfig, ablation_mode, inner_step, outer_step, run_blto
from blto.augment import custom_pipeline, sample_views
from blto.data import make_synthetic_set, split_reference
from blto.models import init_encoder, make_generator, param_checksum
from blto.objectives import ClObjectiveConfig
from blto.utils import TrainingDiverged, derive_seed

NORM = ((0.5,) * 3, (0.5,) * 3)


def desk_cfg(**overrides):
    base = dict(
        outer_iterations=2,
        inner_steps=2,
        outer_steps=2,
        inner_lr=0.02,
        outer_lr=1e-3,
        reinit_every=10,
        batch_size=8,
        seed=0,
        arch_tag="tiny-conv",
        embed_dim=8,
        generator_arch="tiny",
        inner_method=ClObjectiveConfig(method="simsiam"),
    )
    base.update(overrides)
    return BltoConfig(**base)


@pytest.fixture(scope="module")
def split():
    data = make_synthetic_set(4, 12, 16, seed=2)
    return split_reference(data, target_class=0, reference_count=4)


@pytest.fixture()
def pipeline():
    return custom_pipeline(16, *NORM)


class TestInnerStep:
    def test_zero_lr_leaves_parameters_unchanged(self, pipeline):
        stack = init_encoder("tiny-conv", 8, seed=1)
        cfg = desk_cfg()
        # Buffers (BN running stats) move on any forward pass; the optimizer
        # step itself must not move parameters with a zero rate.
        before = param_checksum(stack, include_buffers=False)
        inner_step(stack, torch.rand(4, 3, 16, 16), cfg, pipeline, seed=0, lr=0.0)
        assert param_checksum(stack, include_buffers=False) == before

    def test_generator_untouched(self, split, pipeline):
        stack = init_encoder("tiny-conv", 8, seed=1)
        gen = make_generator("tiny", seed=0)
        before = param_checksum(gen)
        inner_step(stack, torch.from_numpy(split.clean_pool.images[:8]), desk_cfg(), pipeline, seed=0)
        assert param_checksum(gen) == before

    def test_single_step_matches_finite_difference_gradient(self, pipeline):
        # Oracle: central differences of the CL loss under frozen augmentation
        # draws. The stop-gradient branch is held at the unperturbed
        # parameters (that is what stopgrad means), so the FD gradient matches
        # what the first momentum-SGD step applies: -lr * grad.
        torch.manual_seed(0)
        stack = init_encoder("tiny-conv", 4, seed=7).double()
        batch = torch.rand(4, 3, 16, 16, dtype=torch.float64)
        views = sample_views(pipeline, batch, seed=3)
        snapshot = {k: v.clone() for k, v in stack.state_dict().items()}

        from blto.objectives import simsiam_pair_loss
        from blto.models import project_and_predict

        stack.train(True)
        with torch.no_grad():
            z1_frozen, _ = project_and_predict(stack, stack.backbone(views.view1))
            z2_frozen, _ = project_and_predict(stack, stack.backbone(views.view2))
        stack.load_state_dict(snapshot)

        def loss_value() -> float:
            stack.load_state_dict(snapshot)
            stack.train(True)
            with torch.no_grad():
                _, p1 = project_and_predict(stack, stack.backbone(views.view1))
                _, p2 = project_and_predict(stack, stack.backbone(views.view2))
                value = float(simsiam_pair_loss(p1, z2_frozen, p2, z1_frozen))
            stack.load_state_dict(snapshot)
            return value

        eps = 1e-5
        fd_grads = {}
        named = dict(stack.named_parameters())
        for name in named:
            grad = torch.zeros_like(named[name])
            snap_flat = snapshot[name].view(-1)
            for i in range(snap_flat.numel()):
                orig = snap_flat[i].item()
                snap_flat[i] = orig + eps
                plus = loss_value()
                snap_flat[i] = orig - eps
                minus = loss_value()
                snap_flat[i] = orig
                grad.view(-1)[i] = (plus - minus) / (2 * eps)
            fd_grads[name] = grad

        stack.load_state_dict(snapshot)
        lr = 0.01
        before = {k: v.detach().clone() for k, v in named.items()}
        from blto.objectives import simsiam_loss

        stack.train(True)
        simsiam_loss(stack, views).backward()
        opt = torch.optim.SGD(stack.parameters(), lr=lr, momentum=0.9)
        opt.step()

        num = 0.0
        den = 0.0
        for name, param in stack.named_parameters():
            update = param.data - before[name]
            expected = -lr * fd_grads[name]
            num += float((update - expected).norm() ** 2)
            den += float(expected.norm() ** 2)
        assert (num ** 0.5) / max(den ** 0.5, 1e-12) <= 1e-3

    def test_nonfinite_loss_aborts(self, pipeline):
        stack = init_encoder("tiny-conv", 8, seed=1)
        with torch.no_grad():
            for p in stack.parameters():
                p.fill_(float("nan"))
        with pytest.raises(TrainingDiverged):
            inner_step(stack, torch.rand(4, 3, 16, 16), desk_cfg(), pipeline, seed=0)


class TestOuterStep:
    def test_zero_lr_leaves_generator_unchanged(self, split, pipeline):
        gen = make_generator("tiny", seed=0)
        stack = init_encoder("tiny-conv", 8, seed=1)
        cfg = desk_cfg(outer_lr=1e-9)
        before = param_checksum(gen)
        opt = torch.optim.Adam(gen.parameters(), lr=0.0)
        outer_step(
            gen, stack,
            torch.from_numpy(split.clean_pool.images[:8]),
            torch.from_numpy(split.reference_set.images),
            cfg, pipeline, seed=0, optimizer=opt,
        )
        assert param_checksum(gen) == before

    def test_surrogate_untouched(self, split, pipeline):
        gen = make_generator("tiny", seed=0)
        stack = init_encoder("tiny-conv", 8, seed=1)
        before = param_checksum(stack)
        outer_step(
            gen, stack,
            torch.from_numpy(split.clean_pool.images[:8]),
            torch.from_numpy(split.reference_set.images),
            desk_cfg(), pipeline, seed=0,
        )
        assert param_checksum(stack) == before

    def test_similarity_increases_over_steps(self, split, pipeline):
        # The recorded objective is its own trend oracle: similarity to the
        # reference embedding must rise on a frozen encoder.
        gen = make_generator("tiny", seed=3)
        stack = init_encoder("tiny-conv", 8, seed=4)
        cfg = desk_cfg(outer_lr=5e-3)
        opt = torch.optim.Adam(gen.parameters(), lr=cfg.outer_lr)
        clean = torch.from_numpy(split.clean_pool.images[:16])
        ref = torch.from_numpy(split.reference_set.images)
        sims = [
            outer_step(gen, stack, clean, ref, cfg, pipeline, seed=derive_seed(9, s), optimizer=opt)
            for s in range(50)
        ]
        assert np.mean(sims[-5:]) > sims[0]


class TestRunBlto:
    def test_loop_accounting_outer_only(self, split, pipeline):
        cfg = desk_cfg(outer_iterations=1, inner_steps=0, outer_steps=1)
        stack_before = init_encoder(cfg.arch_tag, cfg.embed_dim, derive_seed(cfg.seed, "enc-init", 0))
        gen, trace = run_blto(split, cfg, pipeline)
        assert trace.inner_step_count == 0
        assert trace.outer_step_count == 1
        gen_fresh = make_generator(cfg.generator_arch, cfg.epsilon, derive_seed(cfg.seed, "gen-init"))
        assert param_checksum(gen) != param_checksum(gen_fresh)  # psi updated
        assert param_checksum(stack_before) == param_checksum(
            init_encoder(cfg.arch_tag, cfg.embed_dim, derive_seed(cfg.seed, "enc-init", 0))
        )

    def test_loop_accounting_inner_only(self, split, pipeline):
        cfg = desk_cfg(outer_iterations=1, inner_steps=1, outer_steps=0)
        gen, trace = run_blto(split, cfg, pipeline)
        assert trace.inner_step_count == 1
        assert trace.outer_step_count == 0
        gen_fresh = make_generator(cfg.generator_arch, cfg.epsilon, derive_seed(cfg.seed, "gen-init"))
        assert param_checksum(gen) == param_checksum(gen_fresh)  # psi untouched

    def test_loop_accounting_three_by_two(self, split, pipeline):
        cfg = desk_cfg(outer_iterations=3, inner_steps=2, outer_steps=2)
        _, trace = run_blto(split, cfg, pipeline)
        assert trace.inner_step_count == 6
        assert trace.outer_step_count == 6
        assert len(trace) == 3

    def test_reinit_schedule(self, split, pipeline):
        cfg = desk_cfg(outer_iterations=5, inner_steps=1, outer_steps=1, reinit_every=2)
        _, trace = run_blto(split, cfg, pipeline)
        assert trace.reinit_count == 2
        assert [row.reinit for row in trace.rows] == [False, False, True, False, True]

    def test_deterministic_final_generator(self, split, pipeline):
        cfg = desk_cfg(outer_iterations=2, inner_steps=1, outer_steps=1)
        gen_a, _ = run_blto(split, cfg, pipeline)
        gen_b, _ = run_blto(split, cfg, pipeline)
        assert param_checksum(gen_a) == param_checksum(gen_b)

    def test_trace_ledger_save_excludes_timing(self, split, pipeline, tmp_path):
        cfg = desk_cfg(outer_iterations=2, inner_steps=1, outer_steps=1)
        _, trace = run_blto(split, cfg, pipeline)
        path = trace.save(tmp_path / "trace.csv")
        header = path.read_text().splitlines()[0]
        assert header == "iteration,inner_loss,outer_similarity,reinit"
        assert (tmp_path / "timing.json").is_file()


class TestAblation:
    def test_no_inner_zeroes_inner_steps(self):
        cfg = ablation_mode(desk_cfg(), "no_inner")
        assert cfg.inner_steps == 0

    def test_no_outer_zeroes_outer_steps(self):
        cfg = ablation_mode(desk_cfg(), "no_outer")
        assert cfg.outer_steps == 0

    def test_full_is_identity(self):
        cfg = desk_cfg()
        assert ablation_mode(cfg, "full") == cfg

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            ablation_mode(desk_cfg(), "no_anything")


class TestConfigValidation:
    def test_epsilon_bounds(self):
        with pytest.raises(ValueError):
            desk_cfg(epsilon=0.0)
        with pytest.raises(ValueError):
            desk_cfg(epsilon=1.5)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            desk_cfg(inner_steps=-1)
